"""Flat key -> float64 array container used for parameters and checkpoints.

File layout (all integers little-endian)::

    bytes 0..7    magic  b"SGSPARAM"
    bytes 8..15   uint64 header length H
    next H bytes  UTF-8 JSON header:
                    {"format": 1,
                     "meta": {...},                      # free-form, e.g. model config
                     "tensors": [{"key": str, "shape": [int, ...],
                                  "offset": int, "count": int}, ...]}
    remainder     concatenated tensor payloads, float64 little-endian ("<f8"),
                  row-major; ``offset`` counts bytes from the start of the payload

The header is written with sorted keys and no whitespace so equal contents give
byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SGSPARAM"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries = []
    payload = []
    offset = 0
    for key, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8", order="C")
        entries.append({"key": key, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        payload.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(
        {"format": FORMAT_VERSION, "meta": dict(meta or {}), "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payload)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a parameter container (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported container format {header.get('format')!r}")
    base = 16 + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        stop = start + 8 * entry["count"]
        if stop > len(blob):
            raise CheckpointError(f"truncated payload for {entry['key']!r}")
        arr = np.frombuffer(blob[start:stop], dtype="<f8").astype(np.float64)
        arrays[entry["key"]] = arr.reshape(tuple(entry["shape"]))
    return arrays, header["meta"]


def save(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    """Write the container and return its sha256 hex digest."""
    blob = dumps(arrays, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Word vectors for object labels: GloVe-style text files or a seeded fallback."""
from __future__ import annotations

import hashlib
import logging
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


def hashed_vector(key: str, dim: int, seed: int = 0) -> np.ndarray:
    """Standard-normal vector determined only by (seed, key, dim)."""
    digest = hashlib.sha256(f"{seed}\x1f{dim}\x1f{key}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
    return rng.standard_normal(dim)


class EmbeddingProvider:
    """Maps label strings to fixed vectors.

    With a file, each whitespace-separated token of a label is looked up and the
    token vectors are averaged; tokens missing from the file fall back to a
    seeded hash vector (logged once per token). Without a file the whole label
    is hashed.
    """

    def __init__(self, dim: int, table: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.dim = int(dim)
        self.seed = seed
        self.table = table
        self.source = "file" if table is not None else "deterministic-fallback"
        self._warned: set[str] = set()

    @classmethod
    def from_file(cls, path, dim: int | None = None, seed: int = 0) -> "EmbeddingProvider":
        table: dict[str, np.ndarray] = {}
        with open(Path(path), encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                vec = np.array([float(v) for v in parts[1:]])
                if dim is None:
                    dim = vec.size
                if vec.size != dim:
                    raise ValueError(f"{path}:{lineno}: expected {dim} values, got {vec.size}")
                table[parts[0]] = vec
        if dim is None:
            raise ValueError(f"{path}: empty embedding file")
        return cls(dim, table, seed)

    def _token(self, token: str) -> np.ndarray:
        vec = self.table.get(token)
        if vec is None:
            if token not in self._warned:
                self._warned.add(token)
                log.warning("token %r not in embedding file; using hashed fallback vector", token)
            vec = hashed_vector(token, self.dim, self.seed)
        return vec

    def embed(self, label: str) -> np.ndarray:
        if self.table is None:
            return hashed_vector(label, self.dim, self.seed)
        tokens = label.split() or [label]
        return np.mean([self._token(t) for t in tokens], axis=0)

    def table_for(self, labels) -> np.ndarray:
        return np.stack([self.embed(label) for label in labels]) if labels else np.zeros((0, self.dim))


def embed_label(provider: EmbeddingProvider, label: str) -> np.ndarray:
    return provider.embed(label)

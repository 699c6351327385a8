"""Channel routing between the four pathways of the shuffle stage.

A routing plan is a permutation of the ``4 * d`` channels of the concatenated
pathways. Plans are built by applying partition/concat to channel ids, so the
same plan drives the differentiable forward pass and structural tracing.

Modes
    full          pathway s receives quarter s of every pathway (order 1..4)
    pair_to_pair  paired pathways swap halves, interleaved channel-by-channel;
                  pairs follow a round-robin schedule
    none          identity
"""
from __future__ import annotations

import numpy as np

MODES = ("full", "pair_to_pair", "none")
N_PATHWAYS = 4
PAIR_SCHEDULE = (((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2)))
ALL_ORIGINS = (1 << N_PATHWAYS) - 1


def _interleave(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty(a.size + b.size, dtype=a.dtype)
    out[0::2] = a
    out[1::2] = b
    return out


def routing_plan(mode: str, layer: int, d: int) -> np.ndarray:
    """Channel permutation applied before shuffle layer ``layer`` (0-based)."""
    if mode not in MODES:
        raise ValueError(f"unknown shuffle mode {mode!r}")
    ids = [np.arange(k * d, (k + 1) * d) for k in range(N_PATHWAYS)]
    if mode == "none":
        return np.concatenate(ids)
    if mode == "full":
        if d % N_PATHWAYS:
            raise ValueError(f"full shuffle needs width divisible by {N_PATHWAYS}, got {d}")
        quarters = [np.split(x, N_PATHWAYS) for x in ids]
        return np.concatenate([np.concatenate([quarters[k][s] for k in range(N_PATHWAYS)]) for s in range(N_PATHWAYS)])
    if d % 2:
        raise ValueError(f"pair-to-pair shuffle needs an even width, got {d}")
    new = list(ids)
    for a, b in PAIR_SCHEDULE[layer % len(PAIR_SCHEDULE)]:
        a_halves, b_halves = np.split(ids[a], 2), np.split(ids[b], 2)
        new[a] = _interleave(a_halves[0], b_halves[0])
        new[b] = _interleave(a_halves[1], b_halves[1])
    return np.concatenate(new)


def trace_origins(mode: str, n_layers: int, d: int, mixing: bool = True) -> list[np.ndarray]:
    """Per-channel origin bitmasks after each shuffle layer.

    Returns ``n_layers`` arrays of shape (4, d); bit k set means the channel
    depends on stage-one pathway k. With ``mixing`` the encoder block after each
    routing step is treated as dense across its pathway's channels (what a
    transformer block does); without it the block is an identity probe.
    """
    origins = np.repeat(1 << np.arange(N_PATHWAYS), d)
    history = []
    for layer in range(n_layers):
        origins = origins[routing_plan(mode, layer, d)]
        per_path = origins.reshape(N_PATHWAYS, d)
        if mixing:
            merged = np.bitwise_or.reduce(per_path, axis=1)
            per_path = np.repeat(merged[:, None], d, axis=1)
        origins = per_path.reshape(-1)
        history.append(per_path.copy())
    return history


def pathway_coverage(origins: np.ndarray) -> list[set[int]]:
    """Set of stage-one pathways feeding each pathway (union over its channels)."""
    merged = np.bitwise_or.reduce(origins, axis=1)
    return [{k for k in range(N_PATHWAYS) if m >> k & 1} for m in merged]


def layers_to_full_coverage(mode: str, d: int, max_layers: int = 12, mixing: bool = True) -> int | None:
    """Smallest layer count after which every channel (mixing) or every pathway
    (identity probe) draws on all four origins; ``None`` if never within ``max_layers``."""
    for layer, per_path in enumerate(trace_origins(mode, max_layers, d, mixing), start=1):
        covered = np.all(per_path == ALL_ORIGINS) if mixing else np.all(np.bitwise_or.reduce(per_path, axis=1) == ALL_ORIGINS)
        if covered:
            return layer
    return None

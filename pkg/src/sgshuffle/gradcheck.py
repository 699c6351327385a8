"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor, no_grad


def relative_error(g_ad, g_fd) -> np.ndarray:
    g_ad = np.asarray(g_ad, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    return np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))


@dataclass
class GradCheckResult:
    errors: dict[str, float] = field(default_factory=dict)
    probes: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error <= tol


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare ``backward`` gradients of scalar ``f()`` with central differences.

    ``f`` must rebuild its graph from ``params`` on every call. Parameter data is
    perturbed in place during probing and restored afterwards. When
    ``max_entries`` is set, at most that many randomly chosen entries of each
    parameter are probed.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    if loss.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    result = GradCheckResult()
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            numeric = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                try:
                    flat[i] = orig + eps
                    up = f().item()
                    flat[i] = orig - eps
                    down = f().item()
                except NonFiniteError as exc:
                    raise NonFiniteError(f"non-finite value while probing {name}[{i}]") from exc
                finally:
                    flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NonFiniteError(f"non-finite value while probing {name}[{i}]")
                numeric[j] = (up - down) / (2 * eps)
            ad = analytic[name].reshape(-1)[idx]
            result.errors[name] = float(relative_error(ad, numeric).max()) if idx.size else 0.0
            result.probes[name] = int(idx.size)
    for p in params.values():
        p.zero_grad()
    return result

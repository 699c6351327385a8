"""Transformer encoder building blocks on top of :mod:`sgshuffle.tensor`.

Parameters live in flat ``{name: Tensor}`` mappings; every function here takes
the mapping plus a key prefix so the same code serves the category encoders and
the shuffle pathways.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LN_EPS = 1e-5


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_linear(rng, name: str, fan_in: int, fan_out: int, bias: bool = True) -> dict[str, np.ndarray]:
    out = {f"{name}.weight": glorot(rng, fan_in, fan_out)}
    if bias:
        out[f"{name}.bias"] = np.zeros(fan_out)
    return out


def init_layer_norm(name: str, d: int) -> dict[str, np.ndarray]:
    return {f"{name}.gain": np.ones(d), f"{name}.bias": np.zeros(d)}


def init_attention(rng, name: str, d: int) -> dict[str, np.ndarray]:
    out = {}
    out.update(init_linear(rng, f"{name}.query", d, d))
    # a key bias shifts every score in a row by the same amount; softmax ignores it
    out.update(init_linear(rng, f"{name}.key", d, d, bias=False))
    out.update(init_linear(rng, f"{name}.value", d, d))
    out.update(init_linear(rng, f"{name}.out", d, d))
    return out


def init_encoder_block(rng, name: str, d: int, ffn_hidden: int) -> dict[str, np.ndarray]:
    out = init_attention(rng, f"{name}.attn", d)
    out.update(init_layer_norm(f"{name}.norm1", d))
    out.update(init_linear(rng, f"{name}.ffn1", d, ffn_hidden))
    out.update(init_linear(rng, f"{name}.ffn2", ffn_hidden, d))
    out.update(init_layer_norm(f"{name}.norm2", d))
    return out


def apply_linear(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return T.linear(x, params[f"{name}.weight"], params.get(f"{name}.bias"))


def multi_head_self_attention(
    x: Tensor,
    params: Mapping[str, Tensor],
    name: str,
    heads: int,
    mask: Tensor | None = None,
) -> Tensor:
    """Scaled dot-product self-attention over the rows of ``x`` (n x d).

    ``mask`` is an optional additive (n x n) constant; large negative entries
    block attention between rows (used to keep scenes in a batch apart).
    """
    n, d = x.shape
    if d % heads:
        raise ShapeError(f"model width {d} not divisible by {heads} heads")
    dk = d // heads

    def split(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (n, heads, dk)), (1, 0, 2))

    q = split(apply_linear(x, params, f"{name}.query"))
    k = split(apply_linear(x, params, f"{name}.key"))
    v = split(apply_linear(x, params, f"{name}.value"))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dk))
    if mask is not None:
        scores = T.add(scores, mask)
    weights = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(weights, v), (1, 0, 2)), (n, d))
    return apply_linear(ctx, params, f"{name}.out")


def feed_forward(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return apply_linear(T.relu(apply_linear(x, params, f"{name}.ffn1")), params, f"{name}.ffn2")


def encoder_block(
    x: Tensor,
    params: Mapping[str, Tensor],
    name: str,
    heads: int,
    mask: Tensor | None = None,
) -> Tensor:
    """Post-norm block: LN(attn(x) + x), then LN(ffn(h) + h)."""
    h = T.add(multi_head_self_attention(x, params, f"{name}.attn", heads, mask), x)
    h = T.layer_norm(h, params[f"{name}.norm1.gain"], params[f"{name}.norm1.bias"], LN_EPS)
    out = T.add(feed_forward(h, params, name), h)
    return T.layer_norm(out, params[f"{name}.norm2.gain"], params[f"{name}.norm2.bias"], LN_EPS)

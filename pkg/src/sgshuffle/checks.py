"""Gradient checks for each differentiable op and for the end-to-end loss.

Each check builds a small random problem, reduces the op output to a scalar
through a fixed random projection (so every output entry matters), and compares
``backward`` with central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data.synthetic import SyntheticConfig, generate_synthetic
from .gradcheck import grad_check
from .layers import encoder_block, init_encoder_block, multi_head_self_attention
from .losses import LossSpec, build_targets, frequency_weights, total_loss, weighted_ce
from .model import ModelConfig, batch_scenes, forward, init_params
from .tensor import Tensor

DEFAULT_TOL = 1e-4
E2E_MODES = ("full", "pair_to_pair", "none")


@dataclass
class CheckRow:
    name: str
    max_error: float
    probes: int
    seconds: float
    tol: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def _var(rng, *shape, positive=False) -> Tensor:
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def _project(out: Tensor, seed: int = 99) -> Tensor:
    """Scalar <out, R> with a fixed random R."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return T.tensor_sum(T.mul(out, r))


def _op_problems() -> dict[str, Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict]]]:
    def unary(fn, shape=(3, 8), positive=False):
        def build(rng):
            x = _var(rng, *shape, positive=positive)
            return (lambda: _project(fn(x))), {"x": x}

        return build

    def binary(fn, sa, sb):
        def build(rng):
            a, b = _var(rng, *sa), _var(rng, *sb)
            return (lambda: _project(fn(a, b))), {"a": a, "b": b}

        return build

    def layer_norm(rng):
        x, g, b = _var(rng, 3, 8), _var(rng, 8), _var(rng, 8)
        return (lambda: _project(T.layer_norm(x, g, b, 1e-5))), {"x": x, "gain": g, "bias": b}

    def linear(rng):
        x, w, b = _var(rng, 3, 5), _var(rng, 5, 4), _var(rng, 4)
        return (lambda: _project(T.linear(x, w, b))), {"x": x, "weight": w, "bias": b}

    def attention(rng):
        arrays = {}
        for part in ("query", "key", "value", "out"):
            arrays[f"a.{part}.weight"] = rng.standard_normal((8, 8)) * 0.5
            if part != "key":
                arrays[f"a.{part}.bias"] = rng.standard_normal(8) * 0.1
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        x = _var(rng, 3, 8)
        params["x"] = x
        return (lambda: _project(multi_head_self_attention(x, params, "a", heads=4))), params

    def encoder_stack(rng):
        params = {}
        for layer in range(2):
            params.update(init_encoder_block(rng, f"b{layer}", 8, 16))
        params = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        x = _var(rng, 3, 8)

        def f():
            h = x
            for layer in range(2):
                h = encoder_block(h, params, f"b{layer}", heads=4)
            return _project(h)

        return f, {**params, "x": x}

    def concat_partition(rng):
        a, b = _var(rng, 3, 4), _var(rng, 3, 4)

        def f():
            parts = T.partition(T.concat([a, b], axis=1), 4, axis=1)
            return _project(T.concat([parts[3], parts[1], parts[0], parts[2]], axis=1))

        return f, {"a": a, "b": b}

    def embedding(rng):
        table = _var(rng, 5, 4)
        idx = np.array([0, 3, 3, 1])
        return (lambda: _project(T.embedding_lookup(table, idx))), {"table": table}

    def gather(rng):
        x = _var(rng, 3, 8)
        perm = rng.permutation(8)
        return (lambda: _project(T.gather_columns(x, perm))), {"x": x}

    def wce(rng):
        x = _var(rng, 5, 4)
        targets = rng.integers(0, 4, size=5)
        w = rng.uniform(0.5, 2.0, size=4)
        return (lambda: weighted_ce(x, targets, w)), {"logits": x}

    return {
        "add": binary(T.add, (3, 8), (8,)),
        "mul": binary(T.mul, (3, 8), (3, 8)),
        "matmul": binary(T.matmul, (3, 5), (5, 4)),
        "relu": unary(T.relu),
        "exp": unary(T.exp),
        "log": unary(T.log, positive=True),
        "softmax": unary(lambda x: T.softmax(x, axis=1)),
        "log_softmax": unary(lambda x: T.log_softmax(x, axis=1)),
        "mean": unary(lambda x: T.mean(x, axis=0)),
        "transpose": unary(lambda x: T.transpose(x, (1, 0))),
        "layer_norm": layer_norm,
        "linear": linear,
        "attention": attention,
        "encoder_stack": encoder_stack,
        "concat_partition": concat_partition,
        "embedding_lookup": embedding,
        "gather_columns": gather,
        "weighted_ce": wce,
    }


OPS = tuple(_op_problems())


def check_op(name: str, seed: int = 0, tol: float = DEFAULT_TOL) -> CheckRow:
    problems = _op_problems()
    if name not in problems:
        raise KeyError(f"unknown op {name!r}; choose from {', '.join(problems)}")
    start = time.perf_counter()
    f, params = problems[name](np.random.default_rng(seed))
    res = grad_check(f, params)
    return CheckRow(name, res.max_error, sum(res.probes.values()), time.perf_counter() - start, tol)


def tiny_config(mode: str, catalog) -> ModelConfig:
    return ModelConfig.for_catalog(
        catalog, d_model=8, n_encoder_layers=1, n_heads=4, n_shuffle_layers=2, shuffle_mode=mode,
        ffn_hidden=16, d_v=4, d_e=4, seed=1,
    )  # fmt: skip


def check_end_to_end(mode: str, max_entries: int = 4, seed: int = 0, tol: float = DEFAULT_TOL) -> CheckRow:
    """Total loss (weighted final CE + category losses) on a 3-object scene."""
    start = time.perf_counter()
    ds, catalog = generate_synthetic(SyntheticConfig(n_scenes=1, n_objects_range=(3, 3), d_v=4, seed=seed))
    config = tiny_config(mode, catalog)
    rng = np.random.default_rng(seed)
    params = init_params(config, rng.standard_normal((config.n_object_classes, config.d_e)))
    spec = LossSpec(frequency_weights(catalog), weighted_phase_start=0, negative_ratio=None)
    batch = batch_scenes(list(ds))
    targets = build_targets(list(ds), batch, catalog, spec)

    def f():
        return total_loss(forward(params, batch), targets, spec, epoch=0)[0]

    res = grad_check(f, params.tensors, max_entries=max_entries, seed=seed)
    return CheckRow(f"end_to_end[{mode}]", res.max_error, sum(res.probes.values()), time.perf_counter() - start, tol)


def run_all(ops=None, modes=E2E_MODES, max_entries: int = 4, tol: float = DEFAULT_TOL) -> list[CheckRow]:
    rows = [check_op(name, tol=tol) for name in (OPS if ops is None else ops)]
    rows += [check_end_to_end(m, max_entries=max_entries, tol=tol) for m in modes]
    return rows


def format_rows(rows: list[CheckRow]) -> str:
    width = max([len(r.name) for r in rows] + [5])
    lines = [f"{'check':<{width}}  {'max rel-err':>11}  {'probes':>6}  {'sec':>6}  result"]
    for r in rows:
        lines.append(
            f"{r.name:<{width}}  {r.max_error:11.3e}  {r.probes:6d}  {r.seconds:6.2f}  {'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)

"""Adam, the warmup/step-decay schedule and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data.catalog import CATEGORIES, PredicateCatalog
from .data.embeddings import EmbeddingProvider
from .data.scenes import SceneDataset, SceneRecord
from .losses import LossSpec, build_targets, frequency_weights, total_loss
from .model import ModelConfig, ModelParams, forward, init_params, make_batch, save_model, scene_arrays
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

WEIGHTED_CE_MODES = ("on", "off", "late")
LATE_PHASE_FRACTION = 2 / 3


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    warmup_steps: int = 500
    decay_factor: float = 0.1
    decay_milestones: tuple[float, ...] = (0.6, 0.8)  # fractions of the epoch budget
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    pair_cap: int | None = 64  # sampled no-relation pairs per scene
    protocol: str = "predcls"
    eval_every: int = 1
    eval_ks: tuple[int, ...] = (20, 50, 100)

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        if self.protocol not in ("predcls", "sgcls"):
            raise ValueError("training protocol must be predcls or sgcls")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        for key in ("betas", "decay_milestones", "eval_ks"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class Adam:
    """Adam with bias correction. Parameters whose ``grad`` is None are left untouched."""

    def __init__(self, params: Mapping[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def learning_rate(cfg: TrainConfig, step: int, epoch: int) -> float:
    """LR for 1-based optimizer ``step`` inside 0-based ``epoch``."""
    lr = cfg.learning_rate
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        lr *= step / cfg.warmup_steps
    for frac in cfg.decay_milestones:
        if epoch >= int(round(frac * cfg.epochs)):
            lr *= cfg.decay_factor
    return lr


def loss_spec_for(mode: str, catalog: PredicateCatalog, epochs: int, **kw) -> LossSpec:
    """LossSpec for a --weighted-ce mode: on (from the first epoch), off, or late (last third)."""
    if mode not in WEIGHTED_CE_MODES:
        raise ValueError(f"weighted-ce mode must be one of {WEIGHTED_CE_MODES}")
    if mode == "off":
        return LossSpec(weighting_mode="uniform", **kw)
    start = 0 if mode == "on" else int(round(LATE_PHASE_FRACTION * epochs))
    return LossSpec(frequency_weights(catalog), weighting_mode="inverse_sqrt_frequency", weighted_phase_start=start, **kw)


def label_table(dataset: SceneDataset, config: ModelConfig, provider: EmbeddingProvider | None = None) -> np.ndarray:
    provider = provider or EmbeddingProvider(config.d_e, seed=config.seed)
    return provider.table_for(dataset.object_classes)


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    checkpoint_sha256: str | None = None


def _epoch_record(epoch, lr, totals, parts, n_steps, val_report) -> dict:
    rec = {"epoch": epoch, "lr": lr, "total_loss": totals / n_steps if n_steps else 0.0}
    rec["final_loss"] = parts["final"] / n_steps if n_steps else 0.0
    for cat in CATEGORIES:
        rec[f"loss_{cat.lower()}"] = parts[cat] / n_steps if n_steps else 0.0
    if val_report is not None:
        for k, rep in val_report.items():
            rec[f"val_mR@{k}"] = rep.mean_recall
    return rec


def train(
    dataset: SceneDataset | Sequence[SceneRecord],
    model_config: ModelConfig,
    train_config: TrainConfig,
    loss_spec: LossSpec,
    catalog: PredicateCatalog,
    *,
    label_embeddings: np.ndarray | None = None,
    object_classes: Sequence[str] = (),
    val_scenes: Sequence[SceneRecord] | None = None,
    log_path=None,
    checkpoint_path=None,
    init: ModelParams | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from a seeded initialisation; fully deterministic given the configs.

    Each epoch visits the scenes in a permutation drawn from (seed, epoch). The
    JSON-lines log at ``log_path`` gets one record per epoch.
    """
    model_config.validate()
    train_config.validate()
    scenes = list(dataset)
    if isinstance(dataset, SceneDataset):
        object_classes = object_classes or dataset.object_classes
        if label_embeddings is None:
            label_embeddings = label_table(dataset, model_config)
    if label_embeddings is None:
        raise ValueError("label_embeddings are required when training on a bare scene list")
    params = init.copy() if init is not None else init_params(model_config, label_embeddings, object_classes)
    opt = Adam(params.tensors, train_config.betas, train_config.adam_eps)
    cache = [scene_arrays(s, train_config.protocol) for s in scenes]
    if log_path is not None:
        Path(log_path).write_text("")

    result = TrainResult(params)
    n_steps_per_epoch = math.ceil(len(scenes) / train_config.batch_size) if scenes else 0
    step = 0
    for epoch in range(train_config.epochs):
        rng = np.random.default_rng([train_config.seed, epoch])
        order = rng.permutation(len(scenes))
        totals, parts = 0.0, {"final": 0.0, **{c: 0.0 for c in CATEGORIES}}
        lr = learning_rate(train_config, step + 1, epoch)
        for b in range(n_steps_per_epoch):
            idx = order[b * train_config.batch_size : (b + 1) * train_config.batch_size]
            batch_scenes = [scenes[i] for i in idx]
            batch = make_batch([cache[i] for i in idx])
            batch_id = f"epoch {epoch} batch {b} (scenes {[int(i) for i in idx]})"
            try:
                out = forward(params, batch)
                targets = build_targets(batch_scenes, batch, catalog, loss_spec, rng, train_config.pair_cap)
                loss, comp = total_loss(out, targets, loss_spec, epoch)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value in {batch_id}: {exc}") from None
            value = loss.item()
            if not math.isfinite(value):
                max_logit = float(np.max(np.abs(out.final_logits.data)))
                raise TrainingError(f"non-finite loss in {batch_id}; max |logit| {max_logit:.3g}")
            step += 1
            lr = learning_rate(train_config, step, epoch)
            if loss.requires_grad:
                params.zero_grad()
                loss.backward()
                opt.step(lr)
            result.step_losses.append(value)
            totals += value
            for k, v in comp.items():
                parts[k] += v
        val_report = None
        last = epoch == train_config.epochs - 1
        if val_scenes is not None and ((epoch + 1) % train_config.eval_every == 0 or last):
            from .evaluation import evaluate_model

            val_report = evaluate_model(params, val_scenes, catalog, train_config.protocol, train_config.eval_ks)
        rec = _epoch_record(epoch, lr, totals, parts, n_steps_per_epoch, val_report)
        result.log.append(rec)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if on_epoch is not None:
            on_epoch(rec)
        log.info("epoch %d lr %.2e loss %.4f", epoch, lr, rec["total_loss"])
    params.zero_grad()
    if checkpoint_path is not None:
        meta = {"train_config": train_config.to_dict(), "epochs_completed": train_config.epochs, "steps": step}
        result.checkpoint_sha256 = save_model(checkpoint_path, params, meta)
    return result

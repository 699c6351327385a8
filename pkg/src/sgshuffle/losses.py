"""Training targets and losses: weighted cross-entropy, category-masked head
losses and their combination."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data.catalog import CATEGORIES, PredicateCatalog
from .data.scenes import SceneRecord
from .model import ForwardOutput, SceneBatch
from .tensor import Tensor

WEIGHTING_MODES = ("uniform", "inverse_sqrt_frequency")


def weighted_ce(logits: Tensor, targets, weights) -> Tensor:
    """Class-weighted cross-entropy, reduced as a weighted mean.

    loss = sum_n w[t_n] * -log softmax(x_n)[t_n] / sum_n w[t_n]

    With all weights equal this is ordinary mean cross-entropy. An empty batch
    gives a constant zero.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    n, c = logits.shape
    if weights.shape != (c,):
        raise ValueError(f"expected {c} class weights, got shape {weights.shape}")
    if np.any(weights <= 0):
        raise ValueError("class weights must be strictly positive")
    if targets.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {targets.shape}")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target out of range [0, {c})")
    if n == 0:
        return Tensor(0.0)
    coef = np.zeros((n, c))
    w_t = weights[targets]
    coef[np.arange(n), targets] = w_t / w_t.sum()
    return T.neg(T.tensor_sum(T.mul(T.log_softmax(logits, axis=1), coef)))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    return weighted_ce(logits, targets, np.ones(logits.shape[1]))


def frequency_weights(catalog_or_counts: PredicateCatalog | Sequence[int]) -> np.ndarray:
    """Per-class weights 1/sqrt(max(freq, 1)) for every predicate, plus the background class.

    Background gets the mean predicate weight; the vector is then scaled to mean 1.
    """
    if isinstance(catalog_or_counts, PredicateCatalog):
        freq = np.asarray(catalog_or_counts.frequencies(), dtype=np.float64)
    else:
        freq = np.asarray(catalog_or_counts, dtype=np.float64)
    raw = 1.0 / np.sqrt(np.maximum(freq, 1.0))
    if np.all(raw == raw[0]):
        return np.ones(raw.size + 1)
    raw = np.append(raw, raw.mean())
    return raw / raw.mean()


@dataclass
class LossSpec:
    class_weights: np.ndarray | None = None  # length n_predicates + 1, background last
    category_loss_scale: float = 1.0
    weighting_mode: str = "inverse_sqrt_frequency"
    weighted_phase_start: float = math.inf  # epoch index at which class weights switch on
    negative_ratio: float | None = 3.0  # sampled no-relation pairs per positive; None = all
    category_negative_fractions: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.weighting_mode not in WEIGHTING_MODES:
            raise ValueError(f"weighting_mode must be one of {WEIGHTING_MODES}")
        if self.category_loss_scale < 0:
            raise ValueError("category_loss_scale must be >= 0")
        if self.class_weights is not None:
            self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(self.class_weights <= 0):
                raise ValueError("class weights must be strictly positive")
        if len(self.category_negative_fractions) != len(CATEGORIES):
            raise ValueError("need one negative fraction per category")

    def weights_for_epoch(self, epoch: int, n_classes: int) -> np.ndarray:
        if (
            self.weighting_mode == "uniform"
            or self.class_weights is None
            or epoch < self.weighted_phase_start
        ):
            return np.ones(n_classes)
        return self.class_weights


def pair_row(n_objects: int, s: int, o: int) -> int:
    """Position of ordered pair (s, o) in subject-major enumeration."""
    return s * (n_objects - 1) + (o if o < s else o - 1)


@dataclass
class PairTargets:
    final_rows: np.ndarray
    final_labels: np.ndarray
    category_rows: dict[str, np.ndarray] = field(default_factory=dict)
    category_labels: dict[str, np.ndarray] = field(default_factory=dict)


def build_targets(
    scenes: Sequence[SceneRecord],
    batch: SceneBatch,
    catalog: PredicateCatalog,
    spec: LossSpec,
    rng: np.random.Generator | None = None,
    max_negatives: int | None = None,
) -> PairTargets:
    """Rows of the batch's pair logits that receive a loss, with their labels.

    Every ground-truth triplet yields one positive row. No-relation pairs are
    subsampled per scene as background rows; category heads see a fraction of
    those as their "none" class. Pairs labelled only with predicates of other
    categories never enter a category's loss.
    """
    bg = len(catalog)
    in_cat = {}
    for cat in CATEGORIES:
        for pos, pid in enumerate(catalog.members(cat)):
            in_cat[pid] = (cat, pos)
    sizes = catalog.category_sizes()

    final_rows, final_labels = [], []
    cat_rows = {c: [] for c in CATEGORIES}
    cat_labels = {c: [] for c in CATEGORIES}
    for i, scene in enumerate(scenes):
        n = int(batch.object_offsets[i + 1] - batch.object_offsets[i])
        base = int(batch.pair_offsets[i])
        related = set()
        for s, o, p in scene.gt_triplets:
            row = base + pair_row(n, s, o)
            related.add(row)
            final_rows.append(row)
            final_labels.append(p)
            cat, pos = in_cat[p]
            cat_rows[cat].append(row)
            cat_labels[cat].append(pos)
        negatives = [base + k for k in range(n * (n - 1)) if base + k not in related]
        k = len(negatives)
        if spec.negative_ratio is not None:
            k = min(k, int(round(spec.negative_ratio * len(scene.gt_triplets))))
        if max_negatives is not None:
            k = min(k, max_negatives)
        if k < len(negatives):
            order = rng.permutation(len(negatives)) if rng is not None else np.arange(len(negatives))
            negatives = sorted(negatives[j] for j in order[:k])
        final_rows.extend(negatives)
        final_labels.extend([bg] * len(negatives))
        for cat, frac in zip(CATEGORIES, spec.category_negative_fractions):
            m = int(round(frac * len(negatives)))
            cat_rows[cat].extend(negatives[:m])
            cat_labels[cat].extend([sizes[cat]] * m)

    as_int = lambda xs: np.asarray(xs, dtype=np.int64)
    return PairTargets(
        as_int(final_rows),
        as_int(final_labels),
        {c: as_int(v) for c, v in cat_rows.items()},
        {c: as_int(v) for c, v in cat_labels.items()},
    )


def category_losses(head_logits: Mapping[str, Tensor], targets: PairTargets) -> dict[str, Tensor]:
    """Unweighted CE per category head over its own rows; zero (no graph) when it has none."""
    out = {}
    for cat in CATEGORIES:
        rows = targets.category_rows.get(cat, np.zeros(0, np.int64))
        if rows.size == 0:
            out[cat] = Tensor(0.0)
            continue
        logits = head_logits[cat]
        out[cat] = cross_entropy(T.embedding_lookup(logits, rows), targets.category_labels[cat])
    return out


def final_loss(final_logits: Tensor, targets: PairTargets, weights: np.ndarray) -> Tensor:
    if targets.final_rows.size == 0:
        return Tensor(0.0)
    return weighted_ce(T.embedding_lookup(final_logits, targets.final_rows), targets.final_labels, weights)


def total_loss(output: ForwardOutput, targets: PairTargets, spec: LossSpec, epoch: int) -> tuple[Tensor, dict]:
    """Final-classifier CE (class weights gated by epoch) + scale * sum of category losses."""
    n_classes = output.final_logits.shape[1]
    final = final_loss(output.final_logits, targets, spec.weights_for_epoch(epoch, n_classes))
    per_cat = category_losses(output.head_logits, targets)
    total = final
    if spec.category_loss_scale:
        cat_sum = per_cat[CATEGORIES[0]]
        for cat in CATEGORIES[1:]:
            cat_sum = T.add(cat_sum, per_cat[cat])
        total = T.add(final, T.mul(cat_sum, spec.category_loss_scale))
    parts = {"final": final.item(), **{c: v.item() for c, v in per_cat.items()}}
    return total, parts

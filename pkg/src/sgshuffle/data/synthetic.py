"""Seeded long-tailed synthetic scenes standing in for a detector + Visual Genome.

Each scene grows as a tree: starting from one object, every new object is
attached to an existing anchor through one predicate drawn from a Zipf prior.

* Geometric predicates fix the new box relative to the anchor with a
  per-predicate (offset, scale) template, so box geometry carries the label.
* Possessive / Semantic / Misc predicates are label-conditional: each has a
  small set of admissible subject and object classes, and the anchor and new
  label are chosen from those sets. Their placement follows a looser template.

The "world" (templates, label signatures, Zipf rank order) depends only on
``world_seed`` so train and test splits generated with different ``seed``
values share one set of rules.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .catalog import PredicateCatalog, load_catalog
from .geometry import Box, center, contains
from .scenes import ObjectInstance, SceneDataset, SceneRecord, catalog_with_counts, synthesize_visual

OBJECT_CLASSES = (
    "man", "woman", "person", "shirt", "hat", "table", "chair", "car", "tree", "building",
    "window", "street", "dog", "horse", "plate", "cup", "bag", "jacket", "wheel", "sign",
    "grass", "water", "hand", "head", "bike", "boat", "pole", "road", "fence", "umbrella",
    "train", "bus", "bottle", "clock", "leaf", "kite", "bird", "cat", "elephant", "flower",
)  # fmt: skip

# Rough head-to-tail ordering of predicate frequency in VG-style corpora; used as the Zipf rank order.
FREQUENCY_ORDER = (
    "on", "has", "wearing", "of", "in", "near", "behind", "with", "holding", "above",
    "sitting on", "wears", "under", "riding", "in front of", "standing on", "at", "carrying",
    "attached to", "walking on", "over", "for", "looking at", "watching", "hanging from",
    "laying on", "eating", "and", "belonging to", "parked on", "using", "covering", "between",
    "along", "covered in", "part of", "lying on", "on back of", "to", "walking in", "mounted on",
    "across", "against", "from", "growing on", "painted on", "playing", "made of", "says", "flying in",
)  # fmt: skip

# (dx, dy, scale): subject centre = object centre + (dx * w_obj, dy * h_obj); subject size = scale * object size.
GEOMETRIC_TEMPLATES = {
    "above": (0.0, -1.3, 0.7),
    "across": (0.0, 0.1, 1.8),
    "against": (0.75, 0.0, 1.0),
    "along": (1.1, 0.5, 0.5),
    "at": (-0.7, 0.35, 0.5),
    "behind": (0.25, -0.25, 0.6),
    "between": (-1.4, 0.2, 0.45),
    "in front of": (-0.2, 0.3, 1.3),
    "near": (1.6, 0.0, 0.9),
    "on": (0.0, -0.75, 0.55),
    "on back of": (0.15, -0.45, 0.35),
    "over": (0.0, -1.8, 1.4),
    "under": (0.0, 1.3, 0.8),
    "in": (0.0, 0.0, 0.4),
    "and": (-1.7, -0.1, 1.0),
}


def _above(s: Box, o: Box) -> bool:
    return center(s)[1] < center(o)[1]


def _below(s: Box, o: Box) -> bool:
    return center(s)[1] > center(o)[1]


# Checkable consequences of the templates, asserted on every generated triplet.
GEOMETRIC_RULES = {
    "above": _above,
    "on": _above,
    "over": _above,
    "under": _below,
    "in": lambda s, o: contains(o, s),
}


@dataclass(frozen=True)
class SyntheticConfig:
    n_scenes: int = 100
    n_objects_range: tuple[int, int] = (4, 8)
    zipf_exponent: float = 1.0
    seed: int = 0
    d_v: int = 64
    n_object_classes: int = 30
    world_seed: int = 0
    visual_noise: float = 0.1
    detector_accuracy: float = 0.85
    box_jitter: float = 0.05
    signature_size: int = 3

    def validate(self) -> None:
        lo, hi = self.n_objects_range
        if self.n_scenes < 0:
            raise ValueError("n_scenes must be >= 0")
        if lo < 2 or hi < lo:
            raise ValueError(f"n_objects_range must satisfy 2 <= lo <= hi, got {self.n_objects_range}")
        if not 1 <= self.n_object_classes <= len(OBJECT_CLASSES):
            raise ValueError(f"n_object_classes must be in [1, {len(OBJECT_CLASSES)}]")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be >= 0")
        if self.d_v < 1:
            raise ValueError("d_v must be >= 1")


@dataclass(frozen=True)
class _World:
    prior: np.ndarray  # over catalog predicate ids
    templates: dict[int, tuple[float, float, float, float]]  # id -> (dx, dy, scale, jitter)
    subject_sets: dict[int, np.ndarray]
    object_sets: dict[int, np.ndarray]
    geometric: frozenset


def zipf_prior(catalog: PredicateCatalog, exponent: float) -> np.ndarray:
    ranks = np.empty(len(catalog))
    order = [label for label in FREQUENCY_ORDER if label in catalog.labels]
    order += [label for label in catalog.labels if label not in order]
    for r, label in enumerate(order):
        ranks[catalog.index(label)] = r + 1
    weights = ranks ** (-float(exponent))
    return weights / weights.sum()


def _build_world(cfg: SyntheticConfig, catalog: PredicateCatalog) -> _World:
    rng = np.random.default_rng([cfg.world_seed, 7919])
    geometric = frozenset(catalog.members("Geometric"))
    templates, subj, obj = {}, {}, {}
    k = min(cfg.signature_size, cfg.n_object_classes)
    for pid, label in enumerate(catalog.labels):
        if pid in geometric and label in GEOMETRIC_TEMPLATES:
            templates[pid] = (*GEOMETRIC_TEMPLATES[label], 0.05)
        else:
            templates[pid] = (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(0.5, 1.5), 0.25)
            subj[pid] = np.sort(rng.choice(cfg.n_object_classes, size=k, replace=False))
            obj[pid] = np.sort(rng.choice(cfg.n_object_classes, size=k, replace=False))
    geometric = frozenset(p for p in geometric if catalog.labels[p] in GEOMETRIC_TEMPLATES)
    return _World(zipf_prior(catalog, cfg.zipf_exponent), templates, subj, obj, geometric)


def _place(anchor: Box, template, new_is_subject: bool, rng) -> Box:
    dx, dy, scale, jitter = template
    dx += rng.uniform(-jitter, jitter)
    dy += rng.uniform(-jitter, jitter)
    scale *= rng.uniform(1 - 2 * jitter, 1 + 2 * jitter)
    ax, ay = center(anchor)
    aw, ah = anchor[2] - anchor[0], anchor[3] - anchor[1]
    if new_is_subject:
        w, h = scale * aw, scale * ah
        cx, cy = ax + dx * aw, ay + dy * ah
    else:
        w, h = aw / scale, ah / scale
        cx, cy = ax - dx * w, ay - dy * h
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _simulate_detector(label: int, box: Box, size, cfg: SyntheticConfig, classes, rng) -> tuple[int, float, ObjectInstance]:
    if rng.random() < cfg.detector_accuracy:
        pred, score = label, rng.uniform(0.6, 1.0)
    else:
        pred = int((label + rng.integers(1, cfg.n_object_classes)) % cfg.n_object_classes) if cfg.n_object_classes > 1 else label
        score = rng.uniform(0.2, 0.6)
    w, h = box[2] - box[0], box[3] - box[1]
    shift = rng.normal(0.0, cfg.box_jitter, size=4) * np.array([w, h, w, h])
    x1, y1, x2, y2 = (np.array(box) + shift).tolist()
    x2 = max(x2, x1 + 0.2 * w)
    y2 = max(y2, y1 + 0.2 * h)
    dbox = (x1, y1, x2, y2)
    noise = cfg.visual_noise * rng.standard_normal(cfg.d_v)
    det = ObjectInstance(dbox, pred, synthesize_visual(classes[label], dbox, size, cfg.d_v, noise), float(score))
    return int(pred), float(score), det


def _scene(idx: int, cfg: SyntheticConfig, world: _World, catalog: PredicateCatalog, classes, rng) -> SceneRecord:
    lo, hi = cfg.n_objects_range
    n = int(rng.integers(lo, hi + 1))
    w0, h0 = rng.uniform(40.0, 120.0, size=2)
    boxes: list[Box] = [(-w0 / 2, -h0 / 2, w0 / 2, h0 / 2)]
    labels = [int(rng.integers(cfg.n_object_classes))]
    triplets = []
    n_pred = len(catalog)
    for new in range(1, n):
        p = int(rng.choice(n_pred, p=world.prior))
        new_is_subject = bool(rng.random() < 0.5)
        if p in world.geometric:
            new_label = int(rng.integers(cfg.n_object_classes))
            anchor = int(rng.integers(new))
        else:
            anchor_set = world.object_sets[p] if new_is_subject else world.subject_sets[p]
            new_set = world.subject_sets[p] if new_is_subject else world.object_sets[p]
            candidates = [j for j in range(new) if labels[j] in anchor_set]
            anchor = candidates[int(rng.integers(len(candidates)))] if candidates else int(rng.integers(new))
            new_label = int(rng.choice(new_set))
        boxes.append(_place(boxes[anchor], world.templates[p], new_is_subject, rng))
        labels.append(new_label)
        triplets.append((new, anchor, p) if new_is_subject else (anchor, new, p))

    margin = 10.0
    min_x = min(b[0] for b in boxes)
    min_y = min(b[1] for b in boxes)
    boxes = [(b[0] - min_x + margin, b[1] - min_y + margin, b[2] - min_x + margin, b[3] - min_y + margin) for b in boxes]
    size = (max(b[2] for b in boxes) + margin, max(b[3] for b in boxes) + margin)

    for s, o, p in triplets:
        rule = GEOMETRIC_RULES.get(catalog.labels[p])
        if rule is not None and not rule(boxes[s], boxes[o]):
            raise AssertionError(f"generated {catalog.labels[p]!r} triplet violates its geometric rule")

    objects, detected = [], []
    for box, label in zip(boxes, labels):
        noise = cfg.visual_noise * rng.standard_normal(cfg.d_v)
        visual = synthesize_visual(classes[label], box, size, cfg.d_v, noise)
        pred, score, det = _simulate_detector(label, box, size, cfg, classes, rng)
        objects.append(ObjectInstance(box, label, visual, score, pred))
        detected.append(det)
    return SceneRecord(size, objects, triplets, detected, f"syn-{cfg.seed}-{idx}")


def generate_synthetic(
    cfg: SyntheticConfig, catalog: PredicateCatalog | None = None
) -> tuple[SceneDataset, PredicateCatalog]:
    """Generate ``cfg.n_scenes`` scenes; returns the dataset and the catalog with counts."""
    cfg.validate()
    catalog = catalog or load_catalog()
    classes = list(OBJECT_CLASSES[: cfg.n_object_classes])
    world = _build_world(cfg, catalog)
    rng = np.random.default_rng([cfg.seed, 104729])
    scenes = [_scene(i, cfg, world, catalog, classes, rng) for i in range(cfg.n_scenes)]
    dataset = SceneDataset(classes, scenes)
    return dataset, catalog_with_counts(catalog, scenes)

"""The relationship network: input encoding, four category encoders with their
heads, the shuffle stage and the final predicate classifier.

A forward pass works on a :class:`SceneBatch`, which stacks the objects of one
or more scenes; a block-diagonal additive mask keeps attention inside each
scene, so batching never changes per-scene results beyond float rounding.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .data.catalog import CATEGORIES, PredicateCatalog
from .data.geometry import POS_DIM, area, box_geometry, normalized_pos
from .data.scenes import ObjectInstance, SceneRecord
from .layers import apply_linear, encoder_block, init_encoder_block, init_linear
from .shuffle import MODES, N_PATHWAYS, routing_plan
from .tensor import Tensor

PROTOCOLS = ("predcls", "sgcls", "sgdet")
MASK_VALUE = -1e9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_encoder_layers: int = 6
    n_heads: int = 4
    n_shuffle_layers: int = 5
    shuffle_mode: str = "full"
    ffn_hidden: int = 0  # 0 -> 2 * d_model
    d_v: int = 64
    d_e: int = 50
    n_object_classes: int = 30
    n_predicates: int = 50
    category_sizes: tuple[int, ...] = (15, 8, 24, 3)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "category_sizes", tuple(int(c) for c in self.category_sizes))
        if self.ffn_hidden == 0:
            object.__setattr__(self, "ffn_hidden", 2 * self.d_model)
        self.validate()

    def validate(self) -> None:
        d = self.d_model
        if d <= 0 or d % self.n_heads:
            raise ConfigError(f"d_model={d} must be divisible by n_heads={self.n_heads}")
        if d % 4:
            raise ConfigError(f"d_model={d} must be divisible by 4 for the shuffle partition")
        if self.n_shuffle_layers < 1:
            raise ConfigError(f"n_shuffle_layers must be >= 1, got {self.n_shuffle_layers}")
        if self.n_encoder_layers < 0:
            raise ConfigError("n_encoder_layers must be >= 0")
        if self.shuffle_mode not in MODES:
            raise ConfigError(f"shuffle_mode must be one of {MODES}, got {self.shuffle_mode!r}")
        if len(self.category_sizes) != len(CATEGORIES) or sum(self.category_sizes) != self.n_predicates:
            raise ConfigError(f"category_sizes {self.category_sizes} must cover {self.n_predicates} predicates")

    @property
    def input_dim(self) -> int:
        return POS_DIM + self.d_v + self.d_e

    @property
    def pair_geometry_dim(self) -> int:
        return 2 * (POS_DIM + self.d_v) + 1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["category_sizes"] = list(self.category_sizes)
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**dict(d))

    @classmethod
    def for_catalog(cls, catalog: PredicateCatalog, **kw) -> "ModelConfig":
        sizes = catalog.category_sizes()
        return cls(n_predicates=len(catalog), category_sizes=tuple(sizes[c] for c in CATEGORIES), **kw)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    label_embeddings: np.ndarray  # frozen word vectors, one row per object class
    object_classes: list[str] = field(default_factory=list)

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def get(self, key, default=None):
        return self.tensors.get(key, default)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def keys(self):
        return self.tensors.keys()

    def __contains__(self, key):
        return key in self.tensors

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.tensors.items()}
        out["buffer.label_embeddings"] = self.label_embeddings
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()},
            self.label_embeddings.copy(),
            list(self.object_classes),
        )


def _category_key(category: str) -> str:
    return category.lower()


def init_arrays(config: ModelConfig) -> dict[str, np.ndarray]:
    """Freshly initialised trainable arrays; keys and shapes depend only on ``config``."""
    rng = np.random.default_rng(config.seed)
    d = config.d_model
    arrays: dict[str, np.ndarray] = {}
    arrays.update(init_linear(rng, "input", config.input_dim, d))
    for cat in CATEGORIES:
        for layer in range(config.n_encoder_layers):
            arrays.update(init_encoder_block(rng, f"enc.{_category_key(cat)}.{layer}", d, config.ffn_hidden))
    for cat, size in zip(CATEGORIES, config.category_sizes):
        arrays.update(init_linear(rng, f"head.{_category_key(cat)}", 2 * d + config.pair_geometry_dim, size + 1))
    for s in range(N_PATHWAYS):
        for layer in range(config.n_shuffle_layers):
            arrays.update(init_encoder_block(rng, f"shuffle.{s}.{layer}", d, config.ffn_hidden))
    arrays.update(init_linear(rng, "fuse", N_PATHWAYS * d, N_PATHWAYS * d))
    arrays.update(
        init_linear(rng, "classifier", 2 * N_PATHWAYS * d + config.pair_geometry_dim, config.n_predicates + 1)
    )
    return arrays


def init_params(config: ModelConfig, label_embeddings: np.ndarray, object_classes: Sequence[str] = ()) -> ModelParams:
    label_embeddings = np.asarray(label_embeddings, dtype=np.float64)
    if label_embeddings.shape != (config.n_object_classes, config.d_e):
        raise ConfigError(
            f"label embedding table {label_embeddings.shape} != ({config.n_object_classes}, {config.d_e})"
        )
    tensors = {k: Tensor(v, requires_grad=True) for k, v in init_arrays(config).items()}
    return ModelParams(config, tensors, label_embeddings, list(object_classes))


def parameter_count(config: ModelConfig) -> int:
    return int(sum(a.size for a in init_arrays(config).values()))


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

def save_model(path, params: ModelParams, extra_meta: Mapping | None = None) -> str:
    meta = {"model_config": params.config.to_dict(), "object_classes": list(params.object_classes)}
    meta.update(extra_meta or {})
    return checkpoint.save(path, params.arrays(), meta)


def load_model(path) -> ModelParams:
    arrays, meta = checkpoint.load(path)
    try:
        config = ModelConfig.from_dict(meta["model_config"])
    except KeyError:
        raise checkpoint.CheckpointError("checkpoint has no model_config header") from None
    expected = {k: v.shape for k, v in init_arrays(config).items()}
    expected["buffer.label_embeddings"] = (config.n_object_classes, config.d_e)
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise checkpoint.CheckpointError(f"checkpoint keys disagree with config (missing {missing[:3]}, extra {extra[:3]})")
    for k, shape in expected.items():
        if arrays[k].shape != shape:
            raise checkpoint.CheckpointError(f"{k}: shape {arrays[k].shape} != {shape} from config")
    label_embeddings = arrays.pop("buffer.label_embeddings")
    tensors = {k: Tensor(arrays[k], requires_grad=True) for k in expected if k != "buffer.label_embeddings"}
    return ModelParams(config, tensors, label_embeddings, list(meta.get("object_classes", [])))


# ----------------------------------------------------------------------
# scene -> arrays
# ----------------------------------------------------------------------

def ordered_pairs(n: int) -> list[tuple[int, int]]:
    """All (subject, object) index pairs with subject != object, subject-major order."""
    return [(s, o) for s in range(n) for o in range(n) if s != o]


def protocol_objects(scene: SceneRecord, protocol: str) -> tuple[list[ObjectInstance], list[int], list[float]]:
    """Objects, input labels and label scores the model sees under ``protocol``."""
    protocol = protocol.lower()
    if protocol == "predcls":
        return scene.objects, [o.label_id for o in scene.objects], [1.0] * len(scene.objects)
    if protocol == "sgcls":
        return scene.objects, [o.predicted_label() for o in scene.objects], [o.score() for o in scene.objects]
    if protocol == "sgdet":
        if scene.detected_objects is None:
            raise ValueError(f"scene {scene.scene_id!r} has no detected_objects; SGDet needs them")
        det = scene.detected_objects
        return det, [o.label_id for o in det], [o.score() for o in det]
    raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")


def pair_geometry(a: ObjectInstance, b: ObjectInstance, image_size) -> np.ndarray:
    """[intersection pos, intersection visual, no-overlap flag, union pos, union visual]."""
    geo = box_geometry(a.box, b.box)
    w, h = image_size
    if geo.intersection is None:
        inter = np.concatenate([np.zeros(POS_DIM), np.zeros_like(a.visual), [1.0]])
    else:
        inter = np.concatenate([normalized_pos(geo.intersection, w, h), 0.5 * (a.visual + b.visual), [0.0]])
    wa, wb = area(a.box), area(b.box)
    union_visual = (wa * a.visual + wb * b.visual) / (wa + wb)
    return np.concatenate([inter, normalized_pos(geo.union, w, h), union_visual])


@dataclass
class SceneArrays:
    features: np.ndarray  # (n, POS_DIM + d_v)
    label_ids: np.ndarray  # (n,)
    label_scores: np.ndarray  # (n,)
    pairs: np.ndarray  # (P, 2) local indices
    pair_geo: np.ndarray  # (P, geo)

    @property
    def n_objects(self) -> int:
        return self.features.shape[0]


def scene_arrays(scene: SceneRecord, protocol: str = "predcls") -> SceneArrays:
    objects, labels, scores = protocol_objects(scene, protocol)
    w, h = scene.image_size
    if objects:
        feats = np.stack([np.concatenate([normalized_pos(o.box, w, h), o.visual]) for o in objects])
    else:
        feats = np.zeros((0, POS_DIM))
    pairs = ordered_pairs(len(objects))
    if pairs:
        geo = np.stack([pair_geometry(objects[s], objects[o], scene.image_size) for s, o in pairs])
    else:
        d_v = feats.shape[1] - POS_DIM
        geo = np.zeros((0, 2 * (POS_DIM + d_v) + 1))
    return SceneArrays(
        feats,
        np.asarray(labels, dtype=np.int64),
        np.asarray(scores, dtype=np.float64),
        np.asarray(pairs, dtype=np.int64).reshape(-1, 2),
        geo,
    )


@dataclass
class SceneBatch:
    features: np.ndarray
    label_ids: np.ndarray
    mask: np.ndarray | None
    subj: np.ndarray  # global object rows
    obj: np.ndarray
    pair_geo: np.ndarray
    object_offsets: np.ndarray  # len = n_scenes + 1
    pair_offsets: np.ndarray

    @property
    def n_scenes(self) -> int:
        return len(self.object_offsets) - 1


def make_batch(items: Sequence[SceneArrays]) -> SceneBatch:
    if not items:
        raise ValueError("cannot batch zero scenes")
    obj_off = np.cumsum([0] + [a.n_objects for a in items])
    pair_off = np.cumsum([0] + [len(a.pairs) for a in items])
    feats = np.concatenate([a.features for a in items])
    labels = np.concatenate([a.label_ids for a in items])
    subj = np.concatenate([a.pairs[:, 0] + obj_off[i] for i, a in enumerate(items)])
    obj = np.concatenate([a.pairs[:, 1] + obj_off[i] for i, a in enumerate(items)])
    geo = np.concatenate([a.pair_geo for a in items])
    mask = None
    if len(items) > 1:
        scene_of = np.repeat(np.arange(len(items)), [a.n_objects for a in items])
        mask = np.where(scene_of[:, None] == scene_of[None, :], 0.0, MASK_VALUE)
    return SceneBatch(feats, labels, mask, subj.astype(np.int64), obj.astype(np.int64), geo, obj_off, pair_off)


def batch_scenes(scenes: Sequence[SceneRecord], protocol: str = "predcls") -> SceneBatch:
    return make_batch([scene_arrays(s, protocol) for s in scenes])


# ----------------------------------------------------------------------
# forward pass
# ----------------------------------------------------------------------

def encode_inputs(params: ModelParams, batch: SceneBatch) -> Tensor:
    """Project [pos(box), visual, word vector(label)] of every object to d_model."""
    cfg = params.config
    if batch.features.shape[1] != POS_DIM + cfg.d_v:
        raise ConfigError(f"object features have width {batch.features.shape[1]}, config expects {POS_DIM + cfg.d_v}")
    words = T.embedding_lookup(Tensor(params.label_embeddings), batch.label_ids)
    x = T.concat([Tensor(batch.features), words], axis=1)
    return apply_linear(x, params, "input")


def category_encode(x: Tensor, params: ModelParams, category: str, mask: Tensor | None = None) -> Tensor:
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    key = _category_key(category)
    for layer in range(params.config.n_encoder_layers):
        x = encoder_block(x, params, f"enc.{key}.{layer}", params.config.n_heads, mask)
    return x


def _pair_inputs(features: Tensor, batch: SceneBatch) -> Tensor:
    subj = T.embedding_lookup(features, batch.subj)
    obj = T.embedding_lookup(features, batch.obj)
    return T.concat([subj, obj, Tensor(batch.pair_geo)], axis=1)


def category_head(features: Tensor, batch: SceneBatch, params: ModelParams, category: str) -> Tensor:
    """Logits over the category's predicates plus a trailing "none" class, one row per pair."""
    return apply_linear(_pair_inputs(features, batch), params, f"head.{_category_key(category)}")


def shuffle_stage(
    inputs: Sequence[Tensor],
    params: ModelParams,
    mask: Tensor | None = None,
    return_pathways: bool = False,
):
    """Route channels between the four pathways, encode, repeat; then fuse.

    Returns the fused (n x 4*d_model) tensor, plus the per-pathway outputs before
    fusion when ``return_pathways`` is set.
    """
    cfg = params.config
    if len(inputs) != N_PATHWAYS:
        raise ValueError(f"shuffle stage needs {N_PATHWAYS} inputs, got {len(inputs)}")
    d = cfg.d_model
    paths = list(inputs)
    for layer in range(cfg.n_shuffle_layers):
        if cfg.shuffle_mode != "none":
            routed = T.gather_columns(T.concat(paths, axis=1), routing_plan(cfg.shuffle_mode, layer, d))
            paths = T.partition(routed, N_PATHWAYS, axis=1)
        paths = [encoder_block(p, params, f"shuffle.{s}.{layer}", cfg.n_heads, mask) for s, p in enumerate(paths)]
    fused = apply_linear(T.concat(paths, axis=1), params, "fuse")
    return (fused, paths) if return_pathways else fused


def final_classify(fused: Tensor, batch: SceneBatch, params: ModelParams) -> Tensor:
    """Logits over all predicates plus a trailing background class, one row per pair."""
    return apply_linear(_pair_inputs(fused, batch), params, "classifier")


@dataclass
class ForwardOutput:
    final_logits: Tensor
    head_logits: dict[str, Tensor]
    batch: SceneBatch


def forward(params: ModelParams, batch: SceneBatch) -> ForwardOutput:
    mask = Tensor(batch.mask) if batch.mask is not None else None
    x = encode_inputs(params, batch)
    stage_one = [category_encode(x, params, c, mask) for c in CATEGORIES]
    heads = {c: category_head(f, batch, params, c) for c, f in zip(CATEGORIES, stage_one)}
    fused = shuffle_stage(stage_one, params, mask)
    return ForwardOutput(final_classify(fused, batch, params), heads, batch)


def predict_logits(params: ModelParams, scenes: Sequence[SceneRecord], protocol: str = "predcls") -> list[np.ndarray]:
    """Final-classifier logits per scene (inference, no graph)."""
    out = []
    with T.no_grad():
        for scene in scenes:
            batch = make_batch([scene_arrays(scene, protocol)])
            out.append(forward(params, batch).final_logits.data)
    return out


def describe(params: ModelParams) -> str:
    lines = [json.dumps(params.config.to_dict(), sort_keys=True), f"parameters: {params.count()}"]
    groups: dict[str, int] = {}
    for k, t in params.items():
        groups[k.split(".")[0]] = groups.get(k.split(".")[0], 0) + t.size
    lines += [f"  {g}: {n}" for g, n in groups.items()]
    return "\n".join(lines)

"""Scene records and the JSON scene-file format.

Scene file schema::

    {"object_classes": [str, ...],            # optional; inferred (sorted) if absent
     "images": [
       {"scene_id": str,                       # optional
        "width": number, "height": number,
        "objects": [{"box": [x1, y1, x2, y2], "label": str,
                     "visual": [float, ...],   # optional; synthesized if absent
                     "pred_label": str,        # optional detector label on the GT box
                     "label_score": float}],   # optional detector confidence
        "triplets": [[subject_index, object_index, "predicate"], ...],
        "detected_objects": [ ...same object schema... ]}   # optional, for SGDet
     ]}
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .catalog import PredicateCatalog, load_catalog
from .embeddings import hashed_vector
from .geometry import Box, normalized_pos

DEFAULT_VISUAL_DIM = 64
_VISUAL_SEED = 0


class SceneSchemaError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(eq=False)
class ObjectInstance:
    box: Box
    label_id: int
    visual: np.ndarray
    label_score: float | None = None
    pred_label_id: int | None = None

    def predicted_label(self) -> int:
        return self.label_id if self.pred_label_id is None else self.pred_label_id

    def score(self) -> float:
        return 1.0 if self.label_score is None else float(self.label_score)


@dataclass(eq=False)
class SceneRecord:
    image_size: tuple[float, float]
    objects: list[ObjectInstance]
    gt_triplets: list[tuple[int, int, int]]
    detected_objects: list[ObjectInstance] | None = None
    scene_id: str = ""

    def __post_init__(self):
        n = len(self.objects)
        seen = set()
        for t in self.gt_triplets:
            s, o, p = t
            if not (0 <= s < n and 0 <= o < n):
                raise ValueError(f"triplet {t} indexes outside {n} objects")
            if s == o:
                raise ValueError(f"triplet {t} relates an object to itself")
            if t in seen:
                raise ValueError(f"duplicate triplet {t}")
            seen.add(t)


@dataclass
class SceneDataset:
    object_classes: list[str]
    scenes: list[SceneRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self) -> Iterator[SceneRecord]:
        return iter(self.scenes)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return SceneDataset(self.object_classes, self.scenes[i])
        return self.scenes[i]

    @property
    def visual_dim(self) -> int:
        for scene in self.scenes:
            for obj in scene.objects:
                return int(obj.visual.size)
        return DEFAULT_VISUAL_DIM

    def subset(self, indices: Sequence[int]) -> "SceneDataset":
        return SceneDataset(self.object_classes, [self.scenes[i] for i in indices])


def visual_geometry_matrix(d_v: int) -> np.ndarray:
    return hashed_vector("visual-geometry", d_v * 8, _VISUAL_SEED).reshape(d_v, 8)


def synthesize_visual(label: str, box: Box, image_size, d_v: int, noise: np.ndarray | None = None) -> np.ndarray:
    """Class appearance vector plus a fixed projection of box geometry (plus optional noise)."""
    vec = hashed_vector(f"visual:{label}", d_v, _VISUAL_SEED) + visual_geometry_matrix(d_v) @ normalized_pos(
        box, *image_size
    )
    return vec if noise is None else vec + noise


def predicate_counts(scenes, n_predicates: int) -> list[int]:
    counts = Counter(p for scene in scenes for _, _, p in scene.gt_triplets)
    return [counts.get(i, 0) for i in range(n_predicates)]


def catalog_with_counts(catalog: PredicateCatalog, scenes) -> PredicateCatalog:
    return catalog.with_frequencies(predicate_counts(scenes, len(catalog)))


# ----------------------------------------------------------------------
# JSON
# ----------------------------------------------------------------------

def _number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SceneSchemaError(path, f"expected a number, got {value!r}")
    return float(value)


def _parse_object(raw, path: str, class_index: dict, image_size, d_v: int | None) -> ObjectInstance:
    if not isinstance(raw, dict):
        raise SceneSchemaError(path, "expected an object")
    box = raw.get("box")
    if not isinstance(box, list) or len(box) != 4:
        raise SceneSchemaError(f"{path}.box", "expected [x1, y1, x2, y2]")
    box = tuple(_number(v, f"{path}.box[{i}]") for i, v in enumerate(box))
    if not (box[0] < box[2]):
        raise SceneSchemaError(f"{path}.box", f"x1 must be < x2, got {box}")
    if not (box[1] < box[3]):
        raise SceneSchemaError(f"{path}.box", f"y1 must be < y2, got {box}")
    label = raw.get("label")
    if label not in class_index:
        raise SceneSchemaError(f"{path}.label", f"unknown object label {label!r}")
    if "visual" in raw:
        vis = raw["visual"]
        if not isinstance(vis, list):
            raise SceneSchemaError(f"{path}.visual", "expected a list of numbers")
        visual = np.array([_number(v, f"{path}.visual[{i}]") for i, v in enumerate(vis)])
        if d_v is not None and visual.size != d_v:
            raise SceneSchemaError(f"{path}.visual", f"expected length {d_v}, got {visual.size}")
    else:
        visual = synthesize_visual(label, box, image_size, d_v or DEFAULT_VISUAL_DIM)
    pred_label_id = None
    if raw.get("pred_label") is not None:
        if raw["pred_label"] not in class_index:
            raise SceneSchemaError(f"{path}.pred_label", f"unknown object label {raw['pred_label']!r}")
        pred_label_id = class_index[raw["pred_label"]]
    score = raw.get("label_score", raw.get("score"))
    if score is not None:
        score = _number(score, f"{path}.label_score")
        if not 0.0 <= score <= 1.0:
            raise SceneSchemaError(f"{path}.label_score", f"must lie in [0, 1], got {score}")
    return ObjectInstance(box, class_index[label], visual, score, pred_label_id)


def _infer_visual_dim(images) -> int | None:
    for img in images:
        for key in ("objects", "detected_objects"):
            for obj in img.get(key) or []:
                if isinstance(obj, dict) and isinstance(obj.get("visual"), list):
                    return len(obj["visual"])
    return None


def scenes_from_json(obj, catalog: PredicateCatalog | None = None, d_v: int | None = None) -> SceneDataset:
    catalog = catalog or load_catalog()
    if not isinstance(obj, dict) or not isinstance(obj.get("images"), list):
        raise SceneSchemaError("images", "top level must be an object with an 'images' list")
    images = obj["images"]
    classes = obj.get("object_classes")
    if classes is None:
        labels = set()
        for img in images:
            for key in ("objects", "detected_objects"):
                for o in img.get(key) or []:
                    if isinstance(o, dict):
                        labels.update(x for x in (o.get("label"), o.get("pred_label")) if isinstance(x, str))
        classes = sorted(labels)
    class_index = {c: i for i, c in enumerate(classes)}
    d_v = d_v or _infer_visual_dim(images)

    scenes = []
    for i, img in enumerate(images):
        base = f"images[{i}]"
        if not isinstance(img, dict):
            raise SceneSchemaError(base, "expected an object")
        size = (_number(img.get("width"), f"{base}.width"), _number(img.get("height"), f"{base}.height"))
        if size[0] <= 0 or size[1] <= 0:
            raise SceneSchemaError(base, f"image size must be positive, got {size}")
        objects = [
            _parse_object(o, f"{base}.objects[{j}]", class_index, size, d_v) for j, o in enumerate(img.get("objects", []))
        ]
        triplets = []
        for j, t in enumerate(img.get("triplets", [])):
            tpath = f"{base}.triplets[{j}]"
            if not isinstance(t, list) or len(t) != 3:
                raise SceneSchemaError(tpath, "expected [subject_index, object_index, predicate]")
            s, o, pred = t
            if not isinstance(s, int) or not isinstance(o, int) or not (0 <= s < len(objects)) or not (0 <= o < len(objects)):
                raise SceneSchemaError(tpath, f"object index out of range for {len(objects)} objects")
            if s == o:
                raise SceneSchemaError(tpath, "subject and object are the same object")
            if pred not in catalog.labels:
                raise SceneSchemaError(tpath, f"unknown predicate {pred!r}")
            trip = (s, o, catalog.index(pred))
            if trip in triplets:
                raise SceneSchemaError(tpath, f"duplicate triplet {t}")
            triplets.append(trip)
        detected = None
        if img.get("detected_objects") is not None:
            detected = [
                _parse_object(o, f"{base}.detected_objects[{j}]", class_index, size, d_v)
                for j, o in enumerate(img["detected_objects"])
            ]
        scenes.append(SceneRecord(size, objects, triplets, detected, str(img.get("scene_id", i))))
    return SceneDataset(list(classes), scenes)


def load_scenes_json(path, catalog: PredicateCatalog | None = None, d_v: int | None = None) -> SceneDataset:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneSchemaError(f"line {exc.lineno} column {exc.colno}", exc.msg) from None
    return scenes_from_json(obj, catalog, d_v)


def _object_to_json(obj: ObjectInstance, classes: list[str]) -> dict:
    out = {"box": list(obj.box), "label": classes[obj.label_id], "visual": obj.visual.tolist()}
    if obj.pred_label_id is not None:
        out["pred_label"] = classes[obj.pred_label_id]
    if obj.label_score is not None:
        out["label_score"] = obj.label_score
    return out


def scenes_to_json(dataset: SceneDataset, catalog: PredicateCatalog | None = None) -> dict:
    catalog = catalog or load_catalog()
    classes = dataset.object_classes
    images = []
    for scene in dataset.scenes:
        img = {
            "scene_id": scene.scene_id,
            "width": scene.image_size[0],
            "height": scene.image_size[1],
            "objects": [_object_to_json(o, classes) for o in scene.objects],
            "triplets": [[s, o, catalog.labels[p]] for s, o, p in scene.gt_triplets],
        }
        if scene.detected_objects is not None:
            img["detected_objects"] = [_object_to_json(o, classes) for o in scene.detected_objects]
        images.append(img)
    return {"object_classes": list(classes), "images": images}


def save_scenes_json(dataset: SceneDataset, path, catalog: PredicateCatalog | None = None) -> None:
    Path(path).write_text(json.dumps(scenes_to_json(dataset, catalog), separators=(",", ":")) + "\n")

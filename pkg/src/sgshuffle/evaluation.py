"""Triplet ranking, matching against ground truth, and (mean) Recall@K.

Prediction file (JSON lines, one scene per line)::

    {"scene_id": str, "triplets": [[subject_index, object_index, "predicate", score], ...]}

Indices refer to ``objects`` (PredCls/SGCls) or ``detected_objects`` (SGDet) of
the scene with the same id in the evaluated scene file.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data.catalog import CATEGORIES, PredicateCatalog
from .data.geometry import iou
from .data.scenes import SceneRecord
from .model import ModelParams, ordered_pairs, predict_logits, protocol_objects

DEFAULT_KS = (20, 50, 100)


@dataclass(frozen=True)
class Triplet:
    subject: int
    object: int
    predicate: int
    score: float


@dataclass
class ScenePredictions:
    scene_id: str
    triplets: list[Triplet]
    protocol: str = "predcls"


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def rank_triplets(
    scene: SceneRecord,
    final_logits: np.ndarray,
    protocol: str = "predcls",
    graph_constraint: bool = True,
    background_threshold: float | None = None,
) -> ScenePredictions:
    """Score every (pair, predicate) candidate and sort them.

    Predicate probabilities are the softmax restricted to real predicates (the
    trailing background logit is dropped, i.e. renormalised away). A triplet's
    score multiplies that probability by the subject and object label scores
    (all 1 under PredCls). Ties break on (pair index, predicate id).
    """
    objects, _, scores = protocol_objects(scene, protocol)
    pairs = ordered_pairs(len(objects))
    logits = np.asarray(final_logits, dtype=np.float64)
    if logits.shape[0] != len(pairs):
        raise ValueError(f"{logits.shape[0]} logit rows for {len(pairs)} ordered pairs")
    if not pairs:
        return ScenePredictions(scene.scene_id, [], protocol)
    probs = _softmax(logits[:, :-1])
    keep = np.ones(len(pairs), dtype=bool)
    if background_threshold is not None and protocol == "sgdet":
        keep = _softmax(logits)[:, -1] <= background_threshold
    pair_scale = np.array([scores[s] * scores[o] for s, o in pairs])
    candidates = []
    for k, (s, o) in enumerate(pairs):
        if not keep[k]:
            continue
        if graph_constraint:
            p = int(np.argmax(probs[k]))
            candidates.append((-(probs[k, p] * pair_scale[k]), k, p))
        else:
            candidates.extend((-(probs[k, p] * pair_scale[k]), k, p) for p in range(probs.shape[1]))
    candidates.sort()
    triplets = [Triplet(pairs[k][0], pairs[k][1], p, float(-neg)) for neg, k, p in candidates]
    return ScenePredictions(scene.scene_id, triplets, protocol)


def _is_match(pred: Triplet, gt: tuple[int, int, int], scene: SceneRecord, protocol: str, iou_threshold: float) -> bool:
    gs, go, gp = gt
    if pred.predicate != gp:
        return False
    if protocol == "predcls":
        return pred.subject == gs and pred.object == go
    if protocol == "sgcls":
        objs = scene.objects
        return (
            pred.subject == gs
            and pred.object == go
            and objs[gs].predicted_label() == objs[gs].label_id
            and objs[go].predicted_label() == objs[go].label_id
        )
    det = scene.detected_objects
    ds, do = det[pred.subject], det[pred.object]
    ts, to = scene.objects[gs], scene.objects[go]
    return (
        ds.label_id == ts.label_id
        and do.label_id == to.label_id
        and iou(ds.box, ts.box) >= iou_threshold
        and iou(do.box, to.box) >= iou_threshold
    )


@dataclass
class MatchResult:
    prediction_hits: np.ndarray  # bool per considered prediction
    gt_matched: np.ndarray  # bool per ground-truth triplet


def match_triplets(
    predictions: ScenePredictions,
    scene: SceneRecord,
    protocol: str | None = None,
    iou_threshold: float = 0.5,
    k: int | None = None,
) -> MatchResult:
    """Greedy matching in rank order; each ground-truth triplet is consumed at most once."""
    protocol = (protocol or predictions.protocol).lower()
    if protocol == "sgdet" and scene.detected_objects is None:
        raise ValueError("SGDet matching needs detected_objects")
    preds = predictions.triplets if k is None else predictions.triplets[:k]
    gts = scene.gt_triplets
    consumed = np.zeros(len(gts), dtype=bool)
    hits = np.zeros(len(preds), dtype=bool)
    for i, pred in enumerate(preds):
        for j, gt in enumerate(gts):
            if not consumed[j] and _is_match(pred, gt, scene, protocol, iou_threshold):
                consumed[j] = True
                hits[i] = True
                break
    return MatchResult(hits, consumed)


@dataclass
class EvalReport:
    k: int
    protocol: str
    recall: float
    mean_recall: float
    per_predicate: list[float | None]
    per_category: dict[str, float | None]
    n_predicates_evaluated: int
    n_predicates_excluded: int
    gt_counts: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def mean_recall_at_k(
    predictions: Sequence[ScenePredictions],
    scenes: Sequence[SceneRecord],
    catalog: PredicateCatalog,
    k: int,
    protocol: str | None = None,
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Dataset-level recall per predicate, averaged uniformly over predicates that occur."""
    if k <= 0:
        raise ValueError("K must be positive")
    if len(predictions) != len(scenes):
        raise ValueError("one prediction set per scene is required")
    n_pred = len(catalog)
    hits = np.zeros(n_pred, dtype=np.int64)
    totals = np.zeros(n_pred, dtype=np.int64)
    proto = protocol or (predictions[0].protocol if predictions else "predcls")
    for pred, scene in zip(predictions, scenes):
        matched = match_triplets(pred, scene, proto, iou_threshold, k).gt_matched
        for (_, _, p), m in zip(scene.gt_triplets, matched):
            totals[p] += 1
            hits[p] += int(m)
    present = totals > 0
    per_pred = [float(hits[p] / totals[p]) if present[p] else None for p in range(n_pred)]
    mean_recall = float(np.mean([r for r in per_pred if r is not None])) if present.any() else 0.0
    per_cat = {}
    for cat in CATEGORIES:
        vals = [per_pred[p] for p in catalog.members(cat) if per_pred[p] is not None]
        per_cat[cat] = float(np.mean(vals)) if vals else None
    recall = float(hits.sum() / totals.sum()) if totals.sum() else 0.0
    return EvalReport(
        k, proto, recall, mean_recall, per_pred, per_cat, int(present.sum()), int((~present).sum()), totals.tolist()
    )


def evaluate(
    predictions: Sequence[ScenePredictions],
    scenes: Sequence[SceneRecord],
    catalog: PredicateCatalog,
    ks: Iterable[int] = DEFAULT_KS,
    protocol: str | None = None,
    iou_threshold: float = 0.5,
) -> dict[int, EvalReport]:
    return {k: mean_recall_at_k(predictions, scenes, catalog, k, protocol, iou_threshold) for k in ks}


def predict(
    params: ModelParams,
    scenes: Sequence[SceneRecord],
    protocol: str = "predcls",
    graph_constraint: bool = True,
    threads: int = 1,
    background_threshold: float | None = None,
) -> list[ScenePredictions]:
    def one(scene):
        (logits,) = predict_logits(params, [scene], protocol)
        return rank_triplets(scene, logits, protocol, graph_constraint, background_threshold)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, scenes))
    return [one(s) for s in scenes]


def evaluate_model(
    params: ModelParams,
    scenes: Sequence[SceneRecord],
    catalog: PredicateCatalog,
    protocol: str = "predcls",
    ks: Iterable[int] = DEFAULT_KS,
    graph_constraint: bool = True,
    threads: int = 1,
) -> dict[int, EvalReport]:
    preds = predict(params, scenes, protocol, graph_constraint, threads)
    return evaluate(preds, scenes, catalog, ks, protocol)


# ----------------------------------------------------------------------
# files and tables
# ----------------------------------------------------------------------

def save_predictions(predictions: Sequence[ScenePredictions], catalog: PredicateCatalog, path) -> None:
    with open(Path(path), "w") as fh:
        for sp in predictions:
            rows = [[t.subject, t.object, catalog.labels[t.predicate], t.score] for t in sp.triplets]
            fh.write(json.dumps({"scene_id": sp.scene_id, "triplets": rows}) + "\n")


def load_predictions(path, scenes: Sequence[SceneRecord], catalog: PredicateCatalog, protocol: str) -> list[ScenePredictions]:
    """Read a prediction file and align it with ``scenes``; scenes without a line get no predictions."""
    by_id: dict[str, ScenePredictions] = {}
    with open(Path(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                trips = [Triplet(int(s), int(o), catalog.index(p), float(sc)) for s, o, p, sc in rec["triplets"]]
                sid = str(rec["scene_id"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad prediction record ({exc})") from None
            trips.sort(key=lambda t: (-t.score, t.subject, t.object, t.predicate))
            by_id[sid] = ScenePredictions(sid, trips, protocol)
    return [by_id.get(s.scene_id, ScenePredictions(s.scene_id, [], protocol)) for s in scenes]


def _pct(x: float | None) -> str:
    return "   -  " if x is None else f"{100 * x:6.2f}"


def render_table(reports: dict[str, dict[int, EvalReport]]) -> str:
    """Rows per protocol, mR@K and R@K columns, in percent."""
    ks = sorted({k for r in reports.values() for k in r})
    head = "protocol (%) | " + " ".join(f"mR@{k:<4}" for k in ks) + " | " + " ".join(f"R@{k:<5}" for k in ks)
    lines = [head, "-" * len(head)]
    for proto, rep in reports.items():
        mr = " ".join(f"{_pct(rep[k].mean_recall)} " for k in ks)
        r = " ".join(f"{_pct(rep[k].recall)} " for k in ks)
        lines.append(f"{proto:<12} | {mr}| {r}")
    return "\n".join(lines)


def render_breakdown(report: EvalReport) -> str:
    """Per-category mean recall at one K (Geometric / Possessive / Semantic / Misc / Overall)."""
    cols = list(CATEGORIES) + ["Overall"]
    vals = [report.per_category[c] for c in CATEGORIES] + [report.mean_recall]
    head = " | ".join(f"{c:>10}" for c in cols)
    row = " | ".join(f"{_pct(v):>10}" for v in vals)
    return f"{report.protocol} mR@{report.k} (%)\n{head}\n{row}"

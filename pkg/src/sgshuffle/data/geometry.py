"""Box utilities. Boxes are (x1, y1, x2, y2) in absolute pixels, y pointing down."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

Box = tuple[float, float, float, float]

POS_DIM = 8


@dataclass(frozen=True)
class BoxPair:
    union: Box
    intersection: Box | None
    iou: float


def area(box: Sequence[float]) -> float:
    return max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (area(a) + area(b) - inter)


def box_geometry(a: Sequence[float], b: Sequence[float]) -> BoxPair:
    union = (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))
    inter = (max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3]))
    if inter[2] <= inter[0] or inter[3] <= inter[1]:
        return BoxPair(tuple(map(float, union)), None, 0.0)
    return BoxPair(tuple(map(float, union)), tuple(map(float, inter)), iou(a, b))


def normalized_pos(box: Sequence[float] | None, width: float, height: float) -> np.ndarray:
    """(x1, y1, x2, y2, w, h, cx, cy) scaled by image width/height; zeros for ``None``."""
    if box is None:
        return np.zeros(POS_DIM)
    x1, y1, x2, y2 = box
    return np.array(
        [
            x1 / width,
            y1 / height,
            x2 / width,
            y2 / height,
            (x2 - x1) / width,
            (y2 - y1) / height,
            0.5 * (x1 + x2) / width,
            0.5 * (y1 + y2) / height,
        ]
    )


def center(box: Sequence[float]) -> tuple[float, float]:
    return 0.5 * (box[0] + box[2]), 0.5 * (box[1] + box[3])


def contains(outer: Sequence[float], inner: Sequence[float]) -> bool:
    return outer[0] <= inner[0] and outer[1] <= inner[1] and inner[2] <= outer[2] and inner[3] <= outer[3]

"""Axis-aligned box arithmetic.

Boxes use continuous ``(x0, y0, x1, y1)`` corners; area is ``(x1 - x0) * (y1 - y0)``
with no +1 pixel convention. Scalar helpers operate on :class:`Box`, the
``*_array`` variants on ``(N, 4)`` float arrays and are what the hot paths use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

# exp() guard for width/height deltas, same bound torchvision uses.
DELTA_CLAMP = math.log(1000.0 / 16)


class DegenerateBoxError(ValueError):
    """Raised when clipping collapses a regressed box below one grid unit."""


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = tuple(float(v) for v in (self.x0, self.y0, self.x1, self.y1))
        for name, v in zip(("x0", "y0", "x1", "y1"), coords):
            object.__setattr__(self, name, v)
        if not all(math.isfinite(v) for v in coords):
            raise ValueError(f"non-finite box {coords}")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"empty box {coords}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=float)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class LabeledBox:
    box: Box
    class_id: int


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


@dataclass
class DetectionSet:
    """Array-backed detections: ``boxes (D, 4)``, ``classes (D,)``, ``scores (D,)``."""

    boxes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self) -> Iterator[Detection]:
        for b, c, s in zip(self.boxes, self.classes, self.scores):
            yield Detection(Box.from_array(b), int(c), float(s))

    def __getitem__(self, idx) -> Detection:
        return Detection(Box.from_array(self.boxes[idx]), int(self.classes[idx]),
                         float(self.scores[idx]))

    @classmethod
    def empty(cls) -> "DetectionSet":
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=int), np.zeros(0))

    @classmethod
    def from_detections(cls, dets: Sequence[Detection]) -> "DetectionSet":
        if isinstance(dets, DetectionSet):
            return dets
        if len(dets) == 0:
            return cls.empty()
        return cls(np.array([d.box.as_list() for d in dets], dtype=float),
                   np.array([d.class_id for d in dets], dtype=int),
                   np.array([d.score for d in dets], dtype=float))

    def subset(self, idx) -> "DetectionSet":
        return DetectionSet(self.boxes[idx], self.classes[idx], self.scores[idx])


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.astype(float, copy=False).reshape(-1, 4)
    return np.array([b.as_list() for b in boxes], dtype=float).reshape(-1, 4)


def area_array(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def intersection_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise intersection areas, shape ``(N, M)``."""
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    return np.maximum(w, 0.0) * np.maximum(h, 0.0)


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    inter = intersection_array(a, b)
    union = area_array(a)[:, None] + area_array(b)[None, :] - inter
    return inter / union


def iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def max_overlap_gamma(p: Box, dets: Sequence[Detection]) -> tuple[float, Optional[int]]:
    """Largest IoU between ``p`` and any detection, with the argmax index.

    Returns ``(0.0, None)`` for an empty detection list. Ties resolve to the
    lowest index.
    """
    if len(dets) == 0:
        return 0.0, None
    overlaps = iou_array(p.as_array()[None], DetectionSet.from_detections(dets).boxes)[0]
    idx = int(np.argmax(overlaps))
    return float(overlaps[idx]), idx


def nms_indices(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray,
                thresh: float, max_keep: Optional[int] = None) -> np.ndarray:
    """Greedy per-class NMS over arrays; returns kept indices in score order.

    Order is score descending with the original index breaking ties. When
    ``max_keep`` is given the per-class loop stops after that many survivors,
    which leaves the first ``max_keep`` survivors of every class unchanged.
    """
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=int)
    order = np.lexsort((np.arange(n), -scores))
    kept = []
    for c in np.unique(classes):
        idx = order[classes[order] == c]
        cls_keep = []
        while idx.size:
            i = idx[0]
            cls_keep.append(i)
            if max_keep is not None and len(cls_keep) >= max_keep:
                break
            rest = idx[1:]
            ov = iou_array(boxes[i][None], boxes[rest])[0]
            idx = rest[ov < thresh]
        kept.extend(cls_keep)
    kept = np.array(kept, dtype=int)
    return kept[np.lexsort((kept, -scores[kept]))]


def nms(dets: Sequence[Detection], thresh: float) -> list[Detection]:
    """Greedy per-class NMS; the survivors keep their input order."""
    ds = DetectionSet.from_detections(dets)
    keep = nms_indices(ds.boxes, ds.scores, ds.classes, thresh)
    return [ds[int(i)] for i in np.sort(keep)]


def encode_deltas_array(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    pcx = proposals[:, 0] + 0.5 * pw
    pcy = proposals[:, 1] + 0.5 * ph
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tcx = targets[:, 0] + 0.5 * tw
    tcy = targets[:, 1] + 0.5 * th
    return np.stack([(tcx - pcx) / pw, (tcy - pcy) / ph,
                     np.log(tw / pw), np.log(th / ph)], axis=1)


def decode_deltas_array(proposals: np.ndarray, deltas: np.ndarray,
                        bounds: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """Apply center-size deltas; returns ``(boxes, degenerate_mask)``.

    With ``bounds`` set, boxes are clipped to ``[0, bounds]`` and any box whose
    clipped side falls below one grid unit is flagged in the mask.
    """
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    cx = proposals[:, 0] + 0.5 * pw + deltas[:, 0] * pw
    cy = proposals[:, 1] + 0.5 * ph + deltas[:, 1] * ph
    w = pw * np.exp(np.minimum(deltas[:, 2], DELTA_CLAMP))
    h = ph * np.exp(np.minimum(deltas[:, 3], DELTA_CLAMP))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if bounds is None:
        return out, np.zeros(len(out), dtype=bool)
    out = np.clip(out, 0.0, bounds)
    degenerate = ((out[:, 2] - out[:, 0]) < 1.0) | ((out[:, 3] - out[:, 1]) < 1.0)
    return out, degenerate


def encode_deltas(proposal: Box, target: Box) -> np.ndarray:
    return encode_deltas_array(proposal.as_array()[None], target.as_array()[None])[0]


def apply_deltas(proposal: Box, deltas, bounds: Optional[float] = None) -> Box:
    """Regress ``proposal`` by ``(dx, dy, dw, dh)``, clipping to ``[0, bounds]``."""
    out, degenerate = decode_deltas_array(proposal.as_array()[None],
                                          np.asarray(deltas, dtype=float).reshape(1, 4), bounds)
    if degenerate[0]:
        raise DegenerateBoxError(f"regressed box {out[0].tolist()} collapsed below one unit")
    return Box.from_array(out[0])

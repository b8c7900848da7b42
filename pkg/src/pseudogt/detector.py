"""Linear-sigmoid detector over box features.

Per-class scores are ``sigmoid(W_c . [x; 1])`` and a single class-agnostic
linear head predicts center-size deltas. The supervised loss is per-class
binary cross-entropy plus smooth-L1 box regression, with closed-form
gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .geometry import (
    Detection,
    DetectionSet,
    LabeledBox,
    decode_deltas_array,
    encode_deltas_array,
    iou_array,
)
from .synthworld import ProposalSet, SyntheticImage, feature_dim

FG_IOU = 0.5
BG_IOU = 0.3

__all__ = [
    "Detection", "DetectorParams", "LossBreakdown", "score_proposals", "detect",
    "loss_and_grad", "sgd_step",
]


@dataclass
class DetectorParams:
    cls_weights: np.ndarray  # (C, F + 1), last column is the bias
    reg_weights: np.ndarray  # (4, F + 1)

    @classmethod
    def zeros(cls, n_classes: int) -> "DetectorParams":
        f = feature_dim(n_classes) + 1
        return cls(np.zeros((n_classes, f)), np.zeros((4, f)))

    @property
    def n_classes(self) -> int:
        return self.cls_weights.shape[0]

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.cls_weights.copy(), self.reg_weights.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.cls_weights.ravel(), self.reg_weights.ravel()])

    def with_flat(self, v: np.ndarray) -> "DetectorParams":
        n = self.cls_weights.size
        return DetectorParams(v[:n].reshape(self.cls_weights.shape).copy(),
                              v[n:].reshape(self.reg_weights.shape).copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.cls_weights).all() and np.isfinite(self.reg_weights).all())

    def __add__(self, other: "DetectorParams") -> "DetectorParams":
        return DetectorParams(self.cls_weights + other.cls_weights,
                              self.reg_weights + other.reg_weights)

    def scale(self, a: float) -> "DetectorParams":
        return DetectorParams(self.cls_weights * a, self.reg_weights * a)

    def to_json(self) -> dict:
        return {
            "cls_shape": list(self.cls_weights.shape),
            "cls_weights": self.cls_weights.ravel().tolist(),
            "reg_shape": list(self.reg_weights.shape),
            "reg_weights": self.reg_weights.ravel().tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "DetectorParams":
        return cls(np.array(d["cls_weights"], dtype=float).reshape(d["cls_shape"]),
                   np.array(d["reg_weights"], dtype=float).reshape(d["reg_shape"]))

    def save(self, path) -> None:
        # json floats round-trip exactly through repr
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "DetectorParams":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class LossBreakdown:
    cls_loss: float
    reg_loss: float
    total: float
    n_fg: int
    n_bg: int

    @property
    def no_foreground(self) -> bool:
        return self.n_fg == 0


def _design(image: SyntheticImage, boxes: np.ndarray) -> np.ndarray:
    x = image.features(boxes)
    return np.hstack([x, np.ones((len(x), 1))])


def _boxes(proposals) -> np.ndarray:
    return proposals.boxes if isinstance(proposals, ProposalSet) else np.asarray(proposals, float)


def score_proposals(params: DetectorParams, image: SyntheticImage, proposals) -> np.ndarray:
    """Per-proposal, per-class scores in (0, 1), shape ``(L, C)``."""
    boxes = _boxes(proposals)
    if len(boxes) == 0:
        raise ValueError("no proposals to score")
    return expit(_design(image, boxes) @ params.cls_weights.T)


def detect(params: DetectorParams, image: SyntheticImage, gt, proposals,
           max_detections: int = 30, nms_thresh: float = 0.5
           ) -> tuple[DetectionSet, np.ndarray]:
    """Regress, run per-class NMS and keep the top ``max_detections`` by score.

    ``gt`` is accepted for interface parity with detectors that restrict
    inference around annotations; it does not influence the output.
    """
    del gt
    boxes = _boxes(proposals)
    if len(boxes) == 0:
        raise ValueError("no proposals to detect from")
    x = _design(image, boxes)
    scores = expit(x @ params.cls_weights.T)
    regressed, degenerate = decode_deltas_array(boxes, x @ params.reg_weights.T, image.grid)
    # a collapsed regression falls back to the proposal it came from
    regressed[degenerate] = boxes[degenerate]

    rows, cls = top_nms(regressed, scores, nms_thresh, max_detections)
    dets = DetectionSet(regressed[rows], cls, scores[rows, cls])
    return dets, dets.scores


def top_nms(boxes: np.ndarray, scores: np.ndarray, thresh: float, k: int
            ) -> tuple[np.ndarray, np.ndarray]:
    """First ``k`` survivors of per-class greedy NMS, in global score order.

    ``boxes`` are shared by every class (class-agnostic regression), so each
    survivor's IoU row serves every class. Walking candidates in global score order
    and stopping at ``k`` survivors gives the same result as full per-class
    NMS followed by a top-``k`` cut. Returns ``(box_rows, class_ids)``.
    """
    L, C = scores.shape
    flat = scores.ravel()
    # score descending, then flat index ascending
    order = np.lexsort((np.arange(flat.size), -flat))
    # suppressed[c, l]: box l overlaps a kept class-c box at >= thresh. Only
    # survivors need an IoU row, and there are at most k of them.
    suppressed = np.zeros((C, L), dtype=bool)
    x0, y0, x1, y1 = boxes.T
    area = (x1 - x0) * (y1 - y0)
    out_rows, out_cls = [], []
    for f in order.tolist():
        l, c = divmod(f, C)
        if suppressed[c, l]:
            continue
        w = np.maximum(np.minimum(x1, x1[l]) - np.maximum(x0, x0[l]), 0.0)
        h = np.maximum(np.minimum(y1, y1[l]) - np.maximum(y0, y0[l]), 0.0)
        inter = w * h
        suppressed[c] |= inter >= thresh * (area + area[l] - inter)
        out_rows.append(l)
        out_cls.append(c)
        if len(out_rows) >= k:
            break
    return np.array(out_rows, dtype=int), np.array(out_cls, dtype=int)


def _smooth_l1(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.abs(e)
    val = np.where(a < 1.0, 0.5 * e * e, a - 0.5)
    grad = np.where(a < 1.0, e, np.sign(e))
    return val, grad


def _gt_arrays(gt: Sequence[LabeledBox]) -> tuple[np.ndarray, np.ndarray]:
    return (np.array([g.box.as_list() for g in gt], dtype=float).reshape(-1, 4),
            np.array([g.class_id for g in gt], dtype=int))


def loss_and_grad(params: DetectorParams, image: SyntheticImage, proposals,
                  gt: Sequence[LabeledBox], lam: float = 1.0,
                  gt_arrays: Optional[tuple[np.ndarray, np.ndarray]] = None
                  ) -> tuple[LossBreakdown, DetectorParams]:
    """Supervised loss against ``gt`` and its exact gradient.

    Proposals with IoU >= 0.5 to their best GT are foreground for that GT's
    class, those below 0.3 are background for every class, the rest are
    ignored. Classification is summed over classes and averaged over the
    assigned proposals; regression is averaged over foreground only.
    """
    boxes = _boxes(proposals)
    gt_boxes, gt_classes = gt_arrays if gt_arrays is not None else _gt_arrays(gt)
    if len(gt_boxes) == 0:
        raise ValueError("loss_and_grad needs at least one ground-truth box")
    x = _design(image, boxes)

    overlaps = iou_array(boxes, gt_boxes)
    best = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(len(boxes)), best]
    fg = best_iou >= FG_IOU
    bg = best_iou < BG_IOU
    assigned = fg | bg
    n_fg, n_bg = int(fg.sum()), int(bg.sum())
    n_cls = n_fg + n_bg

    g_cls = np.zeros_like(params.cls_weights)
    g_reg = np.zeros_like(params.reg_weights)
    cls_loss = reg_loss = 0.0
    if n_cls:
        xa = x[assigned]
        z = xa @ params.cls_weights.T
        y = np.zeros_like(z)
        fg_rows = np.flatnonzero(fg[assigned])
        y[fg_rows, gt_classes[best[assigned][fg_rows]]] = 1.0
        # BCE with logits: log(1 + e^z) - y z
        cls_loss = float((np.logaddexp(0.0, z) - y * z).sum() / n_cls)
        g_cls = (expit(z) - y).T @ xa / n_cls
    if n_fg:
        xf = x[fg]
        pred = xf @ params.reg_weights.T
        target = encode_deltas_array(boxes[fg], gt_boxes[best[fg]])
        val, dval = _smooth_l1(pred - target)
        reg_loss = float(val.sum() / n_fg)
        g_reg = lam * dval.T @ xf / n_fg

    total = cls_loss + lam * reg_loss
    return (LossBreakdown(cls_loss, reg_loss, total, n_fg, n_bg),
            DetectorParams(g_cls, g_reg))


def sgd_step(params: DetectorParams, grad: DetectorParams, velocity: Optional[DetectorParams],
             lr: float, momentum: float = 0.9, weight_decay: float = 5e-4
             ) -> tuple[DetectorParams, DetectorParams]:
    """Heavy-ball SGD with L2 decay folded into the gradient.

    ``v <- momentum * v + (g + weight_decay * w)``, ``w <- w - lr * v``.
    Returns the new parameters and velocity.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if velocity is None:
        velocity = DetectorParams(np.zeros_like(params.cls_weights),
                                  np.zeros_like(params.reg_weights))
    v_cls = momentum * velocity.cls_weights + grad.cls_weights + weight_decay * params.cls_weights
    v_reg = momentum * velocity.reg_weights + grad.reg_weights + weight_decay * params.reg_weights
    new = DetectorParams(params.cls_weights - lr * v_cls, params.reg_weights - lr * v_reg)
    return new, DetectorParams(v_cls, v_reg)

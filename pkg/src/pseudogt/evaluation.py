"""AP50, TIDE-style error breakdown, score heatmaps and entropy curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import DetectionSet, iou_array

IOU_MATCH = 0.5
TIDE_FG = 0.5
TIDE_BG = 0.1

ERROR_TYPES = ("Cls", "Loc", "Both", "Dupe", "Bkg", "Miss")


@dataclass
class APResult:
    per_class: dict[int, float]
    map50: float
    n_gt: dict[int, int]
    n_det: dict[int, int]


@dataclass
class ErrorProfile:
    counts: dict[str, int] = field(default_factory=lambda: {k: 0 for k in ERROR_TYPES})
    n_tp: int = 0

    def __getitem__(self, key: str) -> int:
        return self.counts[key]


# detections / gt are keyed by image id: dets[i] is a DetectionSet,
# gt[i] is a (boxes (G, 4), classes (G,)) pair.
Detections = Mapping[int, DetectionSet]
GroundTruth = Mapping[int, tuple]


def _match(dets: Detections, gt: GroundTruth):
    """Greedy VOC matching per class, highest score first.

    Returns a list of ``(image_id, det_index, score, class_id, is_tp)`` sorted
    by score (ties by image id then index) and the set of matched GT keys.
    """
    # matching never crosses images, so each image is matched on its own
    # IoU matrix and the results are merged in global score order
    entries = []
    matched: set[tuple[int, int]] = set()
    for image_id, ds in dets.items():
        if len(ds) == 0:
            continue
        g_boxes, g_classes = gt.get(image_id, (np.zeros((0, 4)), np.zeros(0, dtype=int)))
        g_classes = np.asarray(g_classes)
        ov = iou_array(ds.boxes, np.asarray(g_boxes))
        # a detection may only match GT of its own class
        ov = np.where(g_classes[None, :] == np.asarray(ds.classes)[:, None], ov, -1.0)
        taken = np.zeros(len(g_classes), dtype=bool)
        for j in np.lexsort((np.arange(len(ds)), -ds.scores)).tolist():
            tp = False
            if ov.shape[1]:
                k = int(np.argmax(ov[j]))
                if ov[j, k] >= IOU_MATCH and not taken[k]:
                    taken[k] = True
                    matched.add((image_id, k))
                    tp = True
            entries.append((-float(ds.scores[j]), image_id, j, int(ds.classes[j]), tp))
    entries.sort(key=lambda e: e[:3])
    out = [(image_id, j, -neg, c, tp) for neg, image_id, j, c, tp in entries]
    return out, matched


def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """Area under the monotone-envelope PR curve for score-sorted hits."""
    if n_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=float)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    d_recall = np.diff(np.concatenate([[0.0], recall]))
    return float((d_recall * envelope).sum())


def ap50(dets: Detections, gt: GroundTruth, n_classes: int) -> APResult:
    matches, _ = _match(dets, gt)
    per_class, n_gt, n_det = {}, {}, {}
    for c in range(n_classes):
        n_gt[c] = int(sum(int((np.asarray(g[1]) == c).sum()) for g in gt.values()))
        hits = [m[4] for m in matches if m[3] == c]
        n_det[c] = len(hits)
        if n_gt[c]:
            per_class[c] = average_precision(hits, n_gt[c])
    m = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return APResult(per_class, m, n_gt, n_det)


def tide_errors(dets: Detections, gt: GroundTruth) -> ErrorProfile:
    """Assign every false positive one error type and count missed GT.

    A false positive is judged against the GT it overlaps most (any class):
    IoU < 0.1 is Bkg; IoU >= 0.5 is Dupe when the class agrees and Cls when it
    does not; in between it is Loc (same class) or Both (different class).
    """
    matches, matched = _match(dets, gt)
    prof = ErrorProfile()
    for image_id, j, _score, c, tp in matches:
        if tp:
            prof.n_tp += 1
            continue
        g_boxes, g_classes = gt.get(image_id, (np.zeros((0, 4)), np.zeros(0, dtype=int)))
        if len(g_boxes) == 0:
            prof.counts["Bkg"] += 1
            continue
        ov = iou_array(dets[image_id].boxes[j][None], np.asarray(g_boxes))[0]
        k = int(np.argmax(ov))
        same = int(np.asarray(g_classes)[k]) == c
        if ov[k] < TIDE_BG:
            prof.counts["Bkg"] += 1
        elif ov[k] >= TIDE_FG:
            prof.counts["Dupe" if same else "Cls"] += 1
        else:
            prof.counts["Loc" if same else "Both"] += 1
    n_total = sum(len(np.asarray(g[1])) for g in gt.values())
    prof.counts["Miss"] = n_total - len(matched)
    return prof


def heatmap(scores: np.ndarray, proposals: np.ndarray, grid_size: int, class_id: int) -> np.ndarray:
    """Per-cell mean of class scores over the proposals covering the cell center."""
    col = np.asarray(scores, dtype=float)[:, class_id]
    boxes = np.asarray(proposals, dtype=float).reshape(-1, 4)
    centers = np.arange(grid_size) + 0.5
    in_x = (boxes[:, 0, None] <= centers[None]) & (centers[None] < boxes[:, 2, None])
    in_y = (boxes[:, 1, None] <= centers[None]) & (centers[None] < boxes[:, 3, None])
    # (rows = y, cols = x)
    total = np.einsum("l,ly,lx->yx", col, in_y.astype(float), in_x.astype(float))
    count = np.einsum("ly,lx->yx", in_y.astype(float), in_x.astype(float))
    out = np.zeros((grid_size, grid_size))
    np.divide(total, count, out=out, where=count > 0)
    return out


def write_pgm(grid: np.ndarray, path) -> None:
    """Binary P5 greyscale, maxval 255, value ``round(255 * cell)``."""
    vals = np.clip(np.rint(255.0 * np.asarray(grid, dtype=float)), 0, 255).astype(np.uint8)
    h, w = vals.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(vals.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def entropy_curve(history) -> np.ndarray:
    """Mean per-image sampler entropy, one value per recorded epoch."""
    records = history.records if hasattr(history, "records") else history
    if not records:
        raise ValueError("empty history")
    return np.array([r.mean_entropy for r in records], dtype=float)


def write_ap_csv(results: Mapping[str, APResult], path) -> None:
    classes = sorted({c for r in results.values() for c in r.n_gt})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "map50"] + [f"ap_{c}" for c in classes])
        for name, r in results.items():
            w.writerow([name, repr(r.map50)] +
                       [repr(r.per_class[c]) if c in r.per_class else "" for c in classes])


def write_errors_csv(profiles: Mapping[str, ErrorProfile], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "tp"] + list(ERROR_TYPES))
        for name, p in profiles.items():
            w.writerow([name, p.n_tp] + [p.counts[k] for k in ERROR_TYPES])

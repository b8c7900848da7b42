"""Pseudo ground-truth sampling from persistent proposal score tables.

Each weakly labelled image keeps an ``(L, C)`` table of proposal scores,
zero-initialised. Pseudo-GT boxes for a class are drawn from a temperature
softmax over that class's column, and after every detection pass the table
is pulled toward the scores of overlapping detections::

    s <- (1 - gamma) * s + gamma * s_det

where ``gamma`` is the IoU between the proposal and the detection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Literal, Optional, Sequence

import numpy as np
from scipy.special import logit as _logit

from .geometry import Box, DetectionSet, LabeledBox, iou_array
from .synthworld import ProposalSet

LOGIT_CLAMP = 8.0

PropagationStrategy = Literal["all_boxes", "max_overlap", "max_overlap_thresholded"]


@dataclass
class ScoreTable:
    image_id: int
    scores: np.ndarray  # (L, C)

    @classmethod
    def zeros(cls, image_id: int, n_proposals: int, n_classes: int) -> "ScoreTable":
        return cls(image_id, np.zeros((n_proposals, n_classes)))

    def copy(self) -> "ScoreTable":
        return ScoreTable(self.image_id, self.scores.copy())

    def rows(self) -> Iterable[tuple[int, int, int, float]]:
        L, C = self.scores.shape
        for l in range(L):
            for c in range(C):
                yield self.image_id, l, c, float(self.scores[l, c])


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 2.5
    k: int = 5
    score_space: Literal["raw", "logit"] = "logit"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.score_space not in ("raw", "logit"):
            raise ValueError(f"unknown score space {self.score_space!r}")


@dataclass(frozen=True)
class PropagationConfig:
    strategy: PropagationStrategy = "max_overlap_thresholded"
    threshold: float = 0.3

    def __post_init__(self):
        if self.strategy not in ("all_boxes", "max_overlap", "max_overlap_thresholded"):
            raise ValueError(f"unknown propagation strategy {self.strategy!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")


def theta_weights(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature softmax ``exp(s / T) / sum exp(s / T)``, max-shifted."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(scores, dtype=float) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def sampling_scores(column: np.ndarray, score_space: str) -> np.ndarray:
    """Map stored scores into the space the softmax is taken in."""
    column = np.asarray(column, dtype=float)
    if score_space == "raw":
        return column
    with np.errstate(divide="ignore"):
        return np.clip(_logit(np.clip(column, 0.0, 1.0)), -LOGIT_CLAMP, LOGIT_CLAMP)


def sampling_distribution(table: ScoreTable, class_id: int, cfg: SamplerConfig) -> np.ndarray:
    return theta_weights(sampling_scores(table.scores[:, class_id], cfg.score_space),
                         cfg.temperature)


def sample_indices(table: ScoreTable, present_classes: Iterable[int], cfg: SamplerConfig,
                   rng: np.random.Generator) -> list[tuple[int, int]]:
    """``(proposal_index, class_id)`` pairs; K draws per class, duplicates dropped."""
    out = []
    for c in sorted(present_classes):
        theta = sampling_distribution(table, c, cfg)
        draws = rng.choice(len(theta), size=cfg.k, replace=True, p=theta)
        seen = set()
        for l in draws.tolist():
            if l not in seen:
                seen.add(l)
                out.append((l, c))
    return out


def sample_pseudo_gt(table: ScoreTable, proposals: ProposalSet, present_classes: Iterable[int],
                     cfg: SamplerConfig, rng: np.random.Generator) -> list[LabeledBox]:
    present = list(present_classes)
    if not present:
        raise ValueError("present_classes must be nonempty")
    if len(proposals) == 0:
        raise ValueError("no proposals to sample from")
    return [LabeledBox(Box.from_array(proposals.boxes[l]), c)
            for l, c in sample_indices(table, present, cfg, rng)]


def propagate_scores(table: ScoreTable, proposals: ProposalSet, detections,
                     cfg: Optional[PropagationConfig] = None) -> ScoreTable:
    """Return a new table with detection scores propagated onto proposals.

    Class ``c`` columns only listen to class-``c`` detections. ``max_overlap``
    uses the single best-overlapping detection (lowest index on ties);
    the thresholded variant skips updates with ``gamma <= threshold``;
    ``all_boxes`` applies every detection in score-descending order.
    """
    cfg = cfg or PropagationConfig()
    dets = DetectionSet.from_detections(detections)
    out = table.copy()
    if len(dets) == 0:
        return out
    if dets.scores.min() < 0 or dets.scores.max() > 1:
        raise ValueError("detection scores must lie in [0, 1]")
    s = out.scores
    overlaps = iou_array(proposals.boxes, dets.boxes)
    for c in np.unique(dets.classes):
        idx = np.flatnonzero(dets.classes == c)
        if cfg.strategy == "all_boxes":
            order = idx[np.lexsort((idx, -dets.scores[idx]))]
            for j in order:
                g = overlaps[:, j]
                s[:, c] = (1.0 - g) * s[:, c] + g * dets.scores[j]
            continue
        ov = overlaps[:, idx]
        arg = ov.argmax(axis=1)
        gamma = ov[np.arange(len(ov)), arg]
        s_det = dets.scores[idx[arg]]
        if cfg.strategy == "max_overlap_thresholded":
            gamma = np.where(gamma > cfg.threshold, gamma, 0.0)
        s[:, c] = (1.0 - gamma) * s[:, c] + gamma * s_det
    return out


def weighted_sum_h(scores_f: np.ndarray, weights_w: np.ndarray) -> float:
    """Exact ``h = sum_l w_l f_l`` over every proposal."""
    w = np.asarray(weights_w, dtype=float)
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    return float(np.dot(np.asarray(scores_f, dtype=float), w))


def estimate_h_draws(scores_f: np.ndarray, table_column: np.ndarray, cfg: SamplerConfig,
                     n_draws: int, rng: np.random.Generator,
                     mode: Literal["uniform", "importance"] = "importance") -> np.ndarray:
    """Single-draw estimates of ``h`` whose mean is :func:`estimate_h`.

    ``uniform``: ``L * theta_k * f_k`` with ``k ~ U{0..L-1}``.
    ``importance``: ``f_k`` with ``k ~ Multinomial(theta)``.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    f = np.asarray(scores_f, dtype=float)
    theta = theta_weights(sampling_scores(table_column, cfg.score_space), cfg.temperature)
    L = len(f)
    if mode == "uniform":
        k = rng.integers(0, L, size=n_draws)
        return L * theta[k] * f[k]
    if mode == "importance":
        return f[rng.choice(L, size=n_draws, replace=True, p=theta)]
    raise ValueError(f"unknown estimator mode {mode!r}")


def estimate_h(scores_f: np.ndarray, table_column: np.ndarray, cfg: SamplerConfig,
               n_draws: int, rng: np.random.Generator,
               mode: Literal["uniform", "importance"] = "importance") -> float:
    return float(estimate_h_draws(scores_f, table_column, cfg, n_draws, rng, mode).mean())


def sampler_entropy(theta: np.ndarray) -> float:
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    p = np.asarray(theta, dtype=float)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def table_entropy(table: ScoreTable, classes: Iterable[int], cfg: SamplerConfig) -> float:
    """Mean sampler entropy over the given classes' columns."""
    vals = [sampler_entropy(sampling_distribution(table, c, cfg)) for c in classes]
    return float(np.mean(vals)) if vals else float("nan")


def write_score_tables(tables: Sequence[ScoreTable], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "proposal_index", "class_id", "score"])
        for t in tables:
            for row in t.rows():
                w.writerow([row[0], row[1], row[2], repr(row[3])])


def read_score_tables(path) -> dict[int, ScoreTable]:
    entries: dict[int, list[tuple[int, int, float]]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            entries.setdefault(int(r["image_id"]), []).append(
                (int(r["proposal_index"]), int(r["class_id"]), float(r["score"])))
    out = {}
    for image_id, rows in entries.items():
        L = max(r[0] for r in rows) + 1
        C = max(r[1] for r in rows) + 1
        s = np.zeros((L, C))
        for l, c, v in rows:
            s[l, c] = v
        out[image_id] = ScoreTable(image_id, s)
    return out

"""Semi-weakly supervised training loop.

Every batch slot is drawn from the fully labelled pool with probability
``ratio`` and from the weakly labelled pool otherwise. Fully labelled images
train the detector on their boxes. Weakly labelled images sample pseudo-GT
boxes from their score table, run detection, propagate detection scores back
into the table and then train on the sampled boxes as if they were real.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .detector import DetectorParams, detect, loss_and_grad, sgd_step
from .evaluation import APResult, ap50
from .geometry import DetectionSet
from .pseudo_gt import (
    PropagationConfig,
    SamplerConfig,
    ScoreTable,
    propagate_scores,
    sample_indices,
    table_entropy,
)
from .synthworld import (
    Dataset,
    DatasetSplit,
    ProposalSet,
    SyntheticImage,
    Unlabeled,
    Weak,
    AbsentClassError,
    cam_mask,
    derive_seed,
    generate_proposals,
    spurious_cam,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-2
    lr_decay_epochs: tuple[int, ...] = (5, 10)
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # None: draw in proportion to the pool sizes (no balancing)
    ratio: Optional[float] = 0.7
    use_weak: bool = True
    lam: float = 1.0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    cam_filter: bool = False
    cam_rho: float = 0.1
    cam_fp_rate: float = 0.1
    max_detections: int = 30
    n_proposals: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.ratio is not None and not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    full_loss: float
    weak_loss: float
    map50: float
    mean_entropy: float
    per_class_ap: dict[int, float]
    n_full: int
    n_weak: int


@dataclass
class RunHistory:
    records: list[EpochRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    # per weak image: sampler entropy before training and after the last epoch
    entropy_initial: dict[int, float] = field(default_factory=dict)
    entropy_final: dict[int, float] = field(default_factory=dict)
    proposal_counts: dict[int, int] = field(default_factory=dict)
    tables: dict[int, ScoreTable] = field(default_factory=dict)
    weak_proposals: dict[int, ProposalSet] = field(default_factory=dict)

    @property
    def final_map50(self) -> float:
        return self.records[-1].map50

    def to_csv(self, path, n_classes: int) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "full_loss", "weak_loss", "map50", "mean_entropy"]
                       + [f"ap_{c}" for c in range(n_classes)])
            for r in self.records:
                w.writerow([r.epoch, repr(r.lr), repr(r.full_loss), repr(r.weak_loss),
                            repr(r.map50), repr(r.mean_entropy)]
                           + [repr(r.per_class_ap[c]) if c in r.per_class_ap else ""
                              for c in range(n_classes)])


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule ``lr * factor ** -#{d : epoch >= d}``; ``epoch`` counts from 1."""
    n = sum(1 for d in cfg.lr_decay_epochs if epoch >= d)
    return cfg.lr * cfg.lr_decay_factor ** (-n)


def effective_ratio(n_full: int, n_weak: int, ratio: Optional[float]) -> tuple[float, Optional[str]]:
    """Resolve the full-pool draw probability, forcing it when a pool is empty."""
    if n_full == 0 and n_weak == 0:
        raise ValueError("both pools are empty")
    r = n_full / (n_full + n_weak) if ratio is None else float(ratio)
    if n_weak == 0 and r < 1.0:
        return 1.0, f"weak pool empty, ratio forced from {r:g} to 1"
    if n_full == 0 and r > 0.0:
        return 0.0, f"full pool empty, ratio forced from {r:g} to 0"
    return r, None


def mixed_batch_sampler(split: DatasetSplit, ratio: Optional[float], batch_size: int,
                        rng: np.random.Generator,
                        warnings: Optional[list[str]] = None) -> list[int]:
    """Draw a batch; each slot comes from the full pool with probability ``ratio``."""
    full, weak = split.full_pool, split.weak_pool
    r, msg = effective_ratio(len(full), len(weak), ratio)
    if msg:
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
    from_full = rng.random(batch_size) < r
    n_full = int(from_full.sum())
    picks_full = rng.integers(0, max(len(full), 1), size=n_full)
    picks_weak = rng.integers(0, max(len(weak), 1), size=batch_size - n_full)
    out, i, j = [], 0, 0
    for f in from_full:
        if f:
            out.append(int(full[picks_full[i]]))
            i += 1
        else:
            out.append(int(weak[picks_weak[j]]))
            j += 1
    return out


def cams_for(image: SyntheticImage, classes, fp_rate: float, seed: int = 0) -> dict[int, np.ndarray]:
    """Activation maps for each listed class; wrongly listed classes get a spurious map."""
    out = {}
    for c in sorted(classes):
        try:
            out[c] = cam_mask(image, c, fp_rate, seed)
        except AbsentClassError:
            out[c] = spurious_cam(image, c, fp_rate, seed)
    return out


def cam_overlap(boxes: np.ndarray, cells: np.ndarray, grid: int) -> np.ndarray:
    """Fraction of each box's area lying on active CAM cells."""
    edges = np.linspace(0.0, grid, cells.shape[0] + 1)
    ox = np.clip(np.minimum(boxes[:, 2, None], edges[None, 1:])
                 - np.maximum(boxes[:, 0, None], edges[None, :-1]), 0, None)
    oy = np.clip(np.minimum(boxes[:, 3, None], edges[None, 1:])
                 - np.maximum(boxes[:, 1, None], edges[None, :-1]), 0, None)
    inter = np.einsum("ny,yx,nx->n", oy, cells.astype(float), ox)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return inter / area


def filter_proposals_cam(proposals: ProposalSet, image: SyntheticImage, present_classes,
                         rho: float = 0.1, fp_rate: float = 0.1,
                         cams: Optional[dict[int, np.ndarray]] = None,
                         warnings: Optional[list[str]] = None) -> ProposalSet:
    """Keep proposals overlapping some present class's CAM by at least ``rho``.

    The kept set is the union over classes, in original order. An empty
    result falls back to the unfiltered proposals.
    """
    if cams is None:
        cams = cams_for(image, present_classes, fp_rate)
    keep = np.zeros(len(proposals), dtype=bool)
    for c in present_classes:
        keep |= cam_overlap(proposals.boxes, cams[c], image.grid) >= rho
    if not keep.any():
        msg = f"CAM filter emptied image {image.image_id}; keeping all proposals"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return proposals
    return ProposalSet(proposals.image_id, proposals.boxes[keep])


def infer_weak_labels(dataset: Dataset, threshold: float = 0.0, fp_rate: float = 0.1,
                      miss_rate: float = 0.05, seed: int = 0) -> Dataset:
    """Replace every Unlabeled annotation with class labels from an oracle classifier.

    Present classes are missed with probability ``miss_rate``; an absent class
    fires a spurious activation map with probability ``fp_rate``. A class is
    predicted when the active-cell fraction of its map exceeds ``threshold``.
    """
    new = {}
    for im in dataset.images:
        if not isinstance(dataset.annotation(im.image_id), Unlabeled):
            continue
        rng = np.random.default_rng(derive_seed(seed, "classifier", im.rng_seed))
        predicted = set()
        for c in range(dataset.n_classes):
            u = rng.random()
            if c in im.classes:
                cells = cam_mask(im, c, fp_rate, seed) if u >= miss_rate else None
            else:
                cells = spurious_cam(im, c, fp_rate, seed) if u < fp_rate else None
            if cells is not None and cells.mean() > threshold:
                predicted.add(c)
        new[im.image_id] = Weak(frozenset(predicted))
    return dataset.with_annotations(new)


class ProposalBank:
    """Per-image proposal sets, generated lazily from the dataset seed."""

    def __init__(self, dataset: Dataset, n_proposals: int = 300,
                 preset: Optional[dict[int, ProposalSet]] = None):
        self.dataset = dataset
        self.n_proposals = n_proposals
        self._sets: dict[int, ProposalSet] = dict(preset or {})

    def __getitem__(self, image_id: int) -> ProposalSet:
        ps = self._sets.get(image_id)
        if ps is None:
            ps = generate_proposals(self.dataset.image(image_id), self.n_proposals,
                                    seed=derive_seed(self.dataset.seed, "proposals"))
            self._sets[image_id] = ps
        return ps


@dataclass
class TrainState:
    config: TrainConfig
    dataset: Dataset
    params: DetectorParams
    velocity: Optional[DetectorParams]
    tables: dict[int, ScoreTable]
    proposals: dict[int, ProposalSet]
    weak_labels: dict[int, frozenset]
    grad_sum: Optional[DetectorParams] = None
    n_accum: int = 0
    full_losses: list = field(default_factory=list)
    weak_losses: list = field(default_factory=list)
    epoch: int = 1
    step: int = 0


def _slot_rng(cfg: TrainConfig, epoch: int, step: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([derive_seed(cfg.seed, "sampler") & 0xFFFFFFFF,
                                  epoch, step, slot])


def _accumulate(state: TrainState, grad: DetectorParams) -> None:
    state.grad_sum = grad if state.grad_sum is None else state.grad_sum + grad
    state.n_accum += 1


def train_step(state: TrainState, image_id: int, slot: int = 0) -> TrainState:
    """One image of a batch; the gradient is accumulated, not applied."""
    cfg = state.config
    image = state.dataset.image(image_id)
    proposals = state.proposals[image_id]
    if image_id not in state.weak_labels:
        # full branch: the loss is defined on proposals, detections are not needed
        loss, grad = loss_and_grad(state.params, image, proposals, image.gt, cfg.lam,
                                   gt_arrays=image.gt_arrays())
        state.full_losses.append(loss.total)
    else:
        classes = state.weak_labels[image_id]
        table = state.tables[image_id]
        rng = _slot_rng(cfg, state.epoch, state.step, slot)
        picks = sample_indices(table, classes, cfg.sampler, rng)
        idx = np.array([p[0] for p in picks], dtype=int)
        pseudo = (proposals.boxes[idx], np.array([p[1] for p in picks], dtype=int))
        dets, _ = detect(state.params, image, pseudo, proposals, cfg.max_detections)
        state.tables[image_id] = propagate_scores(table, proposals, dets, cfg.propagation)
        loss, grad = loss_and_grad(state.params, image, proposals, (), cfg.lam,
                                   gt_arrays=pseudo)
        state.weak_losses.append(loss.total)
    if not math.isfinite(loss.total):
        raise TrainingError(state.epoch, f"non-finite loss on image {image_id}")
    _accumulate(state, grad)
    return state


def _apply_batch(state: TrainState, lr: float) -> None:
    cfg = state.config
    if state.n_accum == 0:
        return
    # batch gradient is the sum of the per-image gradients
    state.params, state.velocity = sgd_step(state.params, state.grad_sum, state.velocity, lr,
                                            cfg.momentum, cfg.weight_decay)
    state.grad_sum, state.n_accum = None, 0
    if not state.params.is_finite():
        raise TrainingError(state.epoch, "parameters became non-finite")


def evaluate(params: DetectorParams, dataset: Dataset, bank: ProposalBank,
             images: Optional[Sequence[SyntheticImage]] = None,
             max_detections: int = 30) -> tuple[APResult, dict[int, DetectionSet]]:
    images = dataset.test_images if images is None else images
    dets, gt = {}, {}
    for im in images:
        dets[im.image_id], _ = detect(params, im, None, bank[im.image_id], max_detections)
        gt[im.image_id] = im.gt_arrays()
    return ap50(dets, gt, dataset.n_classes), dets


def _mean_entropy(state: TrainState) -> dict[int, float]:
    return {i: table_entropy(state.tables[i], state.weak_labels[i], state.config.sampler)
            for i in state.weak_labels}


def init_state(config: TrainConfig, dataset: Dataset, split: DatasetSplit,
               bank: Optional[ProposalBank] = None,
               warnings: Optional[list[str]] = None) -> tuple[TrainState, DatasetSplit]:
    """Build the training state and the effective split (weak images without labels dropped)."""
    bank = bank or ProposalBank(dataset, config.n_proposals)
    warnings = warnings if warnings is not None else []
    weak_labels: dict[int, frozenset] = {}
    proposals: dict[int, ProposalSet] = {}
    tables: dict[int, ScoreTable] = {}
    weak_pool = []
    if config.use_weak:
        skipped = 0
        for i in split.weak_pool:
            classes = dataset.weak_classes(i)
            if not classes:
                skipped += 1
                continue
            weak_pool.append(i)
            weak_labels[i] = classes
            ps = bank[i]
            if config.cam_filter:
                ps = filter_proposals_cam(ps, dataset.image(i), sorted(classes),
                                          config.cam_rho, config.cam_fp_rate, warnings=warnings)
            proposals[i] = ps
            tables[i] = ScoreTable.zeros(i, len(ps), dataset.n_classes)
        if skipped:
            msg = f"skipped {skipped} weak images with empty label sets"
            log.warning(msg)
            warnings.append(msg)
    for i in split.full_pool:
        proposals[i] = bank[i]
    eff = DatasetSplit(tuple(split.full_pool), tuple(weak_pool), split.split_seed)
    state = TrainState(config, dataset, DetectorParams.zeros(dataset.n_classes), None,
                       tables, proposals, weak_labels)
    return state, eff


def train(config: TrainConfig, dataset: Dataset, split: DatasetSplit,
          bank: Optional[ProposalBank] = None) -> tuple[DetectorParams, RunHistory]:
    """Run the full schedule and evaluate test mAP50 after every epoch.

    An epoch is ``ceil(n / batch_size)`` batches where ``n`` counts the
    training images in use (full pool plus, when enabled, the weak pool).
    """
    bank = bank or ProposalBank(dataset, config.n_proposals)
    history = RunHistory()
    state, eff = init_state(config, dataset, split, bank, history.warnings)
    n_images = len(eff.full_pool) + len(eff.weak_pool)
    if n_images == 0:
        raise ValueError("no training images")
    r, msg = effective_ratio(len(eff.full_pool), len(eff.weak_pool), config.ratio)
    if msg:
        log.warning(msg)
        history.warnings.append(msg)
    n_batches = math.ceil(n_images / config.batch_size)
    history.proposal_counts = {i: len(state.proposals[i]) for i in eff.weak_pool}
    history.entropy_initial = _mean_entropy(state)
    batch_seed = derive_seed(config.seed, "batches") & 0xFFFFFFFF

    for epoch in range(1, config.epochs + 1):
        state.epoch = epoch
        lr = learning_rate(config, epoch)
        entropies = _mean_entropy(state)
        state.full_losses, state.weak_losses = [], []
        for b in range(n_batches):
            state.step = b
            rng = np.random.default_rng([batch_seed, epoch, b])
            batch = mixed_batch_sampler(eff, r, config.batch_size, rng)
            for slot, image_id in enumerate(batch):
                train_step(state, image_id, slot)
            _apply_batch(state, lr)
        result, _ = evaluate(state.params, dataset, bank, max_detections=config.max_detections)
        history.records.append(EpochRecord(
            epoch=epoch, lr=lr,
            full_loss=float(np.mean(state.full_losses)) if state.full_losses else float("nan"),
            weak_loss=float(np.mean(state.weak_losses)) if state.weak_losses else float("nan"),
            map50=result.map50,
            mean_entropy=float(np.mean(list(entropies.values()))) if entropies else float("nan"),
            per_class_ap=result.per_class,
            n_full=len(state.full_losses), n_weak=len(state.weak_losses)))
    history.entropy_final = _mean_entropy(state)
    history.tables = state.tables
    history.weak_proposals = {i: state.proposals[i] for i in eff.weak_pool}
    return state.params, history

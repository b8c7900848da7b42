"""Deterministic synthetic detection benchmark.

Scenes are small grids holding 1-4 non-overlapping rectangular objects. A box
is described by mask-coverage features rather than pixels: the fraction of
the box covered by each class, its normalised size, and how much of the best
matching object it contains. Everything here is a pure function of seeds.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .geometry import Box, LabeledBox, area_array, intersection_array, iou_array

CAM_CELLS = 8

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class AbsentClassError(ValueError):
    """Raised when a class-specific query names a class the image does not contain."""


def derive_seed(root: int, *names: Union[str, int]) -> int:
    """Stable 63-bit sub-seed from a root seed and a path of names."""
    key = [int(root) & 0xFFFFFFFF, (int(root) >> 32) & 0xFFFFFFFF]
    for n in names:
        key.append(zlib.crc32(str(n).encode()) if isinstance(n, str) else int(n) & 0xFFFFFFFF)
    state = np.random.SeedSequence(key).generate_state(1, dtype=np.uint64)[0]
    return int(state & np.uint64(0x7FFFFFFFFFFFFFFF))


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _hashed_normals(seed: int, boxes: np.ndarray, n: int) -> np.ndarray:
    """Standard normals keyed on ``(seed, box coordinates)``, shape ``(N, n)``."""
    q = np.round(boxes * 65536.0).astype(np.int64).view(np.uint64)
    h = np.full(len(boxes), np.uint64(seed & 0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    for j in range(4):
        h = _splitmix64(h ^ q[:, j])
    k = np.arange(n, dtype=np.uint64)
    u1 = _splitmix64(h[:, None] ^ (np.uint64(2) * k + np.uint64(1))[None])
    u2 = _splitmix64(h[:, None] ^ (np.uint64(2) * k + np.uint64(2))[None])
    scale = 2.0 ** -53
    a = 1.0 - (u1 >> np.uint64(11)).astype(float) * scale
    b = (u2 >> np.uint64(11)).astype(float) * scale
    return np.sqrt(-2.0 * np.log(a)) * np.cos(2.0 * np.pi * b)


@dataclass(frozen=True)
class WorldConfig:
    grid: int = 64
    n_classes: int = 5
    noise_sigma: float = 0.05
    min_objects: int = 1
    max_objects: int = 4
    min_side: int = 6
    max_side: int = 30


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    box: Box
    appearance_seed: int


@dataclass(frozen=True)
class SceneSpec:
    grid_size: int
    n_classes: int
    objects: tuple[SceneObject, ...]
    noise_sigma: float


@dataclass(frozen=True)
class Full:
    boxes: tuple[LabeledBox, ...]
    level = "full"


@dataclass(frozen=True)
class Weak:
    classes: frozenset
    level = "weak"


@dataclass(frozen=True)
class Unlabeled:
    level = "none"


Annotation = Union[Full, Weak, Unlabeled]


@dataclass(frozen=True)
class ProposalSet:
    image_id: int
    boxes: np.ndarray

    def __post_init__(self):
        arr = np.array(self.boxes, dtype=float).reshape(-1, 4)
        arr.setflags(write=False)
        object.__setattr__(self, "boxes", arr)

    def __len__(self) -> int:
        return len(self.boxes)

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "boxes": self.boxes.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "ProposalSet":
        return cls(int(d["image_id"]), np.array(d["boxes"], dtype=float))


@dataclass(frozen=True)
class DatasetSplit:
    full_pool: tuple[int, ...]
    weak_pool: tuple[int, ...]
    split_seed: int


@dataclass(eq=False)
class SyntheticImage:
    spec: SceneSpec
    image_id: int
    rng_seed: int
    _features: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self) -> int:
        return self.spec.grid_size

    @property
    def classes(self) -> frozenset:
        return frozenset(o.class_id for o in self.spec.objects)

    @property
    def gt(self) -> tuple[LabeledBox, ...]:
        return tuple(LabeledBox(o.box, o.class_id) for o in self.spec.objects)

    def gt_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        boxes = np.array([o.box.as_list() for o in self.spec.objects], dtype=float)
        return boxes.reshape(-1, 4), np.array([o.class_id for o in self.spec.objects], dtype=int)

    def class_mask(self, class_id: int) -> np.ndarray:
        """Boolean ``(grid, grid)`` mask, row index = y, of class ``class_id``."""
        m = np.zeros((self.grid, self.grid), dtype=bool)
        for o in self.spec.objects:
            if o.class_id == class_id:
                b = o.box
                m[int(b.y0):int(b.y1), int(b.x0):int(b.x1)] = True
        return m

    def features(self, boxes: np.ndarray) -> np.ndarray:
        """Cached :func:`box_features_array`; the result must not be mutated."""
        boxes = np.asarray(boxes, dtype=float)
        key = boxes.tobytes()
        feats = self._features.get(key)
        if feats is None:
            feats = box_features_array(self, boxes)
            feats.setflags(write=False)
            self._features[key] = feats
        return feats


@dataclass(eq=False)
class Dataset:
    config: WorldConfig
    seed: int
    images: list[SyntheticImage]
    test_images: list[SyntheticImage]
    annotations: dict[int, Annotation] = field(default_factory=dict)

    @property
    def grid(self) -> int:
        return self.config.grid

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    def image(self, image_id: int) -> SyntheticImage:
        return self._index()[image_id]

    def _index(self) -> dict[int, SyntheticImage]:
        idx = self.__dict__.get("_by_id")
        if idx is None:
            idx = {im.image_id: im for im in self.images + self.test_images}
            self.__dict__["_by_id"] = idx
        return idx

    def annotation(self, image_id: int) -> Annotation:
        ann = self.annotations.get(image_id)
        if ann is None:
            return Full(self.image(image_id).gt)
        return ann

    def weak_classes(self, image_id: int) -> Optional[frozenset]:
        """Image-level label set for the weak branch; None when unlabeled."""
        ann = self.annotation(image_id)
        if isinstance(ann, Unlabeled):
            return None
        if isinstance(ann, Weak):
            return frozenset(ann.classes)
        return self.image(image_id).classes

    def with_annotations(self, annotations: dict[int, Annotation]) -> "Dataset":
        merged = dict(self.annotations)
        merged.update(annotations)
        return Dataset(self.config, self.seed, self.images, self.test_images, merged)

    def to_json(self) -> dict:
        def encode(im: SyntheticImage, ann: str) -> dict:
            return {
                "id": im.image_id,
                "seed": im.rng_seed,
                "objects": [{"class": o.class_id, "box": o.box.as_list(),
                             "appearance_seed": o.appearance_seed} for o in im.spec.objects],
                "annotation": ann,
            }
        out = {
            "grid": self.grid,
            "classes": self.n_classes,
            "noise_sigma": self.config.noise_sigma,
            "seed": self.seed,
            "images": [],
            "test_images": [encode(im, "full") for im in self.test_images],
        }
        for im in self.images:
            ann = self.annotation(im.image_id)
            d = encode(im, ann.level)
            if isinstance(ann, Weak):
                d["weak_classes"] = sorted(int(c) for c in ann.classes)
            out["images"].append(d)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_json(cls, d: dict) -> "Dataset":
        cfg = WorldConfig(grid=int(d["grid"]), n_classes=int(d["classes"]),
                          noise_sigma=float(d.get("noise_sigma", WorldConfig.noise_sigma)))

        def decode(e: dict) -> SyntheticImage:
            objs = tuple(SceneObject(int(o["class"]), Box(*map(float, o["box"])),
                                     int(o.get("appearance_seed", 0))) for o in e["objects"])
            spec = SceneSpec(cfg.grid, cfg.n_classes, objs, cfg.noise_sigma)
            return SyntheticImage(spec, int(e["id"]), int(e["seed"]))

        images = [decode(e) for e in d["images"]]
        test = [decode(e) for e in d.get("test_images", [])]
        anns: dict[int, Annotation] = {}
        for e, im in zip(d["images"], images):
            level = e.get("annotation", "full")
            if level == "weak":
                classes = e.get("weak_classes", sorted(im.classes))
                anns[im.image_id] = Weak(frozenset(int(c) for c in classes))
            elif level == "none":
                anns[im.image_id] = Unlabeled()
        return cls(cfg, int(d.get("seed", 0)), images, test, anns)

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_json(json.loads(Path(path).read_text()))


def _generate_scene(rng: np.random.Generator, cfg: WorldConfig) -> list[SceneObject]:
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed: list[SceneObject] = []
    attempts = 0
    while len(placed) < n_obj and attempts < 200:
        attempts += 1
        w = int(rng.integers(cfg.min_side, cfg.max_side + 1))
        h = int(rng.integers(cfg.min_side, cfg.max_side + 1))
        x0 = int(rng.integers(0, cfg.grid - w + 1))
        y0 = int(rng.integers(0, cfg.grid - h + 1))
        box = Box(x0, y0, x0 + w, y0 + h)
        if placed:
            others = np.array([o.box.as_list() for o in placed])
            if intersection_array(box.as_array()[None], others).max() > 0:
                continue
        placed.append(SceneObject(int(rng.integers(cfg.n_classes)), box,
                                  int(rng.integers(2 ** 31))))
    return placed


def _generate_images(n: int, cfg: WorldConfig, seed: int, id_offset: int) -> list[SyntheticImage]:
    images = []
    for i in range(n):
        image_id = id_offset + i
        image_seed = derive_seed(seed, "image", image_id)
        objects = _generate_scene(np.random.default_rng(image_seed), cfg)
        spec = SceneSpec(cfg.grid, cfg.n_classes, tuple(objects), cfg.noise_sigma)
        images.append(SyntheticImage(spec, image_id, image_seed))
    return images


def generate_dataset(n_images: int, config: Optional[WorldConfig] = None, seed: int = 0,
                     n_test: int = 0) -> Dataset:
    """Generate ``n_images`` training scenes plus ``n_test`` held-out scenes.

    Test ids start at ``n_images`` so the two lists never collide.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    cfg = config or WorldConfig()
    train = _generate_images(n_images, cfg, derive_seed(seed, "train"), 0)
    test = _generate_images(n_test, cfg, derive_seed(seed, "test"), n_images)
    return Dataset(cfg, seed, train, test)


def _jitter_box(rng: np.random.Generator, box: np.ndarray, amount: float) -> np.ndarray:
    w, h = box[2] - box[0], box[3] - box[1]
    cx = 0.5 * (box[0] + box[2]) + rng.uniform(-amount, amount) * w
    cy = 0.5 * (box[1] + box[3]) + rng.uniform(-amount, amount) * h
    w = w * (1.0 + rng.uniform(-amount, amount))
    h = h * (1.0 + rng.uniform(-amount, amount))
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def _clip_boxes(boxes: np.ndarray, grid: int) -> np.ndarray:
    out = np.clip(boxes, 0.0, float(grid))
    # keep at least one unit on each side after clipping
    out[:, 2] = np.maximum(out[:, 2], np.minimum(out[:, 0] + 1.0, grid))
    out[:, 0] = np.minimum(out[:, 0], out[:, 2] - 1.0)
    out[:, 3] = np.maximum(out[:, 3], np.minimum(out[:, 1] + 1.0, grid))
    out[:, 1] = np.minimum(out[:, 1], out[:, 3] - 1.0)
    return out


def generate_proposals(image: SyntheticImage, n_proposals: int = 300, seed: int = 0,
                       jitter_fraction: float = 0.3, jitter: float = 0.3,
                       min_side: float = 4.0, max_side: Optional[float] = None) -> ProposalSet:
    """Selective-search stand-in: uniform random boxes mixed with jittered GT copies.

    A ``jitter_fraction`` share of the boxes are GT copies perturbed by up to
    ``jitter`` of the object size in position and extent, cycling over the
    objects. Every object is guaranteed a proposal at IoU >= 0.5.
    """
    if n_proposals < 50:
        raise ValueError("n_proposals must be >= 50")
    grid = image.grid
    max_side = float(max_side if max_side is not None else 0.625 * grid)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, image.rng_seed & 0xFFFFFFFF,
                                 image.rng_seed >> 32])
    gt, _ = image.gt_arrays()
    n_jit = int(round(jitter_fraction * n_proposals)) if len(gt) else 0
    n_uni = n_proposals - n_jit

    w = rng.uniform(min_side, max_side, n_uni)
    h = rng.uniform(min_side, max_side, n_uni)
    x0 = rng.uniform(0.0, grid - w)
    y0 = rng.uniform(0.0, grid - h)
    uniform = np.stack([x0, y0, x0 + w, y0 + h], axis=1)

    jittered = np.array([_jitter_box(rng, gt[i % len(gt)], jitter) for i in range(n_jit)])
    jittered = _clip_boxes(jittered.reshape(-1, 4), grid)
    for j, g in enumerate(gt):
        if n_jit == 0:
            break
        own = np.arange(j, n_jit, len(gt))
        if own.size and iou_array(g[None], jittered[own]).max() >= 0.5:
            continue
        slot = own[0] if own.size else j % n_jit
        cand = jittered[slot]
        while iou_array(g[None], cand[None])[0, 0] < 0.5:
            cand = _clip_boxes(_jitter_box(rng, g, jitter / 2)[None], grid)[0]
        jittered[slot] = cand

    boxes = np.empty((n_proposals, 4))
    order = rng.permutation(n_proposals)
    boxes[order[:n_uni]] = uniform
    boxes[order[n_uni:]] = jittered
    return ProposalSet(image.image_id, boxes)


def feature_dim(n_classes: int) -> int:
    return n_classes + 3


def box_features_array(image: SyntheticImage, boxes: np.ndarray, noise: bool = True) -> np.ndarray:
    """Features for ``(N, 4)`` boxes, shape ``(N, C + 3)``.

    Columns are per-class coverage ``|box ∩ mask_c| / |box|``, width / grid,
    height / grid and completeness ``max_o |box ∩ o| / |o|``. Objects never
    overlap, so per-class coverage is a sum of rectangle intersections.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    spec = image.spec
    n, C = len(boxes), spec.n_classes
    feats = np.zeros((n, C + 3))
    area = area_array(boxes)
    gt, classes = image.gt_arrays()
    if len(gt):
        inter = intersection_array(boxes, gt)
        for c in range(C):
            sel = classes == c
            if sel.any():
                feats[:, c] = inter[:, sel].sum(axis=1) / area
        feats[:, C + 2] = (inter / area_array(gt)[None]).max(axis=1)
    feats[:, C] = (boxes[:, 2] - boxes[:, 0]) / spec.grid_size
    feats[:, C + 1] = (boxes[:, 3] - boxes[:, 1]) / spec.grid_size
    if noise and spec.noise_sigma > 0:
        feats += spec.noise_sigma * _hashed_normals(image.rng_seed, boxes, C + 3)
    return feats


def box_features(image: SyntheticImage, box: Box, noise: bool = True) -> np.ndarray:
    return box_features_array(image, box.as_array()[None], noise=noise)[0]


def _object_cells(image: SyntheticImage, class_id: int) -> np.ndarray:
    cell = image.grid / CAM_CELLS
    cells = np.zeros((CAM_CELLS, CAM_CELLS), dtype=bool)
    for o in image.spec.objects:
        if o.class_id != class_id:
            continue
        b = o.box
        r0, r1 = int(math.floor(b.y0 / cell)), int(math.ceil(b.y1 / cell))
        c0, c1 = int(math.floor(b.x0 / cell)), int(math.ceil(b.x1 / cell))
        cells[r0:r1, c0:c1] = True
    return cells


def cam_mask(image: SyntheticImage, class_id: int, fp_rate: float = 0.1,
             seed: int = 0) -> np.ndarray:
    """Oracle class activation map on an 8x8 cell grid (row index = y).

    Cells touching a class object are active; every other cell fires
    spuriously with probability ``fp_rate``.
    """
    if class_id not in image.classes:
        raise AbsentClassError(f"class {class_id} not in image {image.image_id}")
    cells = _object_cells(image, class_id)
    rng = np.random.default_rng(derive_seed(image.rng_seed, "cam", seed, class_id))
    spurious = rng.random((CAM_CELLS, CAM_CELLS)) < fp_rate
    return cells | spurious


def spurious_cam(image: SyntheticImage, class_id: int, fp_rate: float, seed: int = 0) -> np.ndarray:
    """Activation of an imperfect classifier for a class it wrongly believes present.

    Returns at least one active cell; cells fire independently at ``fp_rate``.
    """
    rng = np.random.default_rng(derive_seed(image.rng_seed, "spurious-cam", seed, class_id))
    cells = rng.random((CAM_CELLS, CAM_CELLS)) < fp_rate
    if not cells.any():
        cells[rng.integers(CAM_CELLS), rng.integers(CAM_CELLS)] = True
    return cells


def cam_to_grid(cells: np.ndarray, grid: int) -> np.ndarray:
    """Upsample an 8x8 cell mask to a ``(grid, grid)`` boolean raster."""
    rep = grid // cells.shape[0]
    return np.kron(cells, np.ones((rep, rep), dtype=bool)).astype(bool)


def split_dataset(dataset: Dataset, fraction_full: float, seed: int = 0) -> DatasetSplit:
    if not 0.0 <= fraction_full <= 1.0:
        raise ValueError("fraction_full must lie in [0, 1]")
    ids = np.array([im.image_id for im in dataset.images])
    rng = np.random.default_rng(derive_seed(seed, "split"))
    perm = ids[rng.permutation(len(ids))]
    n_full = int(math.floor(fraction_full * len(ids) + 0.5))
    return DatasetSplit(tuple(sorted(int(i) for i in perm[:n_full])),
                        tuple(sorted(int(i) for i in perm[n_full:])), seed)


def annotate(dataset: Dataset, split: DatasetSplit, weak_level: str = "weak") -> Dataset:
    """Annotation view of ``split``: full pool keeps boxes, weak pool gets labels or nothing."""
    anns: dict[int, Annotation] = {}
    for i in split.full_pool:
        anns[i] = Full(dataset.image(i).gt)
    for i in split.weak_pool:
        anns[i] = Weak(dataset.image(i).classes) if weak_level == "weak" else Unlabeled()
    return dataset.with_annotations(anns)


def save_proposals(proposals: Sequence[ProposalSet], path) -> None:
    Path(path).write_text(json.dumps([p.to_json() for p in proposals]))


def load_proposals(path) -> list[ProposalSet]:
    return [ProposalSet.from_json(d) for d in json.loads(Path(path).read_text())]

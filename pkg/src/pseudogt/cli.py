"""Command line entry point: dataset generation, training runs and ablations.

Every subcommand reads one flat YAML config (``--config``), applies
``--set key=value`` overrides and writes its artifacts plus a
``manifest.yaml`` under ``--out``. The manifest is itself a valid config, so
``pseudogt <cmd> --config <out>/manifest.yaml --out <dir2>`` repeats the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import yaml

from .detector import DetectorParams, score_proposals
from .evaluation import heatmap, tide_errors, write_ap_csv, write_errors_csv, write_pgm
from .geometry import iou_array
from .pseudo_gt import PropagationConfig, SamplerConfig, read_score_tables, write_score_tables
from .synthworld import (
    Dataset,
    DatasetSplit,
    WorldConfig,
    annotate,
    derive_seed,
    generate_dataset,
    load_proposals,
    save_proposals,
    split_dataset,
)
from .trainer import (
    ProposalBank,
    RunHistory,
    TrainConfig,
    TrainingError,
    evaluate,
    infer_weak_labels,
    train,
)

log = logging.getLogger("pseudogt")

COMMANDS = ("gen", "train", "ablate-propagation", "ablate-ratio", "ablate-cam",
            "curve-labels", "eval")

DEFAULTS: dict[str, Any] = {
    "command": None,
    "seed": 0,
    "seeds": [0, 1, 2, 3, 4],
    # world
    "n_images": 400,
    "n_test": 200,
    "grid": 64,
    "n_classes": 5,
    "noise_sigma": 0.05,
    "min_objects": 1,
    "max_objects": 4,
    "min_side": 6,
    "max_side": 30,
    "n_proposals": 300,
    "dataset": None,
    "proposals": None,
    # split and weak labels
    "split": 0.1,
    "weak_labels": "true",
    "label_fp_rate": 0.1,
    "label_miss_rate": 0.05,
    "label_threshold": 0.0,
    # training
    "epochs": 20,
    "batch_size": 8,
    "lr": 1e-2,
    "lr_decay_epochs": [5, 10],
    "lr_decay_factor": 10.0,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "ratio": 0.7,
    "use_weak": True,
    "lam": 1.0,
    "temperature": 2.5,
    "k": 5,
    "score_space": "logit",
    "propagation": "max_overlap_thresholded",
    "prop_threshold": 0.3,
    "cam_filter": False,
    "cam_rho": 0.1,
    "cam_fp_rate": 0.1,
    "max_detections": 30,
    # ablation grids
    "strategies": ["all_boxes", "max_overlap", "max_overlap_thresholded"],
    "ratios": ["off", 0.5, 0.7, 0.9],
    "cam_splits": [0.0, 0.05, 0.1, 0.2],
    "curve_splits": [0.05, 0.1, 0.2],
    # eval
    "checkpoint": None,
    "tables": None,
    "heatmap_images": 4,
}

PATH_KEYS = ("dataset", "proposals", "checkpoint", "tables")
WORLD_KEYS = ("n_images", "n_test", "grid", "n_classes", "noise_sigma", "min_objects",
              "max_objects", "min_side", "max_side", "dataset")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- config

def _norm_ratio(value: Any) -> Any:
    # YAML reads a bare `off` as false
    if value is None or value is False or value in ("off", "none"):
        return "off"
    if value == "full_only":
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"ratio: expected a number, 'off' or 'full_only', got {value!r}")
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"ratio: {value} outside [0, 1]")
    return float(value)


def _check_type(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if key == "ratio":
        return _norm_ratio(value)
    if key == "weak_labels" and value is True:
        return "true"
    if key == "ratios":
        if not isinstance(value, list):
            raise ConfigError(f"ratios: expected a list, got {value!r}")
        return [_norm_ratio(v) for v in value]
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def resolve_config(raw: Optional[dict] = None, overrides: Sequence[str] = (),
                   base_dir: Optional[Path] = None) -> dict:
    """Merge defaults, file values and ``key=value`` overrides (overrides win)."""
    cfg = dict(DEFAULTS)
    raw = dict(raw or {})
    raw.pop("derived", None)
    for key, value in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _check_type(key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _check_type(key, yaml.safe_load(text))
    for key in PATH_KEYS:
        if cfg[key] is not None:
            p = Path(cfg[key])
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            p = p.resolve()
            if not p.exists():
                raise ConfigError(f"{key}: file {p} does not exist")
            cfg[key] = str(p)
    if cfg["weak_labels"] not in ("true", "inferred"):
        raise ConfigError(f"weak_labels: expected 'true' or 'inferred', got {cfg['weak_labels']!r}")
    if not 0.0 <= cfg["split"] <= 1.0:
        raise ConfigError(f"split: {cfg['split']} outside [0, 1]")
    try:
        train_config(cfg)
        world_config(cfg)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> dict:
    raw, base = {}, None
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        raw = yaml.safe_load(p.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a flat mapping")
        base = p.parent
    return resolve_config(raw, overrides, base)


def world_config(cfg: dict) -> WorldConfig:
    return WorldConfig(grid=cfg["grid"], n_classes=cfg["n_classes"],
                       noise_sigma=cfg["noise_sigma"], min_objects=cfg["min_objects"],
                       max_objects=cfg["max_objects"], min_side=cfg["min_side"],
                       max_side=cfg["max_side"])


def train_config(cfg: dict, seed: Optional[int] = None) -> TrainConfig:
    ratio = cfg["ratio"]
    use_weak = cfg["use_weak"] and ratio != "full_only"
    if ratio == "off":
        ratio = None
    elif ratio == "full_only":
        ratio = 1.0
    root = cfg["seed"] if seed is None else seed
    return TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        lr_decay_epochs=tuple(cfg["lr_decay_epochs"]), lr_decay_factor=cfg["lr_decay_factor"],
        momentum=cfg["momentum"], weight_decay=cfg["weight_decay"], ratio=ratio,
        use_weak=use_weak, lam=cfg["lam"],
        sampler=SamplerConfig(cfg["temperature"], cfg["k"], cfg["score_space"]),
        propagation=PropagationConfig(cfg["propagation"], cfg["prop_threshold"]),
        cam_filter=cfg["cam_filter"], cam_rho=cfg["cam_rho"], cam_fp_rate=cfg["cam_fp_rate"],
        max_detections=cfg["max_detections"], n_proposals=cfg["n_proposals"],
        seed=derive_seed(root, "train"))


def derived_seeds(seed: int) -> dict[str, int]:
    return {name: derive_seed(seed, name) for name in ("dataset", "split", "train", "labels")}


def write_manifest(cfg: dict, command: str, out: Path, seeds: Sequence[int]) -> None:
    doc = dict(cfg)
    doc["command"] = command
    doc["derived"] = {int(s): derived_seeds(s) for s in seeds}
    (out / "manifest.yaml").write_text(yaml.safe_dump(doc, sort_keys=True))


# --------------------------------------------------------------------------- runs

@dataclass
class World:
    dataset: Dataset
    bank: ProposalBank


@dataclass
class ArmResult:
    history: RunHistory
    params: DetectorParams
    dataset: Dataset
    split: DatasetSplit
    bank: ProposalBank


_WORLDS: dict[str, World] = {}
_RUNS: dict[str, ArmResult] = {}


def _key(cfg: dict, keys: Sequence[str], *extra) -> str:
    return json.dumps([[k, cfg[k]] for k in keys] + list(extra), sort_keys=True)


def build_world(cfg: dict, seed: int) -> World:
    """Dataset and proposals for one root seed; shared by every arm using that seed."""
    key = _key(cfg, WORLD_KEYS + ("proposals", "n_proposals"), seed)
    if key not in _WORLDS:
        if cfg["dataset"] is not None:
            dataset = Dataset.load(cfg["dataset"])
        else:
            dataset = generate_dataset(cfg["n_images"], world_config(cfg),
                                       seed=derive_seed(seed, "dataset"), n_test=cfg["n_test"])
        preset = None
        if cfg["proposals"] is not None:
            preset = {p.image_id: p for p in load_proposals(cfg["proposals"])}
        _WORLDS[key] = World(dataset, ProposalBank(dataset, cfg["n_proposals"], preset))
    return _WORLDS[key]


def run_arm(cfg: dict, seed: int) -> ArmResult:
    """Train one configuration for one root seed.

    Runs are pure functions of the resolved config and seed, so results are
    memoized for the lifetime of the process.
    """
    key = _key(cfg, sorted(k for k in DEFAULTS if k not in ("command", "seeds", "strategies",
                                                             "ratios", "cam_splits",
                                                             "curve_splits", "seed")), seed)
    if key in _RUNS:
        return _RUNS[key]
    world = build_world(cfg, seed)
    split = split_dataset(world.dataset, cfg["split"], seed=derive_seed(seed, "split"))
    if cfg["weak_labels"] == "inferred":
        labelled = infer_weak_labels(annotate(world.dataset, split, "none"),
                                     threshold=cfg["label_threshold"],
                                     fp_rate=cfg["label_fp_rate"],
                                     miss_rate=cfg["label_miss_rate"],
                                     seed=derive_seed(seed, "labels"))
    else:
        labelled = annotate(world.dataset, split, "weak")
    params, history = train(train_config(cfg, seed), labelled, split, world.bank)
    result = ArmResult(history, params, labelled, split, world.bank)
    _RUNS[key] = result
    return result


def clear_cache() -> None:
    _WORLDS.clear()
    _RUNS.clear()


def proposal_recall(dataset: Dataset, proposals: dict, image_ids: Sequence[int]) -> float:
    """Fraction of GT objects with some proposal at IoU >= 0.5."""
    hit = total = 0
    for i in image_ids:
        boxes, _ = dataset.image(i).gt_arrays()
        ov = iou_array(boxes, proposals[i].boxes)
        hit += int((ov.max(axis=1) >= 0.5).sum())
        total += len(boxes)
    return hit / total if total else float("nan")


def median(values: Sequence[float]) -> float:
    return float(statistics.median(values))


# --------------------------------------------------------------------------- outputs

def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _save_run(res: ArmResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    res.history.to_csv(out / "history.csv", res.dataset.n_classes)
    res.params.save(out / "params.json")
    if res.history.tables:
        write_score_tables(list(res.history.tables.values()), out / "score_tables.csv")


def _ablation(cfg: dict, out: Path, arms: Sequence[tuple[str, dict]],
              extra: Optional[Callable[[ArmResult], list]] = None,
              extra_header: Sequence[str] = ()) -> list[list]:
    """Run every arm for every seed; write per-seed rows plus per-arm medians."""
    rows = []
    per_arm: dict[str, list[list]] = {}
    for name, overrides in arms:
        arm_cfg = dict(cfg)
        arm_cfg.update(overrides)
        for seed in cfg["seeds"]:
            res = run_arm(arm_cfg, seed)
            _save_run(res, out / name / f"seed{seed}")
            vals = [res.history.final_map50] + (extra(res) if extra else [])
            rows.append([name, seed] + vals)
            per_arm.setdefault(name, []).append(vals)
    for name, _ in arms:
        cols = list(zip(*per_arm[name]))
        rows.append([name, "median"] + [median(c) for c in cols])
    _write_rows(out / "ablation.csv", ["arm", "seed", "map50"] + list(extra_header), rows)
    return rows


def read_medians(path) -> dict[str, dict[str, float]]:
    """Median rows of an ablation CSV keyed by arm name."""
    out = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["seed"] == "median":
                out[r["arm"]] = {k: float(v) for k, v in r.items() if k not in ("arm", "seed")}
    return out


# --------------------------------------------------------------------------- commands

def cmd_gen(cfg: dict, out: Path) -> None:
    world = build_world(cfg, cfg["seed"])
    world.dataset.save(out / "dataset.json")
    ids = [im.image_id for im in world.dataset.images + world.dataset.test_images]
    save_proposals([world.bank[i] for i in ids], out / "proposals.json")


def cmd_train(cfg: dict, out: Path) -> None:
    res = run_arm(cfg, cfg["seed"])
    res.dataset.save(out / "dataset.json")
    ids = [im.image_id for im in res.dataset.images + res.dataset.test_images]
    save_proposals([res.bank[i] for i in ids], out / "proposals.json")
    _save_run(res, out)
    result, dets = evaluate(res.params, res.dataset, res.bank,
                            max_detections=cfg["max_detections"])
    gt = {im.image_id: im.gt_arrays() for im in res.dataset.test_images}
    write_ap_csv({"train": result}, out / "ap.csv")
    write_errors_csv({"train": tide_errors(dets, gt)}, out / "errors.csv")
    for i in sorted(res.history.tables)[: cfg["heatmap_images"]]:
        table = res.history.tables[i]
        for c in sorted(res.dataset.weak_classes(i) or ()):
            grid = heatmap(table.scores, res.history.weak_proposals[i].boxes,
                           res.dataset.grid, c)
            write_pgm(grid, out / f"heatmap_img{i}_cls{c}.pgm")
    for w in res.history.warnings:
        log.warning(w)


def cmd_ablate_propagation(cfg: dict, out: Path) -> None:
    _ablation(cfg, out, [(s, {"propagation": s}) for s in cfg["strategies"]])


def _ratio_name(r) -> str:
    return r if isinstance(r, str) else f"r{r:g}"


def cmd_ablate_ratio(cfg: dict, out: Path) -> None:
    _ablation(cfg, out, [(_ratio_name(r), {"ratio": r}) for r in cfg["ratios"]])


def cmd_ablate_cam(cfg: dict, out: Path) -> None:
    def stats(res: ArmResult) -> list:
        weak = list(res.history.weak_proposals)
        counts = [res.history.proposal_counts[i] for i in weak]
        return [float(np.mean(counts)) if counts else float("nan"),
                proposal_recall(res.dataset, res.history.weak_proposals, weak)]

    arms = []
    for f in cfg["cam_splits"]:
        for on in (False, True):
            arms.append((f"split{f:g}_cam{'on' if on else 'off'}", {"split": f, "cam_filter": on}))
    _ablation(cfg, out, arms, stats, ["mean_proposals", "gt_recall"])


def cmd_curve_labels(cfg: dict, out: Path) -> None:
    arms = []
    for f in cfg["curve_splits"]:
        arms.append((f"split{f:g}_full_only", {"split": f, "ratio": "full_only"}))
        arms.append((f"split{f:g}_semi_weak", {"split": f}))
    rows = _ablation(cfg, out, arms)
    med = {r[0]: r[2] for r in rows if r[1] == "median"}
    gains = [[f"split{f:g}", med[f"split{f:g}_semi_weak"] - med[f"split{f:g}_full_only"]]
             for f in cfg["curve_splits"]]
    _write_rows(out / "gains.csv", ["split", "median_gain"], gains)


def cmd_eval(cfg: dict, out: Path) -> None:
    if cfg["checkpoint"] is None:
        raise ConfigError("checkpoint: eval needs a params checkpoint")
    params = DetectorParams.load(cfg["checkpoint"])
    world = build_world(cfg, cfg["seed"])
    result, dets = evaluate(params, world.dataset, world.bank,
                            max_detections=cfg["max_detections"])
    gt = {im.image_id: im.gt_arrays() for im in world.dataset.test_images}
    write_ap_csv({"eval": result}, out / "ap.csv")
    write_errors_csv({"eval": tide_errors(dets, gt)}, out / "errors.csv")
    if cfg["tables"] is not None:
        tables = read_score_tables(cfg["tables"])
        for i in sorted(tables)[: cfg["heatmap_images"]]:
            boxes = world.bank[i].boxes
            if len(boxes) != len(tables[i].scores):
                # tables written under CAM filtering index a filtered proposal set
                log.warning("score table for image %d does not match its proposals", i)
                continue
            for c in range(world.dataset.n_classes):
                write_pgm(heatmap(tables[i].scores, boxes, world.dataset.grid, c),
                          out / f"heatmap_img{i}_cls{c}.pgm")
    else:
        for im in world.dataset.test_images[: cfg["heatmap_images"]]:
            scores = score_proposals(params, im, world.bank[im.image_id])
            for c in sorted(im.classes):
                write_pgm(heatmap(scores, world.bank[im.image_id].boxes, world.dataset.grid, c),
                          out / f"heatmap_test{im.image_id}_cls{c}.pgm")


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "ablate-propagation": cmd_ablate_propagation,
    "ablate-ratio": cmd_ablate_ratio,
    "ablate-cam": cmd_ablate_cam,
    "curve-labels": cmd_curve_labels,
    "eval": cmd_eval,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pseudogt",
                                description="Semi-weakly supervised detection with pseudo-GT sampling.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out = Path(args.out).resolve()
    out.mkdir(parents=True, exist_ok=True)
    seeds = [cfg["seed"]] if args.command in ("gen", "train", "eval") else cfg["seeds"]
    write_manifest(cfg, args.command, out, seeds)
    try:
        HANDLERS[args.command](cfg, out)
    except TrainingError as e:
        print(f"run failed at epoch {e.epoch}: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        # ConfigError, or a value rejected by a constructor (e.g. n_proposals < 50)
        print(f"config error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

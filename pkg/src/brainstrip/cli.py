"""``brainstrip synth|train|segment|evaluate``.

Exit codes: 0 success, 1 invalid input or configuration, 2 I/O or file-format
failure, 3 numeric failure. Log verbosity comes from ``BRAINSTRIP_LOG_LEVEL``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ingest, metrics, pipeline
from .config import ConfigError, PipelineConfig, dump_config, load_config
from .core import GroupPartition, Subject

log = logging.getLogger("brainstrip")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
VOLUME_SUFFIX = "_volume.nii"
MASK_SUFFIX = "_mask.nii"


def subject_seed(seed: int, i: int) -> int:
    return seed * 1000 + i


# --- synth ---------------------------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig, out: Path, n: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    seeds = [subject_seed(cfg.seed, i) for i in range(n)]
    rows = []
    for i, s in enumerate(pipeline.phantom_subjects(seeds, cfg)):
        name = f"subject_{i:03d}"
        ingest.write_volume(out / f"{name}{VOLUME_SUFFIX}", s.volume)
        ingest.write_mask(out / f"{name}{MASK_SUFFIX}", s.mask)
        rows += [(name, z, int(g)) for z, g in enumerate(s.groups)]
    ingest.write_csv(out / "labels.csv", ["subject", "z", "group"], rows)
    log.info("wrote %d phantom subjects to %s", n, out)


# --- train ----------------------------------------------------------------------------------

def _read_labels(path: Path) -> dict[str, np.ndarray]:
    if not path.exists():
        return {}
    per: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            per.setdefault(row["subject"], []).append((int(row["z"]), int(row["group"])))
    return {k: np.array([g for _, g in sorted(v)], dtype=np.int8) for k, v in per.items()}


def load_training_subjects(data: Path) -> list[Subject]:
    vols = sorted(data.glob(f"*{VOLUME_SUFFIX}"))
    if not vols:
        raise ValueError(f"{data}: no *{VOLUME_SUFFIX} files")
    missing = [str(v.with_name(v.name[:-len(VOLUME_SUFFIX)] + MASK_SUFFIX)) for v in vols
               if not v.with_name(v.name[:-len(VOLUME_SUFFIX)] + MASK_SUFFIX).exists()]
    if missing:
        raise ValueError("missing ground-truth masks: " + ", ".join(missing))
    labels = _read_labels(data / "labels.csv")
    subjects = []
    for v in vols:
        name = v.name[:-len(VOLUME_SUFFIX)]
        groups = labels.get(name)
        if groups is not None:
            GroupPartition.from_labels(groups)
        subjects.append(Subject(name, ingest.read_volume(v),
                                ingest.read_mask(v.with_name(name + MASK_SUFFIX)), groups))
    return subjects


def cmd_train(cfg: PipelineConfig, data: Path, bundle_path: Path, logs_dir: Path | None) -> None:
    subjects = load_training_subjects(data)
    bundle, logs = pipeline.train_pipeline(subjects, cfg)
    bundle_path.parent.mkdir(parents=True, exist_ok=True)
    pipeline.save_bundle(bundle_path, bundle)
    logs_dir = logs_dir or bundle_path.parent
    logs_dir.mkdir(parents=True, exist_ok=True)
    ingest.write_csv(logs_dir / "cnn_loss.csv", ["epoch", "loss", "train_acc"], logs.cnn_history)
    ingest.write_csv(logs_dir / "crf_tuning.csv", ["trial", "w1", "sigma_alpha", "sigma_beta", "mean_dice"],
                     logs.crf_trials)
    (logs_dir / "train_summary.json").write_text(json.dumps({
        "subjects": [s.name for s in subjects],
        "svm_train_accuracy": list(logs.svm_accuracy),
        "rates": list(bundle.groups.rates.as_tuple()),
        "shape_modes": {str(g): m.t for g, m in bundle.shapes.items()},
        "crf": {k: getattr(bundle.crf, k) for k in ("w1", "w2", "sigma_alpha", "sigma_beta", "sigma_gamma")},
        "gp": {"ell": bundle.gp.ell, "sf2": bundle.gp.sf2, "sn2": bundle.gp.sn2},
    }, indent=1, sort_keys=True))
    log.info("bundle written to %s", bundle_path)


# --- segment --------------------------------------------------------------------------------

def _segment_one(args):
    bundle_path, vol_path, out_path, cfg = args
    bundle = pipeline.load_bundle(bundle_path)
    vol = ingest.read_volume(vol_path)
    mask, info = pipeline.segment_volume(bundle, vol, cfg)
    ingest.write_mask(out_path, mask, vol.spacing)
    return str(out_path), info.partition.ks


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (VOLUME_SUFFIX, ".nii"):
        if name.endswith(suffix):
            return name[:-len(suffix)]
    return path.stem


def cmd_segment(cfg: PipelineConfig, bundle_path: Path, volumes: list[Path], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    pipeline.load_bundle(bundle_path)  # fail early on a bad bundle
    jobs = [(bundle_path, v, out / f"{_stem(v)}{MASK_SUFFIX}", cfg) for v in volumes]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            results = list(ex.map(_segment_one, jobs))
    else:
        results = [_segment_one(j) for j in jobs]
    for path, ks in results:
        log.info("wrote %s (group boundaries %s)", path, ks)


# --- evaluate -------------------------------------------------------------------------------

def _mask_files(d: Path) -> dict[str, Path]:
    return {p.name[:-len(MASK_SUFFIX)]: p for p in sorted(d.glob(f"*{MASK_SUFFIX}"))}


def cmd_evaluate(pred_dir: Path, gt_dir: Path, mode: str, out: Path) -> None:
    pred, gt = _mask_files(pred_dir), _mask_files(gt_dir)
    orphans = sorted(set(pred) ^ set(gt))
    if orphans:
        raise ValueError("unpaired masks: " + ", ".join(orphans))
    if not pred:
        raise ValueError(f"no *{MASK_SUFFIX} files in {pred_dir}")
    rows, per_entity = [], []
    for name in sorted(pred):
        p, g = ingest.read_mask(pred[name]), ingest.read_mask(gt[name])
        if p.shape != g.shape:
            raise ValueError(f"{name}: shape {p.shape} vs reference {g.shape}")
        entities = [metrics.evaluate(p, g)] if mode == "3d" else metrics.evaluate_slices(p, g)
        for e in entities:
            per_entity.append(e)
            plane = "volume" if mode == "3d" else f"z={e['z']}"
            rows += [{"subject": name, "metric": m, "plane": plane, "value": e[m]} for m in metrics.METRICS]
    report = metrics.aggregate(per_entity)
    for m in metrics.METRICS:
        rows.append({"subject": "ALL", "metric": m, "plane": "mean", "value": report.mean[m]})
        rows.append({"subject": "ALL", "metric": m, "plane": "sd", "value": report.sd[m]})
    out.parent.mkdir(parents=True, exist_ok=True)
    ingest.write_report(out, rows)
    box = {m: metrics.boxplot_stats([e[m] for e in per_entity]) for m in metrics.METRICS}
    out.with_name(out.name + "_boxplot.json").write_text(json.dumps(box, indent=1, sort_keys=True))
    log.info("%s dice %.4f +- %.4f over %d entities", mode, report.mean["dice"], report.sd["dice"],
             len(per_entity))


# --- entry point ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value configuration file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--jobs", type=int, help="parallel subjects (segment)")
    p = argparse.ArgumentParser(prog="brainstrip", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="write phantom subjects")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("-n", "--subjects", type=int, help="number of subjects (default phantom.n_subjects)")
    t = sub.add_parser("train", parents=[common], help="train a model bundle")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--bundle", type=Path, required=True)
    t.add_argument("--logs", type=Path)
    g = sub.add_parser("segment", parents=[common], help="segment volumes")
    g.add_argument("--bundle", type=Path, required=True)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("volumes", type=Path, nargs="+")
    e = sub.add_parser("evaluate", parents=[common], help="score predicted masks")
    e.add_argument("--pred", type=Path, required=True)
    e.add_argument("--gt", type=Path, required=True)
    e.add_argument("--mode", choices=("2d", "3d"), default="3d")
    e.add_argument("--out", type=Path, required=True, help="report stem")
    sub.add_parser("config", parents=[common], help="print the effective configuration")
    return p


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.jobs is not None:
        over["jobs"] = args.jobs
    try:
        return replace(cfg, **over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def run(args) -> None:
    cfg = resolve_config(args)
    if args.command == "synth":
        cmd_synth(cfg, args.out, args.subjects or cfg.phantom.n_subjects)
    elif args.command == "train":
        cmd_train(cfg, args.data, args.bundle, args.logs)
    elif args.command == "segment":
        cmd_segment(cfg, args.bundle, args.volumes, args.out)
    elif args.command == "evaluate":
        cmd_evaluate(args.pred, args.gt, args.mode, args.out)
    elif args.command == "config":
        sys.stdout.write(dump_config(cfg))


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("BRAINSTRIP_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except (ingest.FormatError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ValueError, KeyError, RuntimeError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

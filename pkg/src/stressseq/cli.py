"""Command-line interface: synth / ingest / train / report.

Exit codes: 0 success, 1 I/O or data failure, 2 configuration or usage
error, 3 training aborted on a non-finite loss. Settings resolve as
flag > config file > pipeline default, and every training run freezes its
fully resolved configuration as config.json inside the run directory.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from . import report as report_mod
from .errors import ConfigError, DataError, TrainingAbort
from .ingest import scan_dataset, write_manifest
from .synthgen import SynthConfig, generate
from .trainer import TrainConfig, run_cv

WEIGHTS_ENV = "STRESSSEQ_WEIGHTS"

# TrainConfig fields that may come from the config file or flags.
_TRAIN_FIELDS = ("batch_size", "epochs", "lr", "seed", "k_folds",
                 "sequence_length", "lr_schedule", "decay_rate",
                 "decay_steps_multiplier", "grouping", "image_size",
                 "backbone", "hidden_units", "augment")


def make_run_id(seed: int, now=None) -> str:
    """Sortable UTC timestamp plus a short seed hash, e.g. 20240301T120000Z-1a2b3c4d."""
    stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime(now))
    digest = hashlib.sha256(str(seed).encode("ascii")).hexdigest()[:8]
    return f"{stamp}-{digest}"


@contextmanager
def _run_lock(out_dir: Path):
    """One run at a time per out_dir, enforced by an exclusive lock file."""
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"{out_dir} is locked by another run (remove {lock} if stale)")
    try:
        os.write(fd, f"{os.getpid()}\n".encode("ascii"))
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(loaded, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    allowed = set(_TRAIN_FIELDS) | {"pipeline"}
    unknown = sorted(set(loaded) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return loaded


def resolve_train_config(args) -> TrainConfig:
    """Merge pipeline defaults, config-file values, then explicit flags."""
    file_cfg = _load_config_file(args.config) if args.config else {}
    pipeline = args.pipeline or file_cfg.get("pipeline")
    if not pipeline:
        raise ConfigError("pipeline must be set via --pipeline or the config file")
    merged = {k: v for k, v in file_cfg.items() if k != "pipeline"}
    for name in _TRAIN_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    return TrainConfig.for_pipeline(pipeline, **merged)


def cmd_synth(args) -> int:
    if args.sequence_length is not None and args.dates < args.sequence_length:
        print(f"warning: {args.dates} dates cannot form length-"
              f"{args.sequence_length} sequences; sequencing will fail later",
              file=sys.stderr)
    try:
        cfg = SynthConfig(out_dir=Path(args.out), classes=args.classes,
                          boxes_per_class=args.boxes_per_class,
                          dates=args.dates, image_side=args.image_side,
                          seed=args.seed)
        summary = generate(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_ingest(args) -> int:
    expected = args.expected_classes.split(",") if args.expected_classes else None
    result = scan_dataset(args.data, expected_classes=expected)
    write_manifest(result.records, args.out,
                   skipped=result.skipped if result.skipped else None)
    print(f"{len(result.records)} records, {len(result.skipped)} skipped "
          f"-> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = args.weights or os.environ.get(WEIGHTS_ENV) or None

    with _run_lock(out_dir):
        run_id = args.run_id or make_run_id(cfg.seed)
        run_dir = out_dir / run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        resolved = {"run_id": run_id, "pipeline": cfg.pipeline,
                    "data_dir": str(data_dir), "out_dir": str(out_dir),
                    "weights": weights}
        resolved.update({k: getattr(cfg, k) for k in _TRAIN_FIELDS})
        with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
            json.dump(resolved, fh, indent=2, sort_keys=True)
            fh.write("\n")

        records = scan_dataset(data_dir).records
        report, run_dir = run_cv(records, cfg, out_dir, run_id,
                                 weights_path=weights)
        report_mod.render(report, run_dir)

    agg = report.aggregate()["accuracy"]
    print(f"run {run_id}: fold-mean accuracy "
          f"{agg['mean']:.4f} +/- {agg['std']:.4f} -> {run_dir}")
    return 0


def _read_baselines(path) -> list:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            return [tuple(row) for row in csv.reader(fh) if row]
    except FileNotFoundError:
        raise ConfigError(f"baselines file not found: {path}")


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    report_path = run_dir / "report.json"
    if not report_path.is_file():
        raise ConfigError(f"no report.json under {run_dir}")
    try:
        report = report_mod.RunReport.from_json(report_path.read_text(encoding="utf-8"))
    except DataError as exc:
        raise ConfigError(f"malformed {report_path}: {exc}")
    if args.baselines:
        report.comparison = _read_baselines(args.baselines)
    written = report_mod.render(report, run_dir)
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stressseq",
        description="Nitrogen-stress classification from canopy image sequences")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--boxes-per-class", type=int, default=9)
    p.add_argument("--dates", type=int, default=14)
    p.add_argument("--image-side", type=int, default=64)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--sequence-length", type=int, default=None,
                   help="intended window length; warns if dates are too few")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="scan a dataset tree into a manifest CSV")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="manifest CSV path")
    p.add_argument("--expected-classes", default=None,
                   help="comma-separated class names that must be present")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="run k-fold training and reporting")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="output directory for runs")
    p.add_argument("--pipeline", choices=("spatiotemporal", "spatial"),
                   default=None)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--weights", default=None,
                   help=f"backbone weights .npz (or set ${WEIGHTS_ENV})")
    p.add_argument("--run-id", default=None,
                   help="override the generated run id (timestamp + seed hash)")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k-folds", dest="k_folds", type=int, default=None)
    p.add_argument("--sequence-length", dest="sequence_length", type=int,
                   default=None)
    p.add_argument("--lr-schedule", dest="lr_schedule",
                   choices=("constant", "exponential_staircase"), default=None)
    p.add_argument("--decay-rate", dest="decay_rate", type=float, default=None)
    p.add_argument("--decay-steps-multiplier", dest="decay_steps_multiplier",
                   type=int, default=None)
    p.add_argument("--grouping", choices=("class_box_modality", "class_only"),
                   default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--backbone", choices=("mobilenetv2", "tinycnn"),
                   default=None)
    p.add_argument("--hidden-units", dest="hidden_units", type=int, default=None)
    aug = p.add_mutually_exclusive_group()
    aug.add_argument("--augment", dest="augment", action="store_true",
                     default=None)
    aug.add_argument("--no-augment", dest="augment", action="store_false",
                     default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="re-render reports for an existing run")
    p.add_argument("--run", required=True, help="run directory with report.json")
    p.add_argument("--baselines", default=None,
                   help="CSV of baseline rows for the comparison table")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

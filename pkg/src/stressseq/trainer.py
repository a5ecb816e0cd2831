"""K-fold training orchestration for both pipelines.

The spatio-temporal pipeline trains an LSTM head over features from a fully
frozen backbone, so per-frame features are computed once per run and reused
across folds; that is mathematically identical to recomputing them inside
every batch. The spatial pipeline fine-tunes the backbone's trainable
suffix directly on augmented single frames.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import report as report_mod
from .backbone import build_backbone
from .errors import ConfigError, DataError, TrainingAbort
from .layers import Adam
from .models import build_spatial, build_spatiotemporal
from .sequencer import (
    build_sequences,
    encode_labels,
    folds_to_json,
    load_image_batch,
    one_hot,
    stratified_kfold,
)

PIPELINES = ("spatiotemporal", "spatial")
SCHEDULES = ("constant", "exponential_staircase")

_PIPELINE_DEFAULTS = {
    "spatiotemporal": dict(batch_size=16, epochs=20, lr=1e-3,
                           lr_schedule="constant", augment=False),
    "spatial": dict(batch_size=64, epochs=250, lr=1e-3,
                    lr_schedule="exponential_staircase", augment=True),
}


@dataclass(frozen=True)
class TrainConfig:
    pipeline: str
    batch_size: int = 16
    epochs: int = 20
    lr: float = 1e-3
    seed: int = 42
    k_folds: int = 5
    sequence_length: int = 5
    lr_schedule: str = "constant"
    decay_rate: float = 0.9
    decay_steps_multiplier: int = 10
    grouping: str = "class_only"
    image_size: int = 224
    backbone: str = "mobilenetv2"
    hidden_units: int = 128
    augment: bool = False

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"unknown pipeline {self.pipeline!r}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.k_folds < 2:
            raise ConfigError("batch_size/epochs/k_folds out of range")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if self.sequence_length < 1:
            raise ConfigError("sequence_length must be >= 1")

    @classmethod
    def for_pipeline(cls, pipeline, **overrides):
        """Paper-default settings for a pipeline, with explicit overrides on top."""
        if pipeline not in _PIPELINE_DEFAULTS:
            raise ConfigError(f"unknown pipeline {pipeline!r}")
        merged = dict(_PIPELINE_DEFAULTS[pipeline])
        merged.update(overrides)
        return cls(pipeline=pipeline, **merged)


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Learning rate for a global step; staircase drops every N·epochs steps."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    boundary = steps_per_epoch * cfg.decay_steps_multiplier
    return cfg.lr * cfg.decay_rate ** (step // boundary)


def augment(image: np.ndarray, seed) -> np.ndarray:
    """Random rotation (±30°), shear (±0.2), shifts (±0.2), flips; nearest fill.

    Deterministic for a given seed; output shape and value range match the
    input. `seed` may be anything np.random.default_rng accepts.
    """
    rng = np.random.default_rng(seed)
    theta = math.radians(rng.uniform(-30.0, 30.0))
    shear = rng.uniform(-0.2, 0.2)
    H, W = image.shape[:2]
    ty = rng.uniform(-0.2, 0.2) * H
    tx = rng.uniform(-0.2, 0.2) * W
    flip_h = rng.random() < 0.5
    flip_v = rng.random() < 0.5

    rot = np.array([[math.cos(theta), -math.sin(theta)],
                    [math.sin(theta), math.cos(theta)]])
    shr = np.array([[1.0, -shear], [0.0, 1.0]])
    forward = rot @ shr  # acts on centered (row, col) coordinates
    inverse = np.linalg.inv(forward)
    center = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    offset = center - inverse @ center - inverse @ np.array([ty, tx])

    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[:, :, c] = ndimage.affine_transform(
            image[:, :, c], inverse, offset=offset, order=1, mode="nearest")
    if flip_h:
        out = out[:, ::-1, :]
    if flip_v:
        out = out[::-1, :, :]
    return np.ascontiguousarray(out)


class FrameStore:
    """Uint8 cache of decoded and resized frames keyed by path."""

    def __init__(self, image_size):
        self.image_size = image_size
        self._cache = {}

    def _frame(self, path):
        arr = self._cache.get(path)
        if arr is None:
            arr = (load_image_batch([path], self.image_size)[0] * 255.0).astype(np.uint8)
            self._cache[path] = arr
        return arr

    def images(self, paths) -> np.ndarray:
        """Float32 (B, H, W, 3) batch in [0, 1]."""
        return np.stack([self._frame(p) for p in paths]).astype(np.float32) / 255.0

    def clips(self, samples) -> np.ndarray:
        """Float32 (B, T, H, W, 3) batch in [0, 1] from SequenceSamples."""
        return np.stack([
            np.stack([self._frame(p) for p in s.frames]) for s in samples
        ]).astype(np.float32) / 255.0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


def _evaluate_batched(model, X, y_onehot, batch_size):
    """Inference-mode loss (with L2) and predictions over X in batches."""
    losses = []
    probs = []
    for start in range(0, len(X), batch_size):
        xb = X[start:start + batch_size]
        yb = y_onehot[start:start + batch_size]
        loss, p = model.evaluate(xb, yb)
        losses.append(loss * len(xb))
        probs.append(p)
    probs = np.concatenate(probs)
    return float(sum(losses) / len(X)), probs


def _save_checkpoint(path, model):
    state = model.state_dict()
    with open(path, "wb") as fh:
        np.savez(fh, __summary__=json.dumps(model.summary()), **state)


def load_checkpoint(path, model):
    """Restore a best.ckpt file into a compatible model; returns its summary."""
    with np.load(path, allow_pickle=False) as data:
        summary = json.loads(str(data["__summary__"]))
        model.load_state_dict({k: data[k] for k in data.files if k != "__summary__"})
    return summary


def write_history_csv(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for rec in history:
            writer.writerow([rec.epoch, f"{rec.train_loss:.6f}", f"{rec.train_acc:.6f}",
                             f"{rec.val_loss:.6f}", f"{rec.val_acc:.6f}"])


def train_fold(model, train_data, val_data, cfg: TrainConfig, fold_dir,
               fold_index=0, augment_train=False):
    """Train one fold; checkpoint whenever val_loss reaches a new minimum.

    train_data/val_data are (X, labels) with integer labels; X is either a
    feature array (sequence pipeline) or an image array (spatial pipeline).
    Returns (history, checkpoint_path).
    """
    X_train, y_train = train_data
    X_val, y_val = val_data
    if len(X_train) == 0 or len(X_val) == 0:
        raise DataError(f"fold {fold_index}: empty train or validation set")
    num_classes = model.num_classes
    y_train_oh = one_hot(y_train, num_classes)
    y_val_oh = one_hot(y_val, num_classes)

    fold_dir = Path(fold_dir)
    fold_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = fold_dir / "best.ckpt"

    opt = Adam()
    rng = np.random.default_rng([cfg.seed, fold_index])
    steps_per_epoch = math.ceil(len(X_train) / cfg.batch_size)
    history = []
    best_val = math.inf
    global_step = 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(X_train))
        epoch_loss = 0.0
        epoch_hits = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = X_train[idx]
            yb = y_train_oh[idx]
            if augment_train:
                xb = np.stack([
                    augment(xb[i], seed=[cfg.seed, fold_index, global_step, i])
                    for i in range(len(xb))
                ])
            loss, probs = model.loss_and_backward(xb, yb)
            if not math.isfinite(loss):
                raise TrainingAbort(
                    f"non-finite loss {loss} at fold {fold_index} epoch {epoch} "
                    f"step {global_step}")
            opt.step(model.trainable_items(), model.grad_items(),
                     lr=lr_at(global_step, cfg, steps_per_epoch))
            epoch_loss += loss * len(idx)
            epoch_hits += int((probs.argmax(axis=1) == y_train[idx]).sum())
            global_step += 1

        val_loss, val_probs = _evaluate_batched(model, X_val, y_val_oh, cfg.batch_size)
        rec = EpochRecord(
            epoch=epoch,
            train_loss=epoch_loss / len(X_train),
            train_acc=epoch_hits / len(X_train),
            val_loss=val_loss,
            val_acc=float((val_probs.argmax(axis=1) == y_val).mean()),
        )
        history.append(rec)
        if val_loss < best_val:
            best_val = val_loss
            _save_checkpoint(ckpt_path, model)

    write_history_csv(fold_dir / "history.csv", history)
    return history, ckpt_path


def _make_backbone(cfg: TrainConfig, weights_path=None):
    side = cfg.image_size if cfg.backbone == "mobilenetv2" else None
    bb = build_backbone(cfg.backbone, np.random.default_rng(cfg.seed), input_side=side)
    if weights_path:
        bb.load_npz(weights_path)
    return bb


def _sequence_dataset(records, cfg: TrainConfig, weights_path):
    samples = build_sequences(records, cfg.sequence_length, grouping=cfg.grouping)
    if not samples:
        raise DataError("no sequences could be built; check dates vs sequence_length")
    labels = [s.label for s in samples]
    codes, classes = encode_labels(labels)
    backbone = _make_backbone(cfg, weights_path)
    backbone.set_freeze(backbone.num_stages)
    store = FrameStore(cfg.image_size)
    # One feature vector per unique frame; the frozen backbone makes this
    # identical to extracting inside every training batch.
    unique_paths = sorted({p for s in samples for p in s.frames})
    feats = {}
    chunk = 64
    for start in range(0, len(unique_paths), chunk):
        paths = unique_paths[start:start + chunk]
        out = backbone.extract(store.images(paths))
        feats.update(zip(paths, out))
    X = np.stack([np.stack([feats[p] for p in s.frames]) for s in samples])
    return X, codes, classes, labels


def _spatial_dataset(records, cfg: TrainConfig):
    labels = [r.label for r in records]
    codes, classes = encode_labels(labels)
    store = FrameStore(cfg.image_size)
    X = store.images([r.path for r in records])
    return X, codes, classes, labels


def run_cv(records, cfg: TrainConfig, out_dir, run_id, weights_path=None):
    """Full cross-validated run; returns (RunReport, run_dir).

    Per fold: fresh model, training with checkpointing, best checkpoint
    restored, validation set scored (validation doubles as test). Artifacts
    land under out_dir/run_id/fold<k>/.
    """
    run_dir = Path(out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    if cfg.pipeline == "spatiotemporal":
        X, codes, classes, labels = _sequence_dataset(records, cfg, weights_path)
    else:
        X, codes, classes, labels = _spatial_dataset(records, cfg)

    splits = stratified_kfold(labels, cfg.k_folds, cfg.seed)
    with open(run_dir / "folds.json", "w", encoding="utf-8") as fh:
        fh.write(folds_to_json(splits))

    fold_reports = []
    for split in splits:
        tr = np.asarray(split.train_indices)
        va = np.asarray(split.val_indices)
        assert not set(split.train_indices) & set(split.val_indices)
        model = _build_model(cfg, len(classes), fold_seed=cfg.seed + split.fold,
                             weights_path=weights_path)
        fold_dir = run_dir / f"fold{split.fold}"
        history, ckpt = train_fold(
            model, (X[tr], codes[tr]), (X[va], codes[va]), cfg, fold_dir,
            fold_index=split.fold, augment_train=cfg.augment)
        load_checkpoint(ckpt, model)
        val_loss, val_probs = _evaluate_batched(model, X[va], one_hot(codes[va], len(classes)),
                                                cfg.batch_size)
        y_pred = val_probs.argmax(axis=1)
        fold_reports.append(report_mod.fold_report(
            fold=split.fold, y_true=codes[va], y_pred=y_pred, classes=classes,
            history=[vars(h) for h in history], checkpoint=str(ckpt),
            best_val_loss=val_loss))

    run_report = report_mod.RunReport(
        run_id=run_id, pipeline=cfg.pipeline, classes=classes,
        config=_config_dict(cfg), per_fold=fold_reports)
    with open(run_dir / "report.json", "w", encoding="utf-8") as fh:
        fh.write(run_report.to_json())
    return run_report, run_dir


def _build_model(cfg: TrainConfig, num_classes, fold_seed, weights_path):
    backbone = _make_backbone(cfg, weights_path)
    if cfg.pipeline == "spatiotemporal":
        return build_spatiotemporal(backbone, num_classes,
                                    hidden_units=cfg.hidden_units, seed=fold_seed)
    return build_spatial(backbone, num_classes, seed=fold_seed)


def _config_dict(cfg: TrainConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}

"""Assemble dated image records into fixed-length frame sequences and folds.

A sequence is a sliding window over one group's date-sorted frames. Grouping
"class_box_modality" keeps windows inside a single cultivation box and camera
modality; "class_only" pools every frame of a class into one timeline.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .ingest import load_image_array

GROUPINGS = ("class_box_modality", "class_only")


@dataclass(frozen=True)
class SequenceSample:
    """An ordered window of frame paths sharing one label."""

    frames: tuple
    dates: tuple
    label: str
    box: int | None = None
    modality: str | None = None


def build_sequences(records, length, grouping="class_only", stride=1):
    """Slide windows of `length` frames over each group's date-sorted records.

    Groups with fewer than `length` frames produce no windows (no padding).
    Output order is deterministic: group key, then window position.
    """
    if length < 1:
        raise ValueError(f"sequence length must be >= 1, got {length}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if grouping not in GROUPINGS:
        raise ValueError(f"unknown grouping {grouping!r}; expected one of {GROUPINGS}")

    groups = {}
    for r in records:
        if grouping == "class_only":
            key = (r.label,)
        else:
            key = (r.label, -1 if r.box is None else r.box, r.modality or "")
        groups.setdefault(key, []).append(r)

    samples = []
    for key in sorted(groups):
        frames = sorted(groups[key], key=lambda r: (r.date.isoformat(), r.path.name))
        for start in range(0, len(frames) - length + 1, stride):
            window = frames[start:start + length]
            if grouping == "class_only":
                box, modality = None, None
            else:
                box = None if key[1] == -1 else key[1]
                modality = key[2] or None
            samples.append(SequenceSample(
                frames=tuple(r.path for r in window),
                dates=tuple(r.date for r in window),
                label=key[0],
                box=box,
                modality=modality,
            ))
    return samples


def encode_labels(labels):
    """Map class names to integer codes by ascending lexicographic order.

    Returns (codes int64 array, ordered class-name list).
    """
    classes = sorted(set(labels))
    lookup = {name: i for i, name in enumerate(classes)}
    codes = np.array([lookup[name] for name in labels], dtype=np.int64)
    return codes, classes


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train_indices: tuple
    val_indices: tuple


def stratified_kfold(labels, k, seed):
    """Split indices into k folds with per-class balance (counts differ <= 1).

    Shuffles within each class with a seeded generator, then deals samples
    round-robin across folds. Every index lands in exactly one fold's
    validation set.
    """
    labels = list(labels)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    counts = {}
    for name in labels:
        counts[name] = counts.get(name, 0) + 1
    smallest = min(counts.values())
    if smallest < k:
        raise ValueError(
            f"cannot stratify into {k} folds: smallest class has {smallest} samples")

    rng = np.random.default_rng(seed)
    fold_members = [[] for _ in range(k)]
    for name in sorted(counts):
        idx = np.array([i for i, lab in enumerate(labels) if lab == name], dtype=np.int64)
        rng.shuffle(idx)
        for j, i in enumerate(idx):
            fold_members[j % k].append(int(i))

    all_indices = set(range(len(labels)))
    splits = []
    for f in range(k):
        val = sorted(fold_members[f])
        train = sorted(all_indices.difference(val))
        splits.append(FoldSplit(fold=f, train_indices=tuple(train), val_indices=tuple(val)))
    return splits


def folds_to_json(splits) -> str:
    payload = [
        {"fold": s.fold, "train_indices": list(s.train_indices),
         "val_indices": list(s.val_indices)}
        for s in splits
    ]
    return json.dumps(payload, indent=2)


def folds_from_json(text) -> list:
    return [
        FoldSplit(fold=d["fold"], train_indices=tuple(d["train_indices"]),
                  val_indices=tuple(d["val_indices"]))
        for d in json.loads(text)
    ]


def _load_resized(path, image_size) -> np.ndarray:
    arr = load_image_array(path)
    if arr.shape[0] != image_size or arr.shape[1] != image_size:
        img = Image.fromarray(arr).resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(img)
    return arr


def load_image_batch(paths, image_size) -> np.ndarray:
    """Decode and resize images into a float64 (B, H, W, 3) batch in [0, 1]."""
    batch = np.stack([_load_resized(p, image_size) for p in paths])
    return batch.astype(np.float64) / 255.0


def load_sequence_batch(samples, image_size, classes):
    """Decode samples into (X, y): X is (B, T, H, W, 3) in [0, 1], y int codes.

    `classes` fixes the label-to-code mapping so batches from different
    folds encode consistently.
    """
    lookup = {name: i for i, name in enumerate(classes)}
    xs = []
    ys = []
    for s in samples:
        frames = np.stack([_load_resized(p, image_size) for p in s.frames])
        xs.append(frames)
        ys.append(lookup[s.label])
    X = np.stack(xs).astype(np.float64) / 255.0
    y = np.array(ys, dtype=np.int64)
    return X, y


def one_hot(codes, num_classes) -> np.ndarray:
    out = np.zeros((len(codes), num_classes), dtype=np.float64)
    out[np.arange(len(codes)), codes] = 1.0
    return out

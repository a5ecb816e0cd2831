"""Dataset discovery: scan class-labeled image directories into a manifest.

Layout convention: one subdirectory per class label, image files directly
inside, each filename carrying a YYYYMMDD date stamp. Optional "boxNN" and
modality tokens (rgb / ir1 / ir2 / ms) are parsed when present and left
null otherwise.
"""
from __future__ import annotations

import csv
import re
import warnings
from dataclasses import dataclass
from datetime import date, datetime
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, DateParseError

MODALITIES = ("rgb", "ir1", "ir2", "ms")

_BOX_TOKEN = re.compile(r"^box(\d+)$")


@dataclass(frozen=True)
class ImageRecord:
    """One ingested image with metadata parsed from its path."""

    path: Path
    label: str
    date: date
    box: int | None = None
    modality: str | None = None


@dataclass(frozen=True)
class TreatmentEntry:
    box: int
    nitrogen: str
    water: str
    weed: str


_TREATMENT_ROWS = [
    ("low", "sufficient", "none", (22, 23, 24)),
    ("medium", "sufficient", "none", (4, 5, 6)),
    ("high", "sufficient", "medium", (7, 8, 9)),
    ("high", "sufficient", "high", (10, 11, 12)),
    ("medium", "low", "none", (13, 14, 15)),
    ("high", "sufficient", "high", (16,)),
    ("high", "sufficient", "high", (17,)),
    ("high", "sufficient", "high", (18,)),
    ("low", "sufficient", "medium", (25, 26, 27)),
    ("medium", "low", "high", (19, 20, 21)),
    ("low", "low", "none", (28, 29, 30)),
]

TREATMENT_TABLE = {
    box: TreatmentEntry(box=box, nitrogen=n, water=w, weed=weed)
    for n, w, weed, boxes in _TREATMENT_ROWS
    for box in boxes
}


def treatment_lookup(box: int) -> TreatmentEntry:
    """Nitrogen/water/weed levels for a cultivation box number."""
    try:
        return TREATMENT_TABLE[box]
    except KeyError:
        raise KeyError(f"box {box} is not in the treatment table") from None


def parse_date(filename: str) -> date:
    """First valid YYYYMMDD calendar date found in the filename, left to right.

    Raises:
        DateParseError: no 8-digit substring forms a valid date.
    """
    for i in range(len(filename) - 7):
        chunk = filename[i:i + 8]
        if chunk.isdigit():
            try:
                return datetime.strptime(chunk, "%Y%m%d").date()
            except ValueError:
                continue
    raise DateParseError(f"no valid YYYYMMDD date in filename: {filename!r}")


def _parse_tokens(stem: str):
    """Optional box number and modality from underscore-separated tokens."""
    box = None
    modality = None
    for token in stem.lower().split("_"):
        m = _BOX_TOKEN.match(token)
        if m and box is None:
            box = int(m.group(1))
        elif token in MODALITIES and modality is None:
            modality = token
    return box, modality


def load_image_array(path) -> np.ndarray:
    """Decode an image into a uint8 (H, W, 3) array.

    Single-band images are replicated across 3 channels; images with more
    than 3 bands are reduced to the first 3.
    """
    with Image.open(path) as img:
        if img.mode == "P":
            img = img.convert("RGB")
        arr = np.asarray(img)
    if arr.dtype == np.uint16:
        arr = (arr // 257).astype(np.uint8)
    elif arr.dtype != np.uint8:
        arr = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 255.0).astype(np.uint8)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.shape[2] == 2:
        arr = np.repeat(arr[:, :, :1], 3, axis=2)
    elif arr.shape[2] > 3:
        arr = arr[:, :, :3]
    return np.ascontiguousarray(arr)


@dataclass
class ScanResult:
    records: list
    skipped: list  # (path, reason) pairs


def scan_dataset(root, expected_classes=None) -> ScanResult:
    """Discover labeled images under one-directory-per-class layout.

    Record order is deterministic: class name, then date, then filename,
    independent of filesystem enumeration order. Files that fail date
    parsing or image decoding land in the skip list instead of aborting.

    Raises:
        DataError: root missing, no class directories, or an expected
            class directory absent.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"dataset root {root} contains no class directories")
    if expected_classes is not None:
        present = {d.name for d in class_dirs}
        missing = sorted(set(expected_classes) - present)
        if missing:
            raise DataError(f"missing class directories under {root}: {', '.join(missing)}")
        class_dirs = [d for d in class_dirs if d.name in set(expected_classes)]

    records = []
    skipped = []
    for class_dir in class_dirs:
        files = sorted((p for p in class_dir.iterdir() if p.is_file()), key=lambda p: p.name)
        if not files:
            warnings.warn(f"class directory {class_dir} is empty", stacklevel=2)
            continue
        for path in files:
            try:
                stamp = parse_date(path.name)
            except DateParseError:
                skipped.append((path, "no valid YYYYMMDD date in filename"))
                continue
            try:
                load_image_array(path)
            except Exception as exc:
                skipped.append((path, f"undecodable image ({type(exc).__name__})"))
                continue
            box, modality = _parse_tokens(path.stem)
            records.append(ImageRecord(path=path, label=class_dir.name, date=stamp,
                                       box=box, modality=modality))

    records.sort(key=lambda r: (r.label, r.date.isoformat(), r.path.name))
    skipped.sort(key=lambda entry: str(entry[0]))
    return ScanResult(records=records, skipped=skipped)


MANIFEST_FIELDS = ("path", "label", "date", "box", "modality")


def write_manifest(records, out, skipped=None):
    """Write records as CSV; identical inputs produce byte-identical files.

    A sibling ``<out>.skipped.txt`` is written when a skip list is supplied
    (one "path<TAB>reason" line per entry).
    """
    if not records:
        raise ValueError("write_manifest requires a non-empty record list")
    out = Path(out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            writer.writerow([
                str(r.path),
                r.label,
                r.date.isoformat(),
                "" if r.box is None else r.box,
                "" if r.modality is None else r.modality,
            ])
    if skipped is not None:
        skip_path = out.with_name(out.name + ".skipped.txt")
        with open(skip_path, "w", encoding="utf-8") as fh:
            for path, reason in skipped:
                fh.write(f"{path}\t{reason}\n")


def read_manifest(path) -> list:
    """Load a manifest CSV back into ImageRecord objects (no revalidation)."""
    path = Path(path)
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(MANIFEST_FIELDS):
            raise DataError(f"unexpected manifest header in {path}: {reader.fieldnames}")
        for row in reader:
            records.append(ImageRecord(
                path=Path(row["path"]),
                label=row["label"],
                date=date.fromisoformat(row["date"]),
                box=int(row["box"]) if row["box"] else None,
                modality=row["modality"] or None,
            ))
    return records

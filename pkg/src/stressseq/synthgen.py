"""Synthetic image dataset where class identity is a growth *rate*.

Each cultivation box gets a disc whose radius grows linearly over the date
axis. The growth rate depends only on the class; the starting radius is
random per box with a spread much larger than the total growth. A single
frame is therefore nearly uninformative about the class, while any short
window of frames exposes the rate. This separates pipelines that use
temporal context from ones that cannot.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np
from PIL import Image

FIRST_BOX_NUMBER = 4  # box numbering starts where the cultivation table does


def class_growth_rates(n: int) -> tuple:
    """Evenly spaced radius growth rates (pixels per date step) for n classes.

    The gaps are wide enough that a 5-frame window's fitted slope separates
    classes cleanly at the default jitter, while the rates themselves stay
    small against the starting-radius spread so single frames remain
    ambiguous.
    """
    if n < 2:
        raise ValueError(f"need at least 2 classes, got {n}")
    return tuple(0.25 + 0.2 * i / (n - 1) for i in range(n))


@dataclass(frozen=True)
class SynthConfig:
    out_dir: Path
    classes: int = 3
    boxes_per_class: int = 9
    dates: int = 14
    image_side: int = 64
    seed: int = 42
    start_radius_range: tuple = (8.0, 22.0)
    growth_rates: tuple = None
    jitter: float = 0.03
    start_date: date = field(default=date(2016, 3, 1))

    def rates(self) -> tuple:
        if self.growth_rates is not None:
            if len(self.growth_rates) != self.classes:
                raise ValueError("growth_rates length must equal number of classes")
            return tuple(float(r) for r in self.growth_rates)
        return class_growth_rates(self.classes)

    def class_names(self) -> list:
        return [f"class{c}" for c in range(self.classes)]


def render_disc(side: int, radius: float) -> np.ndarray:
    """Antialiased filled disc, uint8 (side, side), centered in the frame."""
    yy, xx = np.mgrid[0:side, 0:side]
    center = (side - 1) / 2.0
    dist = np.hypot(yy - center, xx - center)
    coverage = np.clip(radius - dist + 0.5, 0.0, 1.0)
    return np.round(coverage * 255.0).astype(np.uint8)


def estimate_radius(arr: np.ndarray) -> float:
    """Recover a disc's radius from its pixel mass (area = pi * r^2)."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    area = float(arr.astype(np.float64).sum()) / 255.0
    return float(np.sqrt(area / np.pi))


def single_frame_overlap(radii_by_class: dict, bins: int = 15) -> float:
    """Minimum pairwise histogram intersection of per-class radius marginals.

    Histograms share one bin grid spanning all observed radii. 1.0 means
    identical marginals; the generator aims to keep this high so that a
    single frame carries little class information.
    """
    names = sorted(radii_by_class)
    if len(names) < 2:
        raise ValueError("need at least two classes to measure overlap")
    everything = np.concatenate([np.asarray(radii_by_class[n], dtype=np.float64)
                                 for n in names])
    edges = np.linspace(everything.min() - 1e-9, everything.max() + 1e-9, bins + 1)
    hists = {n: np.histogram(radii_by_class[n], bins=edges)[0] / len(radii_by_class[n])
             for n in names}
    worst = 1.0
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            worst = min(worst, float(np.minimum(hists[a], hists[b]).sum()))
    return worst


def _validate(cfg: SynthConfig):
    if cfg.classes < 2:
        raise ValueError("need at least 2 classes")
    if cfg.boxes_per_class < 1 or cfg.dates < 2:
        raise ValueError("need at least 1 box per class and 2 dates")
    if cfg.image_side < 16:
        raise ValueError("image side must be >= 16")
    lo, hi = cfg.start_radius_range
    if not 0 < lo < hi:
        raise ValueError(f"bad start radius range {cfg.start_radius_range}")
    max_radius = hi + max(cfg.rates()) * (cfg.dates - 1) + 4.0 * cfg.jitter
    if max_radius >= cfg.image_side / 2.0 - 1.0:
        raise ValueError(
            f"disc would overflow the image: max radius {max_radius:.1f} "
            f"vs side {cfg.image_side}")


def generate(cfg: SynthConfig) -> dict:
    """Write the dataset under cfg.out_dir and return its summary.

    Output is byte-deterministic for a given config: rerunning with the
    same seed reproduces every PNG exactly. Layout is one directory per
    class with ``boxNN_rgb_YYYYMMDD.png`` files, plus a ``summary.json``
    at the root.
    """
    _validate(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    rates = cfg.rates()
    lo, hi = cfg.start_radius_range

    boxes = []
    count = 0
    for c, name in enumerate(cfg.class_names()):
        class_dir = out / name
        class_dir.mkdir(exist_ok=True)
        for j in range(cfg.boxes_per_class):
            box_number = FIRST_BOX_NUMBER + c * cfg.boxes_per_class + j
            # Stratified start: one box per stratum, random within. Every
            # class then covers the whole radius range, which keeps the
            # single-frame marginals overlapping even with few boxes.
            width = (hi - lo) / cfg.boxes_per_class
            r0 = lo + width * (j + float(rng.uniform()))
            boxes.append({"box": box_number, "class": name, "start_radius": round(r0, 4),
                          "growth_rate": rates[c]})
            for t in range(cfg.dates):
                radius = r0 + rates[c] * t + float(rng.normal(0.0, cfg.jitter))
                radius = max(radius, 1.0)
                stamp = (cfg.start_date + timedelta(days=t)).strftime("%Y%m%d")
                arr = render_disc(cfg.image_side, radius)
                img = Image.fromarray(arr, mode="L")
                img.save(class_dir / f"box{box_number:02d}_rgb_{stamp}.png")
                count += 1

    summary = {
        "classes": cfg.class_names(),
        "growth_rates": list(rates),
        "boxes_per_class": cfg.boxes_per_class,
        "dates": cfg.dates,
        "image_side": cfg.image_side,
        "seed": cfg.seed,
        "start_radius_range": list(cfg.start_radius_range),
        "jitter": cfg.jitter,
        "start_date": cfg.start_date.isoformat(),
        "image_count": count,
        "boxes": boxes,
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary

"""Metrics, fold reports, and rendered artifacts (curves, matrices, tables).

Conventions: confusion matrix rows are true classes, columns predictions;
zero-denominator precision/recall cases report 0.0 and are flagged rather
than raised; aggregate standard deviations are sample deviations (ddof=1);
rendered tables round to 4 decimals.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError


def confusion_matrix(y_true, y_pred, num_classes=None) -> np.ndarray:
    """Count matrix: entry (i, j) is true class i predicted as class j."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError(f"label shape mismatch: {y_true.shape} vs {y_pred.shape}")
    if num_classes is None:
        num_classes = int(max(y_true.max(), y_pred.max())) + 1 if len(y_true) else 0
    if len(y_true) and (y_true.min() < 0 or y_pred.min() < 0
                        or max(y_true.max(), y_pred.max()) >= num_classes):
        raise ValueError("labels outside [0, num_classes)")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


@dataclass
class MetricSet:
    precision: list
    recall: list
    f1: list
    macro_precision: float
    macro_recall: float
    macro_f1: float
    flags: list = field(default_factory=list)


def precision_recall_f1(cm) -> MetricSet:
    """Per-class precision/recall/F1 plus macro averages from a count matrix.

    Degenerate denominators (a class never predicted, absent from y_true, or
    with p+r = 0) yield 0.0 and an entry in `flags` instead of an error.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion matrix entries must be nonnegative")
    C = cm.shape[0]
    precision, recall, f1, flags = [], [], [], []
    for j in range(C):
        col = float(cm[:, j].sum())
        row = float(cm[j, :].sum())
        tp = float(cm[j, j])
        if col == 0.0:
            flags.append({"class_index": j, "metric": "precision",
                          "reason": "no predicted samples"})
            p = 0.0
        else:
            p = tp / col
        if row == 0.0:
            flags.append({"class_index": j, "metric": "recall",
                          "reason": "no true samples"})
            r = 0.0
        else:
            r = tp / row
        if p + r == 0.0:
            if col != 0.0 and row != 0.0:
                flags.append({"class_index": j, "metric": "f1",
                              "reason": "precision and recall both zero"})
            f = 0.0
        else:
            f = 2.0 * p * r / (p + r)
        precision.append(p)
        recall.append(r)
        f1.append(f)
    return MetricSet(
        precision=precision, recall=recall, f1=f1,
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f1=float(np.mean(f1)),
        flags=flags,
    )


@dataclass
class FoldReport:
    fold: int
    accuracy: float
    confusion: list
    metrics: MetricSet
    support: list
    best_epoch: int
    best_val_loss: float
    checkpoint: str
    history: list


def fold_report(fold, y_true, y_pred, classes, history, checkpoint,
                best_val_loss) -> FoldReport:
    """Score one fold's predictions and bundle them with its training history."""
    cm = confusion_matrix(y_true, y_pred, num_classes=len(classes))
    total = int(cm.sum())
    accuracy = float(np.trace(cm)) / total if total else 0.0
    best_epoch = min(history, key=lambda h: h["val_loss"])["epoch"] if history else 0
    return FoldReport(
        fold=fold,
        accuracy=accuracy,
        confusion=cm.tolist(),
        metrics=precision_recall_f1(cm),
        support=cm.sum(axis=1).tolist(),
        best_epoch=best_epoch,
        best_val_loss=float(best_val_loss),
        checkpoint=checkpoint,
        history=list(history),
    )


def aggregate_mean_std(values) -> dict:
    """Mean and sample standard deviation (ddof=1; 0.0 for a single fold)."""
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std}


@dataclass
class RunReport:
    run_id: str
    pipeline: str
    classes: list
    config: dict
    per_fold: list
    comparison: list = field(default_factory=list)

    def aggregate(self) -> dict:
        out = {}
        for key in ("accuracy", "best_val_loss"):
            out[key] = aggregate_mean_std([getattr(f, key) for f in self.per_fold])
        for key in ("macro_precision", "macro_recall", "macro_f1"):
            out[key] = aggregate_mean_std([getattr(f.metrics, key) for f in self.per_fold])
        return out

    def to_json(self) -> str:
        payload = {
            "run_id": self.run_id,
            "pipeline": self.pipeline,
            "classes": self.classes,
            "config": self.config,
            "per_fold": [asdict(f) for f in self.per_fold],
            "aggregate": self.aggregate(),
            "comparison": self.comparison,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "RunReport":
        try:
            d = json.loads(text)
            folds = []
            for f in d["per_fold"]:
                f = dict(f)
                f["metrics"] = MetricSet(**f["metrics"])
                folds.append(FoldReport(**f))
            return cls(run_id=d["run_id"], pipeline=d["pipeline"], classes=d["classes"],
                       config=d["config"], per_fold=folds,
                       comparison=d.get("comparison") or [])
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"malformed report JSON: {exc}") from exc


def _assert_invariants(report: RunReport):
    for f in report.per_fold:
        cm = np.asarray(f.confusion)
        total = cm.sum()
        if total:
            assert abs(f.accuracy - np.trace(cm) / total) < 1e-12, (
                f"fold {f.fold}: accuracy does not match its confusion matrix")
        assert abs(f.metrics.macro_f1 - float(np.mean(f.metrics.f1))) < 1e-12


def _render_curves(fold: FoldReport, path):
    epochs = [h["epoch"] for h in fold.history]
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 4))
    ax_acc.plot(epochs, [h["train_acc"] for h in fold.history], label="train")
    ax_acc.plot(epochs, [h["val_acc"] for h in fold.history], label="validation")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_title(f"Fold {fold.fold} accuracy")
    ax_acc.legend()
    ax_loss.plot(epochs, [h["train_loss"] for h in fold.history], label="train")
    ax_loss.plot(epochs, [h["val_loss"] for h in fold.history], label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.set_title(f"Fold {fold.fold} loss")
    ax_loss.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _render_confusion(fold: FoldReport, classes, path):
    cm = np.asarray(fold.confusion)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(classes)), classes, rotation=45, ha="right")
    ax.set_yticks(range(len(classes)), classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"Fold {fold.fold} confusion matrix")
    threshold = cm.max() / 2.0 if cm.max() else 0.5
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                    color="white" if cm[i, j] > threshold else "black")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _write_folds_csv(report: RunReport, path):
    rows = []
    for f in report.per_fold:
        rows.append([f.fold, f.best_epoch, f"{f.accuracy:.4f}",
                     f"{f.metrics.macro_precision:.4f}", f"{f.metrics.macro_recall:.4f}",
                     f"{f.metrics.macro_f1:.4f}", f"{f.best_val_loss:.4f}"])
    agg = report.aggregate()

    def _row(tag, stat):
        return [tag, "", f"{agg['accuracy'][stat]:.4f}",
                f"{agg['macro_precision'][stat]:.4f}", f"{agg['macro_recall'][stat]:.4f}",
                f"{agg['macro_f1'][stat]:.4f}", f"{agg['best_val_loss'][stat]:.4f}"]

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fold", "best_epoch", "accuracy", "macro_precision",
                         "macro_recall", "macro_f1", "best_val_loss"])
        writer.writerows(rows)
        writer.writerow(_row("mean", "mean"))
        writer.writerow(_row("std", "std"))


def render(report: RunReport, out_dir) -> list:
    """Write curve/confusion images, folds.csv, report.json, comparison.csv.

    Returns the list of created paths. comparison.csv appears only when the
    report carries baseline rows.
    """
    _assert_invariants(report)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for f in report.per_fold:
        curves = out / f"fold{f.fold}_curves.png"
        _render_curves(f, curves)
        written.append(curves)
        conf = out / f"fold{f.fold}_confusion.png"
        _render_confusion(f, report.classes, conf)
        written.append(conf)
    folds_csv = out / "folds.csv"
    _write_folds_csv(report, folds_csv)
    written.append(folds_csv)
    report_json = out / "report.json"
    with open(report_json, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    written.append(report_json)
    if report.comparison:
        comparison = out / "comparison.csv"
        with open(comparison, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["method", "train_accuracy", "test_accuracy"])
            for row in report.comparison:
                writer.writerow(list(row))
        written.append(comparison)
    return written

"""Metrics against brute-force oracles, report serialization, rendering."""
import json

import numpy as np
import pytest

from stressseq.errors import DataError
from stressseq.report import (
    MetricSet,
    RunReport,
    aggregate_mean_std,
    confusion_matrix,
    fold_report,
    precision_recall_f1,
    render,
)


def brute_force_cm(y_true, y_pred, C):
    cm = [[0] * C for _ in range(C)]
    for t, p in zip(y_true, y_pred):
        cm[t][p] += 1
    return cm


class TestConfusionMatrix:
    def test_perfect_prediction_is_diagonal(self):
        y = [0, 0, 1, 2, 2, 2]
        cm = confusion_matrix(y, y)
        assert cm.tolist() == [[2, 0, 0], [0, 1, 0], [0, 0, 3]]

    def test_hand_enumerated_case(self):
        cm = confusion_matrix([0, 1, 2], [1, 1, 2])
        assert cm.tolist() == [[0, 1, 0], [0, 1, 0], [0, 0, 1]]

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(0)
        y_true = rng.integers(0, 3, size=60)
        y_pred = rng.integers(0, 3, size=60)
        cm = confusion_matrix(y_true, y_pred, num_classes=3)
        assert cm.tolist() == brute_force_cm(y_true.tolist(), y_pred.tolist(), 3)
        assert cm.sum() == 60

    def test_rows_sum_to_support(self):
        rng = np.random.default_rng(1)
        y_true = rng.integers(0, 4, size=40)
        y_pred = rng.integers(0, 4, size=40)
        cm = confusion_matrix(y_true, y_pred, num_classes=4)
        assert cm.sum(axis=1).tolist() == np.bincount(y_true, minlength=4).tolist()

    def test_validation_errors(self):
        with pytest.raises(ValueError):
            confusion_matrix([0, 1], [0])
        with pytest.raises(ValueError):
            confusion_matrix([0, 3], [0, 1], num_classes=3)


class TestPrecisionRecallF1:
    def test_diagonal_is_perfect(self):
        m = precision_recall_f1(np.diag([5, 3, 7]))
        assert m.precision == [1.0, 1.0, 1.0]
        assert m.recall == [1.0, 1.0, 1.0]
        assert m.f1 == [1.0, 1.0, 1.0]
        assert m.flags == []

    def test_matches_definition_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            C = int(rng.integers(2, 5))
            n = int(rng.integers(10, 40))
            y_true = rng.integers(0, C, size=n)
            y_pred = rng.integers(0, C, size=n)
            cm = confusion_matrix(y_true, y_pred, num_classes=C)
            m = precision_recall_f1(cm)
            for j in range(C):
                tp = sum(1 for t, p in zip(y_true, y_pred) if t == j and p == j)
                pred_j = sum(1 for p in y_pred if p == j)
                true_j = sum(1 for t in y_true if t == j)
                p_ref = tp / pred_j if pred_j else 0.0
                r_ref = tp / true_j if true_j else 0.0
                f_ref = 2 * p_ref * r_ref / (p_ref + r_ref) if p_ref + r_ref else 0.0
                assert m.precision[j] == pytest.approx(p_ref, abs=1e-12)
                assert m.recall[j] == pytest.approx(r_ref, abs=1e-12)
                assert m.f1[j] == pytest.approx(f_ref, abs=1e-12)
            assert m.macro_f1 == pytest.approx(float(np.mean(m.f1)), abs=1e-12)

    def test_zero_predictions_flagged(self):
        cm = np.array([[3, 0], [2, 0]])  # class 1 never predicted
        m = precision_recall_f1(cm)
        assert m.precision[1] == 0.0
        assert any(f["class_index"] == 1 and f["metric"] == "precision"
                   for f in m.flags)

    def test_absent_true_class_flagged(self):
        cm = np.array([[3, 1], [0, 0]])
        m = precision_recall_f1(cm)
        assert m.recall[1] == 0.0
        assert any(f["metric"] == "recall" for f in m.flags)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            precision_recall_f1(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            precision_recall_f1(np.array([[1, -1], [0, 2]]))


class TestAggregate:
    def test_published_fold_accuracies(self):
        agg = aggregate_mean_std([0.9867, 0.98, 0.9867, 0.98, 0.99])
        assert round(agg["mean"], 4) == 0.9847
        assert round(agg["std"], 4) == 0.0045

    def test_single_value_has_zero_std(self):
        assert aggregate_mean_std([0.5]) == {"mean": 0.5, "std": 0.0}


def fake_history(n, seed=0):
    rng = np.random.default_rng(seed)
    hist = []
    loss = 1.2
    for e in range(1, n + 1):
        loss = max(loss * 0.8 + rng.uniform(-0.02, 0.02), 0.05)
        hist.append({"epoch": e, "train_loss": loss + 0.1, "train_acc": 1.0 - loss / 2,
                     "val_loss": loss, "val_acc": 1.0 - loss / 1.8})
    return hist


def fake_report(folds=2, comparison=()):
    rng = np.random.default_rng(3)
    per_fold = []
    for k in range(folds):
        y_true = rng.integers(0, 3, size=30)
        y_pred = np.where(rng.random(30) < 0.8, y_true, rng.integers(0, 3, size=30))
        hist = fake_history(4, seed=k)
        per_fold.append(fold_report(
            fold=k, y_true=y_true, y_pred=y_pred, classes=["a", "b", "c"],
            history=hist, checkpoint=f"fold{k}/best.ckpt",
            best_val_loss=min(h["val_loss"] for h in hist)))
    return RunReport(run_id="test-run", pipeline="spatiotemporal",
                     classes=["a", "b", "c"], config={"seed": 42},
                     per_fold=per_fold, comparison=list(comparison))


class TestRunReport:
    def test_fold_report_accuracy_is_trace_over_total(self):
        rep = fake_report(1).per_fold[0]
        cm = np.asarray(rep.confusion)
        assert rep.accuracy == pytest.approx(np.trace(cm) / cm.sum())
        assert rep.best_epoch == min(rep.history, key=lambda h: h["val_loss"])["epoch"]

    def test_json_roundtrip(self):
        report = fake_report(2)
        back = RunReport.from_json(report.to_json())
        assert back.to_json() == report.to_json()
        assert isinstance(back.per_fold[0].metrics, MetricSet)

    def test_malformed_json_raises(self):
        with pytest.raises(DataError):
            RunReport.from_json("not json")
        with pytest.raises(DataError):
            RunReport.from_json(json.dumps({"run_id": "x"}))

    def test_aggregate_matches_recomputation(self):
        report = fake_report(3)
        agg = report.aggregate()
        accs = [f.accuracy for f in report.per_fold]
        assert agg["accuracy"]["mean"] == pytest.approx(np.mean(accs), abs=1e-10)
        assert agg["accuracy"]["std"] == pytest.approx(np.std(accs, ddof=1), abs=1e-10)


class TestRender:
    def test_file_set_and_csv_shape(self, tmp_path):
        report = fake_report(2)
        written = render(report, tmp_path)
        names = {p.name for p in written}
        assert names == {"fold0_curves.png", "fold0_confusion.png",
                         "fold1_curves.png", "fold1_confusion.png",
                         "folds.csv", "report.json"}
        rows = (tmp_path / "folds.csv").read_text().splitlines()
        assert rows[0] == ("fold,best_epoch,accuracy,macro_precision,"
                           "macro_recall,macro_f1,best_val_loss")
        assert len(rows) == 1 + 2 + 2  # header + folds + mean/std
        assert rows[-2].startswith("mean,")
        assert rows[-1].startswith("std,")

    def test_mean_std_rows_recompute(self, tmp_path):
        report = fake_report(3)
        render(report, tmp_path)
        rows = [r.split(",") for r in (tmp_path / "folds.csv").read_text().splitlines()]
        accs = [float(r[2]) for r in rows[1:4]]
        mean_row = next(r for r in rows if r[0] == "mean")
        std_row = next(r for r in rows if r[0] == "std")
        assert float(mean_row[2]) == pytest.approx(
            round(float(np.mean([f.accuracy for f in report.per_fold])), 4), abs=1e-10)
        assert float(std_row[2]) == pytest.approx(
            round(float(np.std([f.accuracy for f in report.per_fold], ddof=1)), 4),
            abs=1e-10)
        assert len(accs) == 3

    def test_rerender_is_byte_identical(self, tmp_path):
        report = fake_report(2)
        render(report, tmp_path / "a")
        render(report, tmp_path / "b")
        assert ((tmp_path / "a" / "folds.csv").read_bytes()
                == (tmp_path / "b" / "folds.csv").read_bytes())
        assert ((tmp_path / "a" / "report.json").read_bytes()
                == (tmp_path / "b" / "report.json").read_bytes())

    def test_comparison_rows_render_verbatim(self, tmp_path):
        report = fake_report(1, comparison=[("SVM", "75.68", "80.95"),
                                            ("proposed", "99.9", "98.47")])
        written = render(report, tmp_path)
        assert any(p.name == "comparison.csv" for p in written)
        text = (tmp_path / "comparison.csv").read_text()
        assert "SVM,75.68,80.95" in text

    def test_no_comparison_no_file(self, tmp_path):
        render(fake_report(1), tmp_path)
        assert not (tmp_path / "comparison.csv").exists()

    def test_corrupted_accuracy_fails_invariant(self, tmp_path):
        report = fake_report(1)
        report.per_fold[0].accuracy = 0.123
        with pytest.raises(AssertionError, match="accuracy"):
            render(report, tmp_path)

import csv

import numpy as np
import pytest

from qsetag.errors import EvaluationError
from qsetag.metrics import (
    confusion_matrix,
    evaluate,
    precision_recall_f1,
    render_report,
    roc_auc,
    roc_curve,
)


def brute_force_metrics(actual, predicted, k):
    """Independent per-item recount of P/R/F1/accuracy per class."""
    out = {}
    for cls in range(6):
        tp = sum(1 for a, p in zip(actual, predicted) if a == cls and p == cls)
        fp = sum(1 for a, p in zip(actual, predicted) if a != cls and p == cls)
        fn = sum(1 for a, p in zip(actual, predicted) if a == cls and p != cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out[cls] = (precision, recall, f1)
    accuracy = sum(1 for a, p in zip(actual, predicted) if a == p) / len(actual)
    return out, accuracy


def mann_whitney_auc(labels, scores):
    """U / (n_pos * n_neg) with ties counted half."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# -- precision/recall/F1 -------------------------------------------------------


def test_prf_direct_values():
    matrix = np.zeros((6, 6), dtype=int)
    matrix[0, 0] = 9  # TP
    matrix[1, 0] = 1  # FP for class 0
    matrix[0, 2] = 9  # FN for class 0
    metrics = precision_recall_f1(matrix)[0]
    assert metrics.precision == pytest.approx(0.9)
    assert metrics.recall == pytest.approx(0.5)
    assert metrics.f1 == pytest.approx(0.642857, abs=1e-6)


def test_prf_high_symmetric():
    # P = R = 0.99 -> harmonic mean 0.99 exactly
    matrix = np.zeros((6, 6), dtype=int)
    matrix[3, 3] = 99
    matrix[3, 1] = 1
    matrix[1, 3] = 1
    matrix[1, 1] = 100
    metrics = precision_recall_f1(matrix)[3]
    assert metrics.precision == pytest.approx(0.99)
    assert metrics.recall == pytest.approx(0.99)
    assert metrics.f1 == pytest.approx(0.99)


def test_prf_degenerate_class():
    matrix = np.zeros((6, 6), dtype=int)
    matrix[0, 0] = 10
    metrics = precision_recall_f1(matrix)[5]
    assert (metrics.precision, metrics.recall, metrics.f1) == (0.0, 0.0, 0.0)
    assert metrics.degenerate


def test_prf_negative_counts():
    matrix = np.zeros((6, 6), dtype=int)
    matrix[0, 0] = -1
    with pytest.raises(EvaluationError):
        precision_recall_f1(matrix)


# -- confusion matrix ------------------------------------------------------------


def test_confusion_identical_is_diagonal():
    labels = [0, 1, 2, 3, 4, 5, 2, 2]
    matrix = confusion_matrix(labels, labels)
    assert np.array_equal(matrix, np.diag([1, 1, 3, 1, 1, 1]))


def test_confusion_single_item():
    matrix = confusion_matrix([2], [0])  # actual Errors, predicted Tooling
    assert matrix[2, 0] == 1
    assert matrix.sum() == 1


def test_confusion_length_mismatch():
    with pytest.raises(EvaluationError):
        confusion_matrix([0, 1], [0])


def test_confusion_brute_force_recount():
    rng = np.random.default_rng(0)
    actual = rng.integers(0, 6, size=100)
    predicted = rng.integers(0, 6, size=100)
    matrix = confusion_matrix(actual, predicted)
    for a in range(6):
        for p in range(6):
            count = sum(1 for x, y in zip(actual, predicted) if x == a and y == p)
            assert matrix[a, p] == count


# -- ROC / AUC ----------------------------------------------------------------------


def test_roc_perfect_ranking():
    labels = np.array([1, 1, 1, 0, 0, 0], dtype=bool)
    scores = np.array([0.9, 0.8, 0.7, 0.3, 0.2, 0.1])
    assert roc_curve(labels, scores).auc == pytest.approx(1.0)


def test_roc_anti_ranking():
    labels = np.array([1, 1, 0, 0], dtype=bool)
    scores = np.array([0.1, 0.2, 0.8, 0.9])
    assert roc_curve(labels, scores).auc == pytest.approx(0.0)


def test_roc_random_scores_near_half():
    rng = np.random.default_rng(42)
    labels = rng.integers(0, 2, size=2000).astype(bool)
    scores = rng.random(2000)
    assert roc_curve(labels, scores).auc == pytest.approx(0.5, abs=0.05)


@pytest.mark.parametrize("seed", range(5))
def test_roc_equals_mann_whitney(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=60).astype(bool)
    if labels.all() or not labels.any():
        labels[0] = ~labels[0]
    # quantized scores force ties
    scores = np.round(rng.random(60), 1)
    auc = roc_curve(labels, scores).auc
    assert auc == pytest.approx(mann_whitney_auc(labels, scores), abs=1e-9)


def test_roc_curve_endpoints():
    labels = np.array([1, 0, 1, 0], dtype=bool)
    curve = roc_curve(labels, np.array([0.4, 0.4, 0.2, 0.9]))
    assert curve.points[0] == (0.0, 0.0)
    assert curve.points[-1] == (1.0, 1.0)


def test_roc_auc_per_class_and_macro():
    actual = [0, 0, 1, 1]
    probs = np.array(
        [
            [0.8, 0.1, 0.02, 0.02, 0.03, 0.03],
            [0.7, 0.2, 0.02, 0.02, 0.03, 0.03],
            [0.1, 0.8, 0.02, 0.02, 0.03, 0.03],
            [0.2, 0.7, 0.02, 0.02, 0.03, 0.03],
        ]
    )
    curves, macro = roc_auc(actual, probs)
    assert curves[0].auc == pytest.approx(1.0)
    assert curves[1].auc == pytest.approx(1.0)
    # classes without positives are excluded from the macro average
    assert curves[2].auc is None
    assert macro == pytest.approx(1.0)


def test_roc_auc_requires_normalized_rows():
    with pytest.raises(EvaluationError):
        roc_auc([0], np.array([[0.5, 0.1, 0.1, 0.1, 0.1, 0.2]]) * 2)


# -- evaluate + report ----------------------------------------------------------------


def test_evaluate_matches_brute_force():
    rng = np.random.default_rng(7)
    actual = rng.integers(0, 6, size=200).tolist()
    predicted = rng.integers(0, 6, size=200).tolist()
    report = evaluate(actual, predicted)
    expected, accuracy = brute_force_metrics(actual, predicted, 6)
    assert report.overall_accuracy == pytest.approx(accuracy)
    for cls, (precision, recall, f1) in expected.items():
        assert report.per_class[cls].precision == pytest.approx(precision)
        assert report.per_class[cls].recall == pytest.approx(recall)
        assert report.per_class[cls].f1 == pytest.approx(f1)
    assert report.overall_accuracy == pytest.approx(
        np.trace(report.confusion) / report.confusion.sum()
    )


def test_evaluate_permutation_invariant():
    rng = np.random.default_rng(8)
    actual = rng.integers(0, 6, size=80)
    predicted = rng.integers(0, 6, size=80)
    order = rng.permutation(80)
    direct = evaluate(actual.tolist(), predicted.tolist())
    shuffled = evaluate(actual[order].tolist(), predicted[order].tolist())
    assert direct.overall_accuracy == shuffled.overall_accuracy
    assert np.array_equal(direct.confusion, shuffled.confusion)


def test_render_report_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    actual = rng.integers(0, 5, size=50).tolist()  # class 5 left empty on purpose
    predicted = rng.integers(0, 5, size=50).tolist()
    probs = rng.dirichlet(np.ones(6), size=50)
    report = evaluate(actual, predicted, probs)
    paths = render_report(report, tmp_path, classifier_name="test-encoder")

    with (tmp_path / "metrics.csv").open() as handle:
        rows = {row["class"]: row for row in csv.DictReader(handle)}
    assert len(rows) == 6
    for cls in range(6):
        from qsetag.taxonomy import decode

        row = rows[decode(cls).display_name]
        assert float(row["precision"]) == pytest.approx(report.per_class[cls].precision, abs=1e-6)
        assert int(row["support"]) == report.per_class[cls].support

    markdown = (tmp_path / "report.md").read_text()
    assert markdown.count("| test-encoder |") == 6
    assert "Overall accuracy" in markdown
    assert "degenerate" in markdown  # class 5 has no support
    assert (tmp_path / "confusion.csv").exists()
    assert any(p.name.startswith("roc_") for p in paths)
    assert (tmp_path / "confusion.png").stat().st_size > 0

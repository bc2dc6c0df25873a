"""Per-class precision/recall/F1, confusion matrices, one-vs-rest ROC/AUC.

Conventions: zero-division cases yield 0 and flag the class as degenerate;
macro averages are unweighted over classes with nonzero support; ROC
thresholds are the sorted distinct scores (exact curve, no binning), with AUC
by the trapezoid rule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import EvaluationError
from .taxonomy import CATEGORIES, NUM_CATEGORIES, decode


def confusion_matrix(
    actual: Sequence[int], predicted: Sequence[int], num_classes: int = NUM_CATEGORIES
) -> np.ndarray:
    """cell[a][p] = number of items with actual class a predicted as p."""
    actual = np.asarray(actual, dtype=int)
    predicted = np.asarray(predicted, dtype=int)
    if actual.shape != predicted.shape:
        raise EvaluationError(
            f"label vectors differ in length: {actual.shape} vs {predicted.shape}"
        )
    if actual.size and (
        actual.min() < 0 or actual.max() >= num_classes
        or predicted.min() < 0 or predicted.max() >= num_classes
    ):
        raise EvaluationError(f"labels must lie in 0..{num_classes - 1}")
    matrix = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(matrix, (actual, predicted), 1)
    return matrix


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool = False


def precision_recall_f1(confusion: np.ndarray) -> dict[int, ClassMetrics]:
    """P_k, R_k and their harmonic mean per class from a confusion matrix."""
    confusion = np.asarray(confusion)
    if (confusion < 0).any():
        raise EvaluationError("confusion matrix has negative counts")
    out = {}
    for k in range(confusion.shape[0]):
        tp = float(confusion[k, k])
        fp = float(confusion[:, k].sum() - tp)
        fn = float(confusion[k, :].sum() - tp)
        degenerate = False
        if tp + fp > 0:
            precision = tp / (tp + fp)
        else:
            precision, degenerate = 0.0, True
        if tp + fn > 0:
            recall = tp / (tp + fn)
        else:
            recall, degenerate = 0.0, True
        if precision + recall > 0:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            f1, degenerate = 0.0, True
        out[k] = ClassMetrics(
            precision=precision,
            recall=recall,
            f1=f1,
            support=int(confusion[k, :].sum()),
            degenerate=degenerate,
        )
    return out


@dataclass(frozen=True)
class RocCurve:
    """Exact one-vs-rest ROC for a single class."""

    points: tuple[tuple[float, float], ...]  # (fpr, tpr), starts (0,0), ends (1,1)
    auc: float | None  # None when the class has no positives or no negatives


def roc_curve(labels: np.ndarray, scores: np.ndarray) -> RocCurve:
    """ROC over the sorted distinct scores; ties grouped (trapezoid AUC)."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return RocCurve(points=((0.0, 0.0), (1.0, 1.0)), auc=None)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tps = np.cumsum(sorted_labels)
    fps = np.cumsum(~sorted_labels)
    # keep only the last index of each tied score group
    distinct = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([distinct, [scores.size - 1]])
    tpr = np.concatenate([[0.0], tps[idx] / n_pos])
    fpr = np.concatenate([[0.0], fps[idx] / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(points=tuple(zip(fpr.tolist(), tpr.tolist())), auc=auc)


def roc_auc(
    actual: Sequence[int], probs: np.ndarray, num_classes: int = NUM_CATEGORIES
) -> tuple[dict[int, RocCurve], float | None]:
    """Per-class one-vs-rest curves plus the unweighted macro AUC.

    Classes with zero positives have no defined AUC and are excluded from the
    macro average.  Probability rows must sum to 1 (±1e-6).
    """
    actual = np.asarray(actual, dtype=int)
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or probs.shape != (actual.size, num_classes):
        raise EvaluationError(f"probs must be ({actual.size}, {num_classes})")
    sums = probs.sum(axis=1)
    if actual.size and not np.allclose(sums, 1.0, atol=1e-6):
        raise EvaluationError("probability rows must sum to 1 within 1e-6")
    curves = {}
    aucs = []
    for k in range(num_classes):
        curve = roc_curve(actual == k, probs[:, k])
        curves[k] = curve
        if curve.auc is not None:
            aucs.append(curve.auc)
    macro = float(np.mean(aucs)) if aucs else None
    return curves, macro


@dataclass(frozen=True)
class EvalReport:
    """Everything the report renderer and cross-fold aggregation need."""

    per_class: Mapping[int, ClassMetrics]
    overall_accuracy: float
    macro_f1: float
    weighted_f1: float
    confusion: np.ndarray
    roc: Mapping[int, RocCurve] = field(default_factory=dict)
    auc: Mapping[int, float | None] = field(default_factory=dict)
    macro_auc: float | None = None

    def to_dict(self) -> dict:
        return {
            "per_class": {
                decode(k).display_name: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                    "degenerate": m.degenerate,
                }
                for k, m in self.per_class.items()
            },
            "overall_accuracy": self.overall_accuracy,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "confusion": self.confusion.tolist(),
            "auc": {decode(k).display_name: v for k, v in self.auc.items()},
            "macro_auc": self.macro_auc,
        }


def evaluate(
    actual: Sequence[int],
    predicted: Sequence[int],
    probs: np.ndarray | None = None,
    num_classes: int = NUM_CATEGORIES,
) -> EvalReport:
    """Build a full report from labels (and optionally probability rows)."""
    matrix = confusion_matrix(actual, predicted, num_classes)
    per_class = precision_recall_f1(matrix)
    total = matrix.sum()
    if total == 0:
        raise EvaluationError("cannot evaluate an empty label set")
    accuracy = float(np.trace(matrix) / total)
    f1s = [m.f1 for m in per_class.values() if m.support > 0]
    macro_f1 = float(np.mean(f1s)) if f1s else 0.0
    supports = np.array([per_class[k].support for k in range(num_classes)], dtype=float)
    weighted_f1 = float(
        sum(per_class[k].f1 * supports[k] for k in range(num_classes)) / supports.sum()
    )
    curves: dict[int, RocCurve] = {}
    macro_auc = None
    if probs is not None:
        curves, macro_auc = roc_auc(actual, probs, num_classes)
    return EvalReport(
        per_class=per_class,
        overall_accuracy=accuracy,
        macro_f1=macro_f1,
        weighted_f1=weighted_f1,
        confusion=matrix,
        roc=curves,
        auc={k: c.auc for k, c in curves.items()},
        macro_auc=macro_auc,
    )


def render_report(report: EvalReport, outdir: str | Path, classifier_name: str = "encoder") -> list[Path]:
    """Write metrics.csv, confusion.csv, per-class ROC CSVs, plots and report.md."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    metrics_path = outdir / "metrics.csv"
    with metrics_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["class", "precision", "recall", "f1", "support"])
        for k in sorted(report.per_class):
            m = report.per_class[k]
            writer.writerow(
                [decode(k).display_name, f"{m.precision:.6f}", f"{m.recall:.6f}",
                 f"{m.f1:.6f}", m.support]
            )
    written.append(metrics_path)

    confusion_path = outdir / "confusion.csv"
    with confusion_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["actual\\predicted"] + [c.display_name for c in CATEGORIES])
        for cat in CATEGORIES:
            writer.writerow([cat.display_name] + report.confusion[cat.index].tolist())
    written.append(confusion_path)

    for k, curve in report.roc.items():
        roc_path = outdir / f"roc_{decode(k).slug}.csv"
        with roc_path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["fpr", "tpr"])
            for fpr, tpr in curve.points:
                writer.writerow([f"{fpr:.6f}", f"{tpr:.6f}"])
        written.append(roc_path)

    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(report.confusion, cmap="Blues")
    ax.set_xticks(range(NUM_CATEGORIES), [c.index for c in CATEGORIES])
    ax.set_yticks(range(NUM_CATEGORIES), [c.index for c in CATEGORIES])
    for i in range(NUM_CATEGORIES):
        for j in range(NUM_CATEGORIES):
            ax.text(j, i, str(report.confusion[i, j]), ha="center", va="center", fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("actual")
    ax.set_title("0=Tooling 1=Conceptual 2=Errors 3=Theoretical 4=API Usage 5=Learning", fontsize=7)
    fig.colorbar(im, shrink=0.8)
    fig.tight_layout()
    heatmap_path = outdir / "confusion.png"
    fig.savefig(heatmap_path, dpi=120)
    plt.close(fig)
    written.append(heatmap_path)

    if report.roc:
        fig, ax = plt.subplots(figsize=(6, 5))
        for k, curve in report.roc.items():
            if curve.auc is None:
                continue
            xs, ys = zip(*curve.points)
            ax.plot(xs, ys, label=f"{decode(k).display_name} (AUC={curve.auc:.3f})")
        ax.plot([0, 1], [0, 1], "k--", linewidth=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(fontsize=8)
        fig.tight_layout()
        roc_plot = outdir / "roc.png"
        fig.savefig(roc_plot, dpi=120)
        plt.close(fig)
        written.append(roc_plot)

    md_path = outdir / "report.md"
    lines = [
        "| Concept | Classifier | Precision | Recall | F1-score |",
        "|---|---|---|---|---|",
    ]
    for cat in CATEGORIES:
        m = report.per_class[cat.index]
        flag = " (degenerate)" if m.degenerate else ""
        lines.append(
            f"| {cat.display_name}{flag} | {classifier_name} | {m.precision:.2f} "
            f"| {m.recall:.2f} | {m.f1:.2f} |"
        )
    lines.append("")
    lines.append(f"Overall accuracy: {report.overall_accuracy:.2%}")
    lines.append(f"Macro F1: {report.macro_f1:.4f} (weighted {report.weighted_f1:.4f})")
    if report.macro_auc is not None:
        lines.append(f"Macro AUC: {report.macro_auc:.4f}")
    md_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(md_path)
    return written

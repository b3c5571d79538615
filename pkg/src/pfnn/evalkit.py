"""Classifier evaluation: confusion matrix, per-class precision/recall/F1,
macro and dispersion aggregates, overfit deltas, and one-vs-rest ROC/AUC.

Zero-denominator rates (a class with no predictions or no instances)
yield 0 and are flagged as degenerate rather than raising; dispersion
statistics are population standard deviations across the classes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TABLE1_FIELDS = ("model", "accuracy", "loss", "macro_f1", "f1_std", "recall_min",
                 "recall_std", "overfit_acc", "overfit_f1", "overfit_loss")
TABLE2_FIELDS = ("model", "f1_mean", "f1_std", "recall_mean", "recall_std")
SCATTER_PAIRS = (
    ("accuracy", "loss"),
    ("macro_f1", "recall_min"),
    ("recall_std", "overfit_loss"),
    ("f1_mean", "recall_mean"),
)


def confusion(labels, predictions, num_classes: int) -> np.ndarray:
    """Counts[t][p] of samples with true class t predicted as p."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape or labels.ndim != 1:
        raise ValueError(f"labels {labels.shape} and predictions {predictions.shape} must be equal-length 1-D")
    for name, values in (("labels", labels), ("predictions", predictions)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise ValueError(f"{name} contain values outside [0, {num_classes})")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (labels, predictions), 1)
    return matrix


@dataclass
class ClassificationStats:
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    support: tuple[int, ...]
    accuracy: float
    macro_f1: float
    f1_mean: float
    f1_std: float
    recall_mean: float
    recall_min: float
    recall_std: float
    degenerate: tuple[str, ...]


def classification_report(matrix: np.ndarray) -> ClassificationStats:
    matrix = np.asarray(matrix)
    total = int(matrix.sum())
    if total < 1:
        raise ValueError("classification_report: no samples")
    diag = np.diag(matrix).astype(np.float64)
    col_sums = matrix.sum(axis=0).astype(np.float64)
    row_sums = matrix.sum(axis=1).astype(np.float64)
    degenerate: list[str] = []
    precision = np.zeros(matrix.shape[0])
    recall = np.zeros(matrix.shape[0])
    f1 = np.zeros(matrix.shape[0])
    for c in range(matrix.shape[0]):
        if col_sums[c] > 0:
            precision[c] = diag[c] / col_sums[c]
        else:
            degenerate.append(f"precision[{c}]")
        if row_sums[c] > 0:
            recall[c] = diag[c] / row_sums[c]
        else:
            degenerate.append(f"recall[{c}]")
        if precision[c] + recall[c] > 0:
            f1[c] = 2.0 * precision[c] * recall[c] / (precision[c] + recall[c])
        else:
            degenerate.append(f"f1[{c}]")
    return ClassificationStats(
        precision=tuple(precision.tolist()),
        recall=tuple(recall.tolist()),
        f1=tuple(f1.tolist()),
        support=tuple(int(s) for s in row_sums),
        accuracy=float(diag.sum() / total),
        macro_f1=float(f1.mean()),
        f1_mean=float(f1.mean()),
        f1_std=float(f1.std()),
        recall_mean=float(recall.mean()),
        recall_min=float(recall.min()),
        recall_std=float(recall.std()),
        degenerate=tuple(degenerate),
    )


@dataclass
class RocCurve:
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    thresholds: tuple[float, ...]
    auc: float


def roc_curve(scores, positives) -> RocCurve:
    """One-vs-rest ROC by sweeping the distinct scores descending.

    Equal scores collapse into one threshold step, which makes the
    trapezoidal AUC equal to pairwise concordance with ties counted half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ValueError("scores and positives must be equal-length 1-D")
    pos_total = int(positives.sum())
    neg_total = int(positives.size - pos_total)
    if pos_total == 0 or neg_total == 0:
        raise ValueError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = positives[order]
    fpr = [0.0]
    tpr = [0.0]
    thresholds = [float("inf")]
    tp = fp = 0
    i = 0
    n = scores.size
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int(sorted_pos[i:j].sum())
        fp += (j - i) - int(sorted_pos[i:j].sum())
        fpr.append(fp / neg_total)
        tpr.append(tp / pos_total)
        thresholds.append(float(sorted_scores[i]))
        i = j
    auc = 0.0
    for k in range(1, len(fpr)):
        auc += (fpr[k] - fpr[k - 1]) * (tpr[k] + tpr[k - 1]) / 2.0
    return RocCurve(tuple(fpr), tuple(tpr), tuple(thresholds), float(auc))


@dataclass
class EvalReport:
    """Everything the tables and figures need for one model on one split."""

    model: str
    split: str
    class_names: tuple[str, ...]
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    support: tuple[int, ...]
    accuracy: float
    loss: float
    macro_f1: float
    f1_mean: float
    f1_std: float
    recall_mean: float
    recall_min: float
    recall_std: float
    degenerate: tuple[str, ...] = ()
    roc: dict[str, RocCurve | None] = field(default_factory=dict)
    overfit_acc: float | None = None
    overfit_f1: float | None = None
    overfit_loss: float | None = None


def build_report(model: str, split: str, labels, predictions, probs, loss: float,
                 class_names) -> EvalReport:
    """Assemble the full report; per-class ROC is skipped (None) for any
    class that is all-positive or all-negative on this split."""
    class_names = tuple(class_names)
    matrix = confusion(labels, predictions, len(class_names))
    stats = classification_report(matrix)
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    roc: dict[str, RocCurve | None] = {}
    for c, name in enumerate(class_names):
        is_c = labels == c
        if 0 < int(is_c.sum()) < labels.size:
            roc[name] = roc_curve(probs[:, c], is_c)
        else:
            roc[name] = None
    return EvalReport(
        model=model, split=split, class_names=class_names,
        precision=stats.precision, recall=stats.recall, f1=stats.f1, support=stats.support,
        accuracy=stats.accuracy, loss=float(loss), macro_f1=stats.macro_f1,
        f1_mean=stats.f1_mean, f1_std=stats.f1_std, recall_mean=stats.recall_mean,
        recall_min=stats.recall_min, recall_std=stats.recall_std,
        degenerate=stats.degenerate, roc=roc,
    )


def overfit_deltas(train_report: EvalReport, test_report: EvalReport) -> tuple[float, float, float]:
    """(train_acc - test_acc, train_macro_f1 - test_macro_f1, test_loss - train_loss).

    The loss delta is oriented test minus train so that, like the other
    two, a large positive value reads as overfitting.
    """
    return (
        train_report.accuracy - test_report.accuracy,
        train_report.macro_f1 - test_report.macro_f1,
        test_report.loss - train_report.loss,
    )


# ---------------------------------------------------------------------------
# serialization


def report_to_dict(report: EvalReport) -> dict:
    out = asdict(report)
    out["roc"] = {
        name: (None if curve is None else asdict(curve)) for name, curve in report.roc.items()
    }
    return out


def report_from_dict(data: dict) -> EvalReport:
    roc = {
        name: (None if curve is None else RocCurve(
            tuple(curve["fpr"]), tuple(curve["tpr"]), tuple(curve["thresholds"]), curve["auc"],
        ))
        for name, curve in data["roc"].items()
    }
    return EvalReport(
        model=data["model"], split=data["split"], class_names=tuple(data["class_names"]),
        precision=tuple(data["precision"]), recall=tuple(data["recall"]), f1=tuple(data["f1"]),
        support=tuple(data["support"]), accuracy=data["accuracy"], loss=data["loss"],
        macro_f1=data["macro_f1"], f1_mean=data["f1_mean"], f1_std=data["f1_std"],
        recall_mean=data["recall_mean"], recall_min=data["recall_min"],
        recall_std=data["recall_std"], degenerate=tuple(data["degenerate"]),
        roc=roc, overfit_acc=data["overfit_acc"], overfit_f1=data["overfit_f1"],
        overfit_loss=data["overfit_loss"],
    )


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report_to_dict(report), indent=2) + "\n", encoding="utf-8")


def parse_report(path) -> EvalReport:
    return report_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def write_table1(reports, path) -> None:
    """Global performance and overfitting table, one row per model."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE1_FIELDS)
        for r in reports:
            writer.writerow([r.model, _fmt(r.accuracy), _fmt(r.loss), _fmt(r.macro_f1),
                             _fmt(r.f1_std), _fmt(r.recall_min), _fmt(r.recall_std),
                             _fmt(r.overfit_acc), _fmt(r.overfit_f1), _fmt(r.overfit_loss)])


def write_table2(reports, path) -> None:
    """Inter-class equity and dispersion table, one row per model."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE2_FIELDS)
        for r in reports:
            writer.writerow([r.model, _fmt(r.f1_mean), _fmt(r.f1_std),
                             _fmt(r.recall_mean), _fmt(r.recall_std)])


def write_scatter_pairs(reports, path) -> None:
    """Scatter-ready (x, y) rows for the metric pairs the figures plot."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "pair", "x", "y"])
        for r in reports:
            values = report_to_dict(r)
            for x_name, y_name in SCATTER_PAIRS:
                x, y = values[x_name], values[y_name]
                if x is None or y is None:
                    continue
                writer.writerow([r.model, f"{x_name}_vs_{y_name}", _fmt(x), _fmt(y)])


def write_roc_csv(report: EvalReport, out_dir) -> list[Path]:
    """One fpr/tpr/threshold CSV per class that has a defined curve."""
    out_dir = Path(out_dir)
    paths = []
    for name, curve in report.roc.items():
        if curve is None:
            continue
        path = out_dir / f"roc_{report.split}_{name}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "tpr", "threshold", "auc"])
            for fpr, tpr, thr in zip(curve.fpr, curve.tpr, curve.thresholds):
                writer.writerow([repr(fpr), repr(tpr), repr(thr), repr(curve.auc)])
        paths.append(path)
    return paths

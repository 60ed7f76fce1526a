"""Classification metrics computed from an explicit confusion matrix."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64, rows = true class, cols = predicted

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        if self.counts.shape != other.counts.shape:
            raise ValueError(f"cannot merge confusion matrices of shapes {self.counts.shape} and {other.counts.shape}")
        return ConfusionMatrix(self.counts + other.counts)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    mean_loss: float
    n: int
    micro_f1: float = 0.0

    def as_dict(self):
        return asdict(self)


def predict(logits):
    """Argmax per row; ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)


def confusion_from_predictions(true_labels, predicted_labels, num_classes):
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError(f"label arrays must be 1-D and equal length, got {t.shape} and {p.shape}")
    if t.size == 0:
        raise ValueError("need at least one (true, predicted) pair")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} label out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def per_class_scores(cm):
    """Per-class precision, recall, F1 with 0/0 taken as 0."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    pred = c.sum(axis=0)
    true = c.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def macro_metrics(cm, losses, average="macro"):
    """Summarize a confusion matrix.

    ``average="macro"`` takes the unweighted mean over classes that occur in the
    true labels; ``"micro"`` pools counts (so P = R = F1 = accuracy).
    """
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    losses = np.asarray(losses, dtype=np.float64)
    accuracy = float(np.trace(cm.counts)) / total
    mean_loss = float(losses.mean()) if losses.size else 0.0
    if average == "micro":
        return MetricsReport(accuracy, accuracy, accuracy, accuracy, mean_loss, total, accuracy)
    if average != "macro":
        raise ValueError(f"unknown averaging {average!r}")
    precision, recall, f1 = per_class_scores(cm)
    present = cm.counts.sum(axis=1) > 0
    k = int(present.sum())
    # fsum is correctly rounded, so the mean does not depend on class order
    return MetricsReport(
        accuracy=accuracy,
        macro_precision=math.fsum(precision[present]) / k,
        macro_recall=math.fsum(recall[present]) / k,
        macro_f1=math.fsum(f1[present]) / k,
        mean_loss=mean_loss,
        n=total,
        micro_f1=accuracy,
    )


def mean_report(reports):
    """Unweighted mean of several reports (used for across-client averages)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    fields = ("accuracy", "macro_precision", "macro_recall", "macro_f1", "mean_loss", "micro_f1")
    vals = {f: float(np.mean([getattr(r, f) for r in reports])) for f in fields}
    return MetricsReport(n=sum(r.n for r in reports), **vals)

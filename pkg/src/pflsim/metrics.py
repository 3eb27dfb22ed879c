"""Confusion matrix and macro-averaged classification metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, LabelError, UndefinedMetricsError


@dataclass(frozen=True)
class MetricsReport:
    confusion: np.ndarray  # rows = truth, cols = prediction
    accuracy: float
    precision: float
    recall: float
    f1: float
    support: np.ndarray
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def as_percent(self) -> dict[str, float]:
        """Metrics as percentages rounded to two decimals, the reporting convention of result tables."""
        return {k: round(100.0 * getattr(self, k), 2) for k in ("accuracy", "precision", "recall", "f1")}

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support.tolist(),
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(truth, predictions, num_classes: int) -> np.ndarray:
    t = np.asarray(truth, dtype=np.int64).ravel()
    p = np.asarray(predictions, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise DimensionError(f"truth has {t.size} entries, predictions {p.size}")
    for name, arr in (("truth", t), ("prediction", p)):
        bad = np.flatnonzero((arr < 0) | (arr >= num_classes))
        if bad.size:
            raise LabelError(f"{name} index {int(arr[bad[0]])} at position {int(bad[0])} outside [0, {num_classes})")
    flat = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def macro_metrics(confusion) -> MetricsReport:
    """Accuracy plus macro precision/recall/F1.

    Undefined per-class ratios count as 0; classes without support are left
    out of the macro means.
    """
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise DimensionError(f"confusion matrix must be square, got {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion matrix has negative counts")
    total = cm.sum()
    if total == 0:
        raise UndefinedMetricsError("confusion matrix is all zeros")
    cm = cm.astype(np.int64)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = _safe_div(tp, predicted.astype(np.float64))
    recall = _safe_div(tp, support.astype(np.float64))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    mask = support > 0
    return MetricsReport(
        confusion=cm,
        accuracy=float(tp.sum() / total),
        precision=float(precision[mask].mean()),
        recall=float(recall[mask].mean()),
        f1=float(f1[mask].mean()),
        support=support,
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_f1=f1,
    )


def evaluate_predictions(truth, predictions, num_classes: int) -> MetricsReport:
    return macro_metrics(confusion_matrix(truth, predictions, num_classes))

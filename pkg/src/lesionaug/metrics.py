"""Confusion-matrix metrics: BMA and one-vs-rest macro sensitivity, specificity, F1.

Zero-denominator convention: a precision, recall or specificity with an empty
denominator counts as 0. Balanced accuracy and sensitivity additionally require
every class to be present in the ground truth.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import MetricError, ValidationError


def confusion(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValidationError(f"label lists differ in length: {y_true.shape} vs {y_pred.shape}")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValidationError(f"{name} label outside 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValidationError("confusion matrix must be square")
    if (cm < 0).any():
        raise ValidationError("confusion matrix has negative counts")
    return cm.astype(np.float64)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def per_class_recall(cm: np.ndarray) -> np.ndarray:
    cm = _check(cm)
    support = cm.sum(axis=1)
    empty = np.flatnonzero(support == 0)
    if empty.size:
        raise MetricError(f"class {int(empty[0])} has no true instances")
    return np.diag(cm) / support


def balanced_accuracy(cm: np.ndarray) -> float:
    return float(per_class_recall(cm).mean())


def one_vs_rest(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-class TP, FP, FN, TN."""
    cm = _check(cm)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = cm.sum() - tp - fp - fn
    return tp, fp, fn, tn


def macro_sensitivity(cm: np.ndarray) -> float:
    return balanced_accuracy(cm)


def macro_specificity(cm: np.ndarray) -> float:
    per_class_recall(cm)
    _, fp, _, tn = one_vs_rest(cm)
    return float(_safe_div(tn, tn + fp).mean())


def macro_f1(cm: np.ndarray) -> float:
    per_class_recall(cm)
    tp, fp, fn, _ = one_vs_rest(cm)
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    return float(_safe_div(2 * precision * recall, precision + recall).mean())


@dataclass
class EvaluationReport:
    bma: float
    macro_f1: float
    macro_sensitivity: float
    macro_specificity: float
    per_class_recall: list[float]
    confusion: list[list[int]]
    fold: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> EvaluationReport:
        return cls(**data)


def evaluate(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int, fold: int | None = None) -> EvaluationReport:
    cm = confusion(y_true, y_pred, num_classes)
    return EvaluationReport(
        bma=balanced_accuracy(cm),
        macro_f1=macro_f1(cm),
        macro_sensitivity=macro_sensitivity(cm),
        macro_specificity=macro_specificity(cm),
        per_class_recall=per_class_recall(cm).tolist(),
        confusion=cm.tolist(),
        fold=fold,
    )


METRIC_NAMES = ("bma", "macro_f1", "macro_sensitivity", "macro_specificity")


def aggregate(reports: Sequence[EvaluationReport]) -> dict:
    """Arithmetic mean of every metric (and per-class recall) across folds."""
    if not reports:
        raise ValidationError("no reports to aggregate")
    out = {name: float(np.mean([getattr(r, name) for r in reports])) for name in METRIC_NAMES}
    out["per_class_recall"] = np.mean([r.per_class_recall for r in reports], axis=0).tolist()
    out["folds"] = len(reports)
    return out

"""Classification metrics and correlation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedCorrelationError(ValueError):
    pass


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    confusion: np.ndarray  # (K, K); rows are true classes, columns predictions
    per_class_f1: np.ndarray


def confusion_matrix(labels, preds, K: int) -> np.ndarray:
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


def compute_metrics(labels, preds, K: int) -> Metrics:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("metrics need at least one trial")
    cm = confusion_matrix(labels, preds, K)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2tp + fp + fn
    # a class absent from both truth and predictions scores 0
    f1 = np.divide(2.0 * tp, denom, out=np.zeros(K), where=denom > 0)
    return Metrics(float(tp.sum() / cm.sum()), float(f1.mean()), cm, f1)


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson_r needs two equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise UndefinedCorrelationError("need at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("zero variance")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))

"""Classification metrics computed from scores and labels alone.

AUC is the macro one-vs-rest area under the ROC curve (trapezoidal), AP the
macro one-vs-rest area under the precision-recall curve with step-wise
interpolation, and kappa the unweighted Cohen statistic on the confusion
matrix. Classes that never occur in the labels are skipped from the macro
averages with a warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict

import numpy as np


@dataclass
class MetricsReport:
    auc: float
    ap: float
    accuracy: float
    kappa: float

    def as_dict(self) -> dict:
        return asdict(self)

    def __str__(self) -> str:
        return (
            f"AUC {100 * self.auc:.2f}  AP {100 * self.ap:.2f}  "
            f"Acc {100 * self.accuracy:.2f}  Kappa {100 * self.kappa:.2f}"
        )


def _ranked_counts(scores: np.ndarray, positive: np.ndarray):
    """Cumulative true/false positives at each distinct descending threshold."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = positive[order].astype(np.float64)
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(1.0 - y)[last_of_group]
    return tp, fp


def binary_roc_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    tp, fp = _ranked_counts(scores, positive)
    if tp[-1] == 0 or fp[-1] == 0:
        raise ValueError("ROC AUC undefined without both positives and negatives")
    tpr = np.r_[0.0, tp / tp[-1]]
    fpr = np.r_[0.0, fp / fp[-1]]
    return float(np.trapz(tpr, fpr))


def binary_average_precision(scores: np.ndarray, positive: np.ndarray) -> float:
    tp, fp = _ranked_counts(scores, positive)
    if tp[-1] == 0:
        raise ValueError("average precision undefined without positives")
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _macro(fn, y_true: np.ndarray, scores: np.ndarray, what: str) -> float:
    values = []
    for c in range(scores.shape[1]):
        pos = y_true == c
        if not pos.any() or pos.all():
            warnings.warn(
                f"class {c} {'absent from' if not pos.any() else 'fills'} labels; "
                f"skipped in macro {what}",
                RuntimeWarning,
                stacklevel=3,
            )
            continue
        values.append(fn(scores[:, c], pos))
    if not values:
        raise ValueError(f"no class usable for macro {what}")
    return float(np.mean(values))


def multiclass_auc(y_true: np.ndarray, scores: np.ndarray) -> float:
    return _macro(binary_roc_auc, np.asarray(y_true), np.asarray(scores), "AUC")


def multiclass_ap(y_true: np.ndarray, scores: np.ndarray) -> float:
    return _macro(binary_average_precision, np.asarray(y_true), np.asarray(scores), "AP")


def accuracy_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    return float(np.mean(y_true == y_pred))


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def cohen_kappa(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    cm = confusion_matrix(y_true, y_pred, n_classes).astype(np.float64)
    n = cm.sum()
    po = np.trace(cm) / n
    pe = float(cm.sum(axis=1) @ cm.sum(axis=0)) / (n * n)
    if pe >= 1.0:  # single-class degenerate case
        return 1.0 if po >= 1.0 else 0.0
    return float((po - pe) / (1.0 - pe))


def compute_report(y_true: np.ndarray, scores: np.ndarray) -> MetricsReport:
    """All four metrics from grade labels and per-class scores [n, K]."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores)
    y_pred = scores.argmax(axis=1)
    return MetricsReport(
        auc=multiclass_auc(y_true, scores),
        ap=multiclass_ap(y_true, scores),
        accuracy=accuracy_score(y_true, y_pred),
        kappa=cohen_kappa(y_true, y_pred, scores.shape[1]),
    )


def aggregate_reports(reports: list[MetricsReport]) -> dict:
    """Arithmetic mean and population standard deviation per metric."""
    out = {}
    for key in ("auc", "ap", "accuracy", "kappa"):
        vals = np.array([getattr(r, key) for r in reports], np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out

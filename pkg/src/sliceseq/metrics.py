"""Binary classification metrics, written out from the definitions.

AUC comes from the rank formulation of the Mann-Whitney statistic with
average ranks for ties; in float64 this equals the all-pairs count (ties
worth 0.5) exactly, because every average rank is a multiple of 0.5 and
both numerators stay integer-valued in half units well below 2^53.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape or s.size == 0:
        raise DataError("scores and labels must be equal-length and non-empty")
    if not np.all(np.isfinite(s)):
        raise DataError("non-finite score")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0/1")
    return s, y.astype(np.int64)


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties 0.5."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC undefined: only one class present")
    ranks = average_ranks(s)
    r_pos = float(ranks[y == 1].sum())
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def confusion(scores, labels, threshold: float = 0.5) -> dict[str, int]:
    """Counts with predicted positive = score >= threshold."""
    s, y = _validate(scores, labels)
    pred = s >= threshold
    return {
        "tp": int(np.sum(pred & (y == 1))),
        "fp": int(np.sum(pred & (y == 0))),
        "tn": int(np.sum(~pred & (y == 0))),
        "fn": int(np.sum(~pred & (y == 1))),
    }


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass
class MetricsReport:
    auc: float | None  # None when only one label class is present
    accuracy: float
    sensitivity: float
    specificity: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "f1": self.f1,
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "threshold": self.threshold,
        }


def report(scores, labels, threshold: float = 0.5) -> MetricsReport:
    c = confusion(scores, labels, threshold)
    tp, fp, tn, fn = c["tp"], c["fp"], c["tn"], c["fn"]
    try:
        auc_value = auc(scores, labels)
    except DataError:
        auc_value = None
    return MetricsReport(
        auc=auc_value,
        accuracy=_ratio(tp + tn, tp + fp + tn + fn),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        threshold=threshold,
    )

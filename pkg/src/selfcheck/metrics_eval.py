"""Confusion accounting for alarms, advice accuracy, and rank correlation.

An alarm is a positive; ground-truth positive is a genuine misclassification
(label != prediction). Zero-denominator rates are defined as 0 so degenerate
splits never produce NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class RateReport:
    tpr: float
    fpr: float
    f1: float

    def as_percentages(self) -> tuple[float, float, float]:
        """(TPR, FPR, F1) in percent, rounded half-even to 2 decimals."""
        return (
            round(self.tpr * 100, 2),
            round(self.fpr * 100, 2),
            round(self.f1 * 100, 2),
        )


def _alarm_vector(verdicts) -> np.ndarray:
    if isinstance(verdicts, np.ndarray) and verdicts.dtype == bool:
        return verdicts
    return np.array(
        [v.alarm if hasattr(v, "alarm") else bool(v) for v in verdicts], dtype=bool
    )


def confusion(verdicts, labels, predictions) -> ConfusionCounts:
    """Tally alarms against true misbehavior (label != prediction)."""
    alarms = _alarm_vector(verdicts)
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if not (len(alarms) == len(labels) == len(predictions)):
        raise ValueError(
            f"length mismatch: {len(alarms)} verdicts, {len(labels)} labels, "
            f"{len(predictions)} predictions"
        )
    mis = labels != predictions
    return ConfusionCounts(
        tp=int(np.count_nonzero(alarms & mis)),
        fp=int(np.count_nonzero(alarms & ~mis)),
        tn=int(np.count_nonzero(~alarms & ~mis)),
        fn=int(np.count_nonzero(~alarms & mis)),
    )


def rates(c: ConfusionCounts) -> RateReport:
    """TPR = TP/(TP+FN), FPR = FP/(TN+FP), F1 = 2TP/(2TP+FN+FP); 0/0 -> 0."""
    tpr = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    fpr = c.fp / (c.tn + c.fp) if c.tn + c.fp else 0.0
    f1_den = 2 * c.tp + c.fn + c.fp
    f1 = 2 * c.tp / f1_den if f1_den else 0.0
    return RateReport(tpr=tpr, fpr=fpr, f1=f1)


def advice_accuracy(verdicts, labels, predictions) -> float:
    """Accuracy of the composite predictor: advice where alarmed, else y_hat."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    composite = predictions.copy()
    for i, v in enumerate(verdicts):
        if v.alarm:
            composite[i] = v.advice
    if len(labels) == 0:
        return 0.0
    return float(np.count_nonzero(composite == labels)) / len(labels)


def spearman_consistency(correctness, delta) -> tuple[float, float]:
    """Spearman rho between prediction correctness and layer-consistency delta.

    Average ranks over ties; the p-value uses the large-sample t approximation
    with n-2 degrees of freedom.
    """
    x = np.asarray(correctness, dtype=np.float64)
    y = np.asarray(delta, dtype=np.float64)
    n = len(x)
    if n < 3 or len(y) != n:
        raise ValueError("need two equal-length vectors with n >= 3")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("rank correlation undefined for a constant vector")

    rx = stats.rankdata(x) - (n + 1) / 2
    ry = stats.rankdata(y) - (n + 1) / 2
    num = float(np.dot(rx, ry))
    sxx = float(np.dot(rx, rx))
    syy = float(np.dot(ry, ry))
    # Equal rank spreads (perfect/reversed alignment) take the exact path so
    # rho comes out as exactly +/-1.
    den = sxx if sxx == syy else float(np.sqrt(sxx * syy))
    rho = max(-1.0, min(1.0, num / den))

    if abs(rho) >= 1.0:
        return rho, 0.0
    t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
    p = 2.0 * float(stats.t.sf(abs(t), n - 2))
    return rho, p

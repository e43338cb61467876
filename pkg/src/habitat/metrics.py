"""Binary classification metrics: confusion counts, precision/recall/F1, ROC, AUC.

Undefined ratios (zero denominators) are returned as ``None`` rather than 0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise MetricsError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _binary(v, what: str) -> np.ndarray:
    a = np.asarray(v)
    if a.ndim != 1:
        raise MetricsError(f"{what} must be one-dimensional")
    if a.size and not np.isin(a, (0, 1)).all():
        raise MetricsError(f"{what} must contain only 0 and 1")
    return a.astype(np.int64)


def confusion(labels, preds) -> ConfusionMatrix:
    y = _binary(labels, "labels")
    p = _binary(preds, "preds")
    if len(y) != len(p):
        raise MetricsError(f"length mismatch: {len(y)} labels vs {len(p)} predictions")
    if len(y) == 0:
        raise MetricsError("need at least one sample")
    return ConfusionMatrix(
        tp=int(np.sum((y == 1) & (p == 1))),
        fp=int(np.sum((y == 0) & (p == 1))),
        tn=int(np.sum((y == 0) & (p == 0))),
        fn=int(np.sum((y == 1) & (p == 0))),
    )


def precision_recall_f1(cm: ConfusionMatrix):
    """(precision, recall, f1); each is None when its denominator is zero."""
    p = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else None
    r = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else None
    if p is None or r is None or p + r == 0:
        f1 = None
    else:
        f1 = 2 * p * r / (p + r)
    return p, r, f1


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def __len__(self):
        return len(self.fpr)

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


def roc_curve(labels, scores) -> RocCurve:
    """ROC points at every distinct score, highest first.

    A point at threshold t counts ``score >= t`` as positive; tied scores move
    together. The curve starts at (0, 0) with threshold +inf and ends at (1, 1).
    """
    y = _binary(labels, "labels")
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise MetricsError("labels and scores differ in length")
    pos = int(y.sum())
    neg = len(y) - pos
    if pos == 0 or neg == 0:
        raise MetricsError("ROC needs both classes present")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    # last index of each run of equal scores
    last = np.r_[np.flatnonzero(s_sorted[1:] != s_sorted[:-1]), len(s) - 1]
    tp = np.cumsum(y_sorted)[last]
    fp = (last + 1) - tp
    fpr = np.r_[0.0, fp / neg]
    tpr = np.r_[0.0, tp / pos]
    thr = np.r_[np.inf, s_sorted[last]]
    if fpr[-1] != 1.0 or tpr[-1] != 1.0:
        fpr = np.r_[fpr, 1.0]
        tpr = np.r_[tpr, 1.0]
        thr = np.r_[thr, -np.inf]
    return RocCurve(fpr, tpr, thr)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the ROC curve."""
    x, y = curve.fpr, curve.tpr
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def roc_auc(labels, scores) -> float:
    return auc(roc_curve(labels, scores))


@dataclass(frozen=True)
class Report:
    precision: float | None
    recall: float | None
    f1: float | None
    auc: float | None
    confusion: ConfusionMatrix
    threshold: float = 0.5

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)

    def to_text(self, delimiter: str = "\t") -> str:
        def fmt(v):
            return "undefined" if v is None else repr(v)
        rows = [("precision", fmt(self.precision)), ("recall", fmt(self.recall)),
                ("f1", fmt(self.f1)), ("auc", fmt(self.auc)),
                ("tp", str(self.confusion.tp)), ("fp", str(self.confusion.fp)),
                ("tn", str(self.confusion.tn)), ("fn", str(self.confusion.fn)),
                ("threshold", repr(self.threshold))]
        return "metric" + delimiter + "value\n" + "".join(
            f"{k}{delimiter}{v}\n" for k, v in rows)


def evaluate(labels, scores, threshold: float = 0.5) -> Report:
    """Full report for probability scores classified with ``score >= threshold``."""
    scores = np.asarray(scores, dtype=np.float64)
    preds = (scores >= threshold).astype(np.int64)
    cm = confusion(labels, preds)
    p, r, f1 = precision_recall_f1(cm)
    y = np.asarray(labels)
    area = roc_auc(y, scores) if 0 < y.sum() < len(y) else None
    return Report(p, r, f1, area, cm, threshold)

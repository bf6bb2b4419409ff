"""Confusion matrices and the detection metrics reported for each dataset.

All rates are percentages. A zero denominator yields 0 and records the
metric name in ``degenerate`` instead of returning NaN.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import InputError

__all__ = [
    "ConfusionMatrix",
    "BinaryMetrics",
    "ClassStats",
    "EvalReport",
    "confusion",
    "binary_metrics",
    "per_class_stats",
    "weighted_f1",
    "roc_auc",
    "pr_auc",
    "build_report",
    "report_to_json",
    "report_to_csv_row",
]


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed ``[true_label, predicted_label]``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.int64)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
            raise InputError(f"confusion matrix must be square with n >= 2, got {m.shape}")
        if (m < 0).any():
            raise InputError("confusion counts must be non-negative")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_binary(cls, tn: int, fp: int, fn: int, tp: int) -> "ConfusionMatrix":
        return cls(np.array([[tn, fp], [fn, tp]], dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    @property
    def tn(self) -> int:
        return int(self._binary()[0, 0])

    @property
    def fp(self) -> int:
        return int(self._binary()[0, 1])

    @property
    def fn(self) -> int:
        return int(self._binary()[1, 0])

    @property
    def tp(self) -> int:
        return int(self._binary()[1, 1])

    def _binary(self) -> np.ndarray:
        if self.n_classes != 2:
            raise InputError("binary view needs a 2-class confusion matrix")
        return self.matrix

    def to_dict(self) -> dict:
        d = {"matrix": self.matrix.tolist()}
        if self.n_classes == 2:
            d.update(tn=self.tn, fp=self.fp, fn=self.fn, tp=self.tp)
        return d


class BinaryMetrics(NamedTuple):
    accuracy: float
    precision: float
    recall: float
    f1: float
    mcc: float
    degenerate: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ClassStats:
    label: int
    precision: float
    recall: float
    f1: float
    support: int


def _div(num: float, den: float, name: str, flags: List[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def confusion(labels: Sequence[int], predictions: Sequence[int], n_classes: int) -> ConfusionMatrix:
    y = np.asarray(labels, dtype=np.int64).ravel()
    p = np.asarray(predictions, dtype=np.int64).ravel()
    if y.shape != p.shape:
        raise InputError(f"length mismatch: {y.size} labels vs {p.size} predictions")
    if y.size == 0:
        raise InputError("cannot build a confusion matrix from empty inputs")
    for name, arr in (("label", y), ("prediction", p)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise InputError(f"{name} outside 0..{n_classes - 1}")
    m = np.bincount(y * n_classes + p, minlength=n_classes * n_classes)
    return ConfusionMatrix(m.reshape(n_classes, n_classes))


def binary_metrics(cm: ConfusionMatrix) -> BinaryMetrics:
    tn, fp, fn, tp = cm.tn, cm.fp, cm.fn, cm.tp
    flags: List[str] = []
    total = tn + fp + fn + tp
    accuracy = _div(tp + tn, total, "accuracy", flags)
    precision = _div(tp, tp + fp, "precision", flags)
    recall = _div(tp, tp + fn, "recall", flags)
    f1 = _div(2 * precision * recall, precision + recall, "f1", flags)
    den = math.sqrt(float(tp + fp) * float(tp + fn) * float(tn + fp) * float(tn + fn))
    mcc = _div(float(tp) * tn - float(fp) * fn, den, "mcc", flags)
    return BinaryMetrics(100 * accuracy, 100 * precision, 100 * recall, 100 * f1, 100 * mcc,
                         tuple(flags))


def per_class_stats(cm: ConfusionMatrix) -> List[ClassStats]:
    """One-vs-rest precision/recall/F1 (percent) and support per class."""
    m = cm.matrix
    out = []
    for c in range(cm.n_classes):
        tp = int(m[c, c])
        predicted = int(m[:, c].sum())
        support = int(m[c, :].sum())
        flags: List[str] = []
        p = _div(tp, predicted, "precision", flags)
        r = _div(tp, support, "recall", flags)
        f = _div(2 * p * r, p + r, "f1", flags)
        out.append(ClassStats(c, 100 * p, 100 * r, 100 * f, support))
    return out


def weighted_f1(cm: ConfusionMatrix) -> float:
    """Support-weighted mean of one-vs-rest F1, in percent."""
    stats = per_class_stats(cm)
    total = sum(s.support for s in stats)
    if total == 0:
        return 0.0
    return sum(s.f1 * s.support for s in stats) / total


def _check_scores(labels, scores):
    y = np.asarray(labels).ravel().astype(np.int64)
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise InputError(f"length mismatch: {y.size} labels vs {s.size} scores")
    if not np.isin(y, (0, 1)).all():
        raise InputError("AUC needs binary labels in {0, 1}")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise InputError("AUC needs both classes present")
    return y, s


def roc_auc(labels, scores) -> float:
    """Mann-Whitney rank statistic: P(random positive outscores random negative), ties 1/2."""
    y, s = _check_scores(labels, scores)
    ranks = rankdata(s)  # average ranks handle ties
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u / (n_pos * n_neg)


def pr_auc(labels, scores) -> float:
    """Average precision: sum over distinct thresholds of (R_k - R_{k-1}) * P_k."""
    y, s = _check_scores(labels, scores)
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # last index of each block of tied scores
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], y.size - 1]
    tp = tp[last]
    fp = fp[last]
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    prev_recall = np.r_[0.0, recall[:-1]]
    return 100.0 * float(np.sum((recall - prev_recall) * precision))


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    weighted_f1: float
    mcc: float
    roc_auc: Optional[float]
    pr_auc: Optional[float]
    per_class: List[ClassStats] = field(default_factory=list)
    degenerate: Tuple[str, ...] = ()

    def to_dict(self, decimals: Optional[int] = 2) -> dict:
        def r(x):
            if x is None or decimals is None:
                return x
            return round(float(x), decimals)

        return {
            "confusion": self.confusion.to_dict(),
            "accuracy": r(self.accuracy),
            "precision": r(self.precision),
            "recall": r(self.recall),
            "f1": r(self.f1),
            "weighted_f1": r(self.weighted_f1),
            "mcc": r(self.mcc),
            "roc_auc": r(self.roc_auc),
            "pr_auc": r(self.pr_auc),
            "per_class": [
                {"label": c.label, "precision": r(c.precision), "recall": r(c.recall),
                 "f1": r(c.f1), "support": c.support}
                for c in self.per_class
            ],
            "degenerate": list(self.degenerate),
        }


def build_report(labels, predictions, n_classes: int, scores=None) -> EvalReport:
    """Full report. ``scores`` are positive-class probabilities (binary only)."""
    cm = confusion(labels, predictions, n_classes)
    stats = per_class_stats(cm)
    flags: List[str] = []
    if n_classes == 2:
        bm = binary_metrics(cm)
        acc, prec, rec, f1, mcc = bm[:5]
        flags.extend(bm.degenerate)
    else:
        acc = 100.0 * np.trace(cm.matrix) / cm.total
        prec = sum(s.precision * s.support for s in stats) / cm.total
        rec = sum(s.recall * s.support for s in stats) / cm.total
        f1 = weighted_f1(cm)
        mcc = _multiclass_mcc(cm, flags)
    auc = ap = None
    if scores is not None and n_classes == 2:
        y = np.asarray(labels)
        if 0 < y.sum() < y.size:
            auc = roc_auc(labels, scores)
            ap = pr_auc(labels, scores)
        else:
            flags.extend(["roc_auc", "pr_auc"])
    return EvalReport(cm, acc, prec, rec, f1, weighted_f1(cm), mcc, auc, ap, stats, tuple(flags))


def _multiclass_mcc(cm: ConfusionMatrix, flags: List[str]) -> float:
    # Gorodkin's R_K generalisation
    m = cm.matrix.astype(np.float64)
    s = m.sum()
    c = np.trace(m)
    t = m.sum(axis=1)
    p = m.sum(axis=0)
    num = c * s - t @ p
    den = math.sqrt((s * s - p @ p) * (s * s - t @ t))
    return 100.0 * _div(num, den, "mcc", flags)


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def report_to_csv_row(report: EvalReport, name: str = "") -> str:
    d = report.to_dict()
    cols = ["name", "accuracy", "precision", "recall", "f1", "weighted_f1", "mcc", "roc_auc", "pr_auc"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    w.writerow([name] + ["" if d[c] is None else d[c] for c in cols[1:]])
    return buf.getvalue()

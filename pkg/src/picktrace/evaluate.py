"""Classification and estimation-accuracy metrics (Pick is the positive class)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annotate import LabelSequence
from .errors import LengthMismatch, ZeroGroundTruth
from .ingest import PICK


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


@dataclass(frozen=True)
class PRFScores:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False  # some 0/0 ratio was mapped to 0


@dataclass
class AccuracyReport:
    """Per-cart relative-error accuracy of an estimated quantity."""

    per_cart_accuracy: np.ndarray  # percent, (1 - |gt - est| / gt) * 100
    relative_errors: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_cart_accuracy))

    @property
    def median(self) -> float:
        return float(np.median(self.per_cart_accuracy))

    @property
    def vmin(self) -> float:
        return float(np.min(self.per_cart_accuracy))

    @property
    def vmax(self) -> float:
        return float(np.max(self.per_cart_accuracy))

    @property
    def sd(self) -> float:
        if len(self.per_cart_accuracy) < 2:
            return 0.0
        return float(np.std(self.per_cart_accuracy, ddof=1))


def confusion(pred: LabelSequence, gt: LabelSequence) -> ConfusionCounts:
    if len(pred) != len(gt):
        raise LengthMismatch(f"pred has {len(pred)} labels, gt has {len(gt)}")
    p = pred.labels == PICK
    g = gt.labels == PICK
    return ConfusionCounts(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
        tn=int(np.sum(~p & ~g)),
    )


def precision_recall_f1(c: ConfusionCounts) -> PRFScores:
    """Standard P/R/F1; degenerate 0/0 ratios become 0 with a flag."""
    degenerate = False
    if c.tp + c.fp == 0:
        precision, degenerate = 0.0, True
    else:
        precision = c.tp / (c.tp + c.fp)
    if c.tp + c.fn == 0:
        recall, degenerate = 0.0, True
    else:
        recall = c.tp / (c.tp + c.fn)
    if precision + recall == 0:
        f1, degenerate = 0.0, True
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return PRFScores(precision, recall, f1, degenerate)


def estimation_accuracy(gt, est) -> AccuracyReport:
    """Mean relative-error accuracy of estimates against ground truth."""
    gt = np.asarray(gt, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if len(gt) != len(est):
        raise LengthMismatch(f"{len(gt)} ground-truth values vs {len(est)} estimates")
    if len(gt) == 0:
        raise ValueError("need at least one value")
    if np.any(gt <= 0):
        raise ZeroGroundTruth("ground-truth values must be positive")
    rel = np.abs(gt - est) / gt
    return AccuracyReport(per_cart_accuracy=(1.0 - rel) * 100.0, relative_errors=rel)


def mean_scores(folds, micro: bool = False) -> PRFScores:
    """Average fold metrics: macro (mean of fold scores) by default.

    ``micro=True`` pools the confusion counts across folds instead; pass
    (PRFScores, ConfusionCounts) pairs in that case.
    """
    if not folds:
        raise ValueError("need at least one fold")
    if micro:
        pooled = folds[0][1]
        for _, c in folds[1:]:
            pooled = pooled + c
        return precision_recall_f1(pooled)
    scores = [f[0] if isinstance(f, tuple) else f for f in folds]
    return PRFScores(
        precision=float(np.mean([s.precision for s in scores])),
        recall=float(np.mean([s.recall for s in scores])),
        f1=float(np.mean([s.f1 for s in scores])),
        degenerate=any(s.degenerate for s in scores),
    )


def ground_truth_efficiency(sessions, break_records=(), tray_records=(), **kwargs):
    """Efficiency reports computed from the sessions' own annotations.

    Same conventions as the prediction path (trim, break excision, tray
    counting); only the label source differs.
    """
    from .efficiency import compute_reports

    labels = []
    for s in sessions:
        if not s.labeled:
            raise ValueError(f"{s.session_id}: session has unlabeled samples")
        labels.append(LabelSequence(session_id=s.session_id, labels=s.activity))
    return compute_reports(sessions, labels, break_records, tray_records, **kwargs)

"""Classification metrics, ROC analysis and slide-level threshold selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError


def confusion(pred, true) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) for boolean-like label vectors."""
    p = np.asarray(pred).astype(bool).ravel()
    t = np.asarray(true).astype(bool).ravel()
    if p.shape != t.shape:
        raise DataError(f"prediction and truth lengths differ: {p.size} vs {t.size}")
    if p.size == 0:
        raise DataError("empty label vectors")
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    return tp, fp, fn, tn


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def precision_recall_f1_acc(pred, true) -> dict[str, float]:
    """Precision, recall, F1 and accuracy; an empty denominator gives 0."""
    tp, fp, fn, tn = confusion(pred, true)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "accuracy": (tp + tn) / (tp + fp + fn + tn),
    }


def tnr(pred, true) -> float:
    tp, fp, fn, tn = confusion(pred, true)
    if tn + fp == 0:
        raise DataError("true negative rate undefined: no negative samples")
    return tn / (tn + fp)


@dataclass
class RocCurve:
    """Operating points for the rule ``score >= threshold``.

    The first point has threshold +inf (nothing predicted positive); thresholds then
    run through the distinct scores in decreasing order, ending at (1, 1).
    """

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.tpr.tolist(), self.fpr.tolist()))


def roc_and_auc(scores, labels) -> RocCurve:
    """Threshold sweep over distinct scores with trapezoidal area.

    Tied scores move the curve along one diagonal segment, so the area equals the
    Mann-Whitney probability P(s+ > s-) + P(s+ = s-) / 2.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise DataError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], s.size - 1]
    tps = np.cumsum(y_sorted)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s_sorted[ends]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, tpr, fpr, auc)


def choose_cutoff(roc: RocCurve) -> float:
    """Cutoff maximising Youden's J = TPR - FPR.

    Among equally good vertices the lowest threshold wins. The returned value is
    the midpoint between that threshold and the next lower distinct score, so the
    training confusion matrix is unchanged while the margin to excluded scores is
    split evenly; with no lower score the threshold itself is returned.
    """
    finite = np.isfinite(roc.thresholds)
    if not finite.any():
        raise DataError("ROC curve has no finite thresholds")
    j = roc.tpr - roc.fpr
    j[~finite] = -np.inf
    best = np.flatnonzero(j == j.max())
    pick = int(best[-1])  # thresholds decrease along the curve
    thr = float(roc.thresholds[pick])
    if pick + 1 < len(roc.thresholds):
        return (thr + float(roc.thresholds[pick + 1])) / 2.0
    return thr


def wsi_decisions(counts, threshold: int) -> np.ndarray:
    """Slides with more than ``threshold`` positive patches are called positive."""
    return np.asarray(counts) > threshold


def select_threshold_T(counts, labels, strategy: str) -> int:
    """Pick the slide-level count threshold T from training slides.

    ``"I"``: smallest T with the highest accuracy.
    ``"II"``: smallest T with the highest true negative rate among thresholds that
    still flag at least one positive slide (recall > 0); if none does, the smallest
    T with the highest TNR overall.
    """
    c = np.asarray(counts, dtype=np.int64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if c.shape != y.shape or c.size == 0:
        raise DataError("counts and labels must be equal-length and nonempty")
    strategy = str(strategy).upper()
    if strategy not in ("I", "II"):
        raise ParameterError(f"unknown strategy {strategy!r}; use 'I' or 'II'")
    candidates = np.arange(0, int(c.max()) + 1)
    decided = c[None, :] > candidates[:, None]
    correct = decided == y[None, :]
    if strategy == "I":
        acc = correct.mean(axis=1)
        return int(candidates[np.flatnonzero(acc == acc.max())[0]])
    n_neg = int((~y).sum())
    tn = (~decided & ~y[None, :]).sum(axis=1)
    rate = tn / n_neg if n_neg else np.ones(len(candidates))
    tp = (decided & y[None, :]).sum(axis=1)
    ok = tp > 0
    pool = np.flatnonzero(ok) if ok.any() else np.arange(len(candidates))
    best = rate[pool].max()
    return int(candidates[pool[rate[pool] == best][0]])

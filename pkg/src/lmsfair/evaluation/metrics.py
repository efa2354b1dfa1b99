import numpy as np


class UndefinedMetricError(ValueError):
    """The metric is not defined for the given labels (e.g. a single class)."""


def auc_roc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic.

    Equals the fraction of (positive, negative) pairs ranked correctly, with
    tied scores counting one half. Computed from average ranks in
    O(n log n).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")

    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    # average 1-based rank over each run of tied scores
    boundaries = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(s)]))
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(s))
    ranks[order] = np.repeat(run_rank, ends - starts)

    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_counts(predictions, labels):
    p = np.asarray(predictions).astype(np.int64)
    t = np.asarray(labels).astype(np.int64)
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    tn = int(np.sum((p == 0) & (t == 0)))
    return tp, fp, fn, tn


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def weighted_f1(predictions, labels) -> float:
    """Per-class F1 averaged with weights equal to class support / n."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if len(labels) == 0:
        raise ValueError("weighted F1 of an empty set")
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must have equal length")
    tp, fp, fn, tn = confusion_counts(predictions, labels)
    n = tp + fp + fn + tn
    f1_pos = _f1(tp, fp, fn)
    f1_neg = _f1(tn, fn, fp)
    return ((tp + fn) * f1_pos + (tn + fp) * f1_neg) / n

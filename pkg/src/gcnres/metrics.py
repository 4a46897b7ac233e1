"""Classification metrics."""
from fractions import Fraction

import numpy as np

from .errors import UndefinedMetricError, ValidationError


def accuracy(scores, labels) -> float:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValidationError("accuracy over an empty split")
    return float(np.mean(scores.argmax(axis=1) == labels))


def _twice_midranks(scores: np.ndarray) -> np.ndarray:
    """2 * (1-based average rank) of each score; integers, so exact."""
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    n = s.size
    starts = np.flatnonzero(np.concatenate([[True], s[1:] != s[:-1]]))
    ends = np.concatenate([starts[1:], [n]])
    twice = np.empty(n, dtype=np.int64)
    # a tie group occupying sorted positions [a, b) has midrank (a + 1 + b) / 2
    twice[order] = np.repeat(starts + 1 + ends, ends - starts)
    return twice


def roc_auc_exact(labels, scores) -> Fraction:
    """Rank-based AUC of binary ``labels`` given ``scores`` as an exact fraction."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValidationError("labels and scores must be equal-length vectors")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC is undefined when only one class is present")
    twice_rank_sum = int(_twice_midranks(scores)[labels].sum())
    return Fraction(twice_rank_sum - n_pos * (n_pos + 1), 2 * n_pos * n_neg)


def roc_auc(labels, scores) -> float:
    """ROC-AUC; 2-D inputs are scored per column and averaged."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.ndim == 2:
        return float(np.mean([roc_auc(labels[:, j], scores[:, j]) for j in range(labels.shape[1])]))
    return float(roc_auc_exact(labels, scores))


def score(log_probs, labels, idx, metric: str) -> float:
    """Evaluate ``metric`` on rows ``idx`` of model log-probabilities."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValidationError("cannot evaluate an empty split")
    lp = np.asarray(log_probs)[idx]
    y = np.asarray(labels)[idx]
    if metric == "accuracy":
        return accuracy(lp, y)
    if metric == "rocauc":
        probs = np.exp(lp)
        if probs.shape[1] == 2:
            return roc_auc(y == 1, probs[:, 1])
        onehot = np.eye(probs.shape[1], dtype=bool)[y]
        return roc_auc(onehot, probs)
    raise ValidationError(f"unknown metric {metric!r}")

"""Evaluation metrics: rank-based AUC and thresholded precision."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """The metric has no value on this batch (single-class, no predicted positives)."""


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative.

    Ties count 0.5. Computed via the rank-sum formula; requires at least one
    positive and one negative.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1 or s.size == 0:
        raise ValueError("scores/labels must be equal-length nonempty 1-d arrays")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined on a single-class batch")
    ranks = rankdata(s)  # average ranks handle ties as 0.5 credit
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def precision(scores, labels, threshold: float = 0.5) -> float:
    """TP / (TP + FP) with predicted-positive = score > threshold."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1 or s.size == 0:
        raise ValueError("scores/labels must be equal-length nonempty 1-d arrays")
    predicted = s > threshold
    if not predicted.any():
        raise UndefinedMetricError("precision undefined: no predicted positives")
    return float(np.sum((y == 1) & predicted) / np.sum(predicted))

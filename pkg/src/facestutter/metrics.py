"""Classification metrics: accuracy, AUC-ROC (Mann-Whitney form) and F1."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y.astype(int)


def auc_roc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties counting 1/2.

    Computed from midranks, which is the Mann-Whitney U statistic divided
    by ``n_pos * n_neg``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc_roc needs both classes present")
    ranks = rankdata(s)
    # rank sums are half-integers at worst, so this is exact in float64 for moderate n
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def threshold(probs, cut: float = 0.5) -> np.ndarray:
    return (np.asarray(probs, dtype=np.float64) >= cut).astype(int)


def accuracy(predictions, labels) -> float:
    p = _labels(predictions)
    y = _labels(labels)
    return float(np.mean(p == y))


def f1_score(predictions, labels) -> float:
    """2TP / (2TP + FP + FN), defined as 0 when the denominator is 0."""
    p = _labels(predictions)
    y = _labels(labels)
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom

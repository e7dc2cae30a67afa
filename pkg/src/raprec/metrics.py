"""Top-K utility metrics and micro-averaged AUC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def precision_at_k(heldout, recommended, K: int) -> float:
    if K <= 0:
        raise ValueError("K must be positive")
    recommended = list(recommended)
    if len(recommended) < K:
        raise ValueError(f"need at least K={K} recommendations, got {len(recommended)}")
    return len(set(heldout) & set(recommended[:K])) / K


def recall_at_k(heldout, recommended, K: int) -> float:
    heldout = set(heldout)
    if not heldout:
        raise ValueError("recall is undefined for an empty held-out set")
    if K <= 0:
        raise ValueError("K must be positive")
    return len(heldout & set(list(recommended)[:K])) / len(heldout)


def binary_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-sum (Mann-Whitney) AUC with midranks for ties."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def micro_auc(y_true, probs) -> float:
    """Pool every (user, class) indicator with its score and take one AUC."""
    y_true = np.asarray(y_true, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if len(np.unique(y_true)) < 2:
        raise ValueError("micro-AUC is undefined when the test set holds a single class")
    onehot = np.zeros_like(probs, dtype=bool)
    onehot[np.arange(len(y_true)), y_true] = True
    return binary_auc(onehot.ravel(), probs.ravel())

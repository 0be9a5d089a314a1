"""Accuracy and rank-based AUC-ROC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.shape != labels.shape or pred.size == 0:
        raise ValueError("accuracy needs equal-length non-empty arrays")
    return float((pred == labels).mean())


def auc_roc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative; ties earn half credit.

    Uses the Mann-Whitney form with average ranks.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())

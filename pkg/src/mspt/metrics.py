from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class UndefinedAUCError(ValueError):
    """AUC needs at least one positive and one negative example."""


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    return rankdata(np.asarray(values, dtype=np.float64), method="average")


def auc(scores, labels) -> float:
    """ROC AUC through the Mann-Whitney U statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    r = average_ranks(scores)
    return float((r[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(probs: np.ndarray, labels) -> float:
    # argmax returns the first maximum, so ties go to the lowest class index
    preds = np.asarray(probs).argmax(axis=1)
    return float(np.mean(preds == np.asarray(labels)))


def mean_sd(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    if np.all(v == v[0]):
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1))

"""Accuracy, expected calibration error and AUC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _check(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ValueError("probs must be [N, L] with one label per row")
    if len(probs) == 0:
        raise ValueError("empty prediction set")
    return probs, labels


def predictions(probs) -> np.ndarray:
    """Argmax with ties going to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=1)


def accuracy(probs, labels) -> float:
    probs, labels = _check(probs, labels)
    return float(np.mean(predictions(probs) == labels))


def risk(probs, labels) -> float:
    """0-1 risk, ``1 - accuracy``."""
    return 1.0 - accuracy(probs, labels)


def ece_bins(probs, labels, n_bins: int = 15):
    """Per-bin ``(count, acc, conf)`` for bins ((j-1)/J, j/J], j = 1..J.

    A confidence exactly on a boundary falls in the lower bin.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    probs, labels = _check(probs, labels)
    conf = probs.max(axis=1)
    correct = (predictions(probs) == labels).astype(np.float64)
    edges = np.arange(n_bins + 1) / n_bins
    # first edge >= conf is j/J exactly when (j-1)/J < conf <= j/J
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    safe = np.where(count > 0, count, 1)
    acc = np.bincount(idx, weights=correct, minlength=n_bins) / safe
    mean_conf = np.bincount(idx, weights=conf, minlength=n_bins) / safe
    return count, acc, mean_conf


def ece(probs, labels, n_bins: int = 15) -> float:
    count, acc, conf = ece_bins(probs, labels, n_bins)
    return float(np.sum(count / count.sum() * np.abs(acc - conf)))


def reliability_rows(probs, labels, n_bins: int = 15) -> list[tuple[float, int, float, float]]:
    """``(bin midpoint, count, accuracy, confidence)`` for every bin."""
    count, acc, conf = ece_bins(probs, labels, n_bins)
    return [((j + 0.5) / n_bins, int(count[j]), float(acc[j]), float(conf[j])) for j in range(n_bins)]


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos == neg)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(scores)  # average ranks handle ties as 0.5
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))

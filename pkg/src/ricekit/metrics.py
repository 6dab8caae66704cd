"""Binary classification metrics and ensemble voting.

Class encoding everywhere: 0 = recurrence, 1 = RICE. The headline metric is
macro F1, the unweighted mean of the two per-class F1 scores; degenerate 0/0
precision or recall ratios count as 0, which makes the metric total and
penalizes one-class collapse.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


def confusion(labels: Sequence[int], preds: Sequence[int]) -> np.ndarray:
    """2x2 count matrix indexed [true class, predicted class]."""
    y = np.asarray(labels)
    p = np.asarray(preds)
    if y.size == 0:
        raise ValueError("confusion matrix needs at least one sample")
    if y.shape != p.shape:
        raise ValueError(f"labels ({y.shape}) and predictions ({p.shape}) differ in length")
    if not np.all((y == 0) | (y == 1)) or not np.all((p == 0) | (p == 1)):
        raise ValueError("labels and predictions must be 0 or 1")
    cm = np.zeros((2, 2), dtype=np.int64)
    for t in (0, 1):
        for q in (0, 1):
            cm[t, q] = int(np.sum((y == t) & (p == q)))
    return cm


def _f1_for_class(cm: np.ndarray, c: int) -> float:
    tp = cm[c, c]
    fp = cm[1 - c, c]
    fn = cm[c, 1 - c]
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean of the per-class F1 scores."""
    cm = np.asarray(cm)
    if cm.shape != (2, 2) or (cm < 0).any():
        raise ValueError(f"need a non-negative 2x2 count matrix, got {cm!r}")
    return 0.5 * (_f1_for_class(cm, 0) + _f1_for_class(cm, 1))


def macro_f1_score(labels: Sequence[int], preds: Sequence[int]) -> float:
    return macro_f1(confusion(labels, preds))


def majority_vote(per_model_predictions: np.ndarray,
                  per_model_probabilities: Optional[np.ndarray] = None) -> np.ndarray:
    """Modal class per subject over an ensemble of models.

    ``per_model_predictions`` is (n_models, n_subjects) of 0/1 votes. With an
    even model count a tie is broken by the mean predicted probability of
    class 1 (``per_model_probabilities``, same shape); ties cannot occur with
    an odd count.
    """
    votes = np.asarray(per_model_predictions)
    if votes.ndim != 2 or votes.shape[0] == 0:
        raise ValueError(f"need (n_models, n_subjects) votes with n_models >= 1, got {votes.shape}")
    ones = votes.sum(axis=0)
    n_models = votes.shape[0]
    result = (2 * ones > n_models).astype(np.int64)
    tied = 2 * ones == n_models
    if tied.any():
        if per_model_probabilities is None:
            raise ValueError("tied vote with no probabilities to break it")
        probs = np.asarray(per_model_probabilities)
        if probs.shape != votes.shape:
            raise ValueError(f"probabilities shape {probs.shape} != votes shape {votes.shape}")
        result[tied] = (probs.mean(axis=0)[tied] > 0.5).astype(np.int64)
    return result

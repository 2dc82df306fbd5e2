"""Ranking metrics for binary scores: ROC-AUC, average precision, delta-AUPRC."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class MetricUndefinedError(ValueError):
    """The labels do not contain the classes a metric needs."""


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores for {labels.size} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0/1")
    return scores, labels.astype(np.int64)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney U / (n_pos * n_neg); tied scores count one half."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("ROC-AUC needs both classes")
    ranks = rankdata(scores)  # average ranks handle ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision: mean of precision@rank over positives, highest score first.

    Tied scores keep their input order. The precision terms are summed with
    correct rounding, so the result does not depend on summation order.
    """
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricUndefinedError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision_at = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return math.fsum(precision_at[hits == 1].tolist()) / n_pos


def delta_auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision minus prevalence (the random-ranking baseline)."""
    _, lab = _check(scores, labels)
    return auprc(scores, labels) - float(lab.mean())


METRICS = {"roc_auc": roc_auc, "roc-auc": roc_auc, "delta_auprc": delta_auprc, "delta-auprc": delta_auprc}

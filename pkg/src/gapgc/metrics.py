"""ROC-AUC for multi-task binary labels with missing entries."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError


def roc_auc(scores, labels) -> float:
    """Rank-sum AUC, P(s+ > s-) + P(tie)/2, with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    ranks = rankdata(scores, method="average")
    return (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_auc_multitask(scores, labels):
    """Per-task AUC (``nan`` where a task lacks one class) and their mean.

    ``labels`` uses ``nan`` for missing entries.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if scores.shape != labels.shape or scores.shape[0] < 1:
        raise MetricError(f"scores {scores.shape} vs labels {labels.shape}")
    per_task = np.full(scores.shape[1], np.nan)
    for t in range(scores.shape[1]):
        keep = ~np.isnan(labels[:, t])
        y = labels[keep, t]
        if (y == 1).any() and (y == 0).any():
            per_task[t] = roc_auc(scores[keep, t], y)
    if np.isnan(per_task).all():
        raise MetricError("no task has both classes present")
    return per_task, float(np.nanmean(per_task))

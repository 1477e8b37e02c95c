"""Pseudo-labels, group positive selection and the group contrastive loss."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError


def pseudo_label(logits) -> np.ndarray:
    """Per-task bits ``logit > 0`` as an ``[m, T]`` int array; a zero logit maps to 0."""
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if np.isnan(x).any():
        raise NumericError("NaN logits cannot be pseudo-labelled")
    if x.ndim == 1:
        x = x[:, None]
    return (x > 0).astype(np.int64)


def multitask_similarity(y1, y2) -> float:
    """Fraction of tasks on which two label vectors agree."""
    y1, y2 = np.asarray(y1).reshape(-1), np.asarray(y2).reshape(-1)
    if y1.shape != y2.shape:
        raise ContractError(f"label lengths differ: {len(y1)} vs {len(y2)}")
    if y1.size == 0:
        raise ContractError("empty label vectors")
    return float(np.mean(y1 == y2))


def select_positives(anchor_labels, aug_labels, gamma: float) -> np.ndarray:
    """Boolean ``[m, m]`` matrix; entry ``(i, j)`` marks augmentation ``j`` as a
    positive of anchor ``i``: similarity at least ``gamma``, or ``j == i``."""
    a = np.asarray(anchor_labels)
    b = np.asarray(aug_labels)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape != b.shape:
        raise ContractError(f"anchor labels {a.shape} vs augmentation labels {b.shape}")
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma {gamma} outside [0, 1]")
    t = a.shape[1]
    agree = (a[:, None, :] == b[None, :, :]).sum(axis=-1)
    # count form of sim >= gamma, robust to k/T rounding
    mask = agree >= gamma * t - 1e-9
    np.fill_diagonal(mask, True)
    return mask


def own_positive(m: int) -> np.ndarray:
    return np.eye(m, dtype=bool)


def positive_lists(mask: np.ndarray) -> list[list[int]]:
    return [list(np.flatnonzero(row)) for row in mask]


def contrastive_loss(z, z_aug, positives: np.ndarray, temperature: float = 1.0) -> Tensor:
    """Group contrastive loss with mean aggregation over each anchor's positives.

    For anchor ``i`` every augmentation ``j`` enters the softmax denominator
    of ``cos(z_i, z_aug_j)``; the loss is minus the batch mean of the mean
    log-probability of the anchor's positives.
    """
    z, z_aug = ad.as_tensor(z), ad.as_tensor(z_aug)
    m = z.shape[0]
    if m < 1 or z_aug.shape[0] != m:
        raise ContractError(f"need matching non-empty batches, got {z.shape} and {z_aug.shape}")
    positives = np.asarray(positives, dtype=bool)
    if positives.shape != (m, m):
        raise ContractError(f"positive mask shape {positives.shape} for batch of {m}")
    counts = positives.sum(axis=1)
    if (counts < 1).any():
        raise ContractError(f"anchor {int(np.argmin(counts))} has no positives")
    sims = ad.cosine_sim(z, z_aug)
    if temperature != 1.0:
        sims = ad.mul(sims, 1.0 / temperature)
    logp = ad.log_softmax_row(sims)
    weights = positives / counts[:, None]
    return ad.mul(ad.sum_axis(ad.mul(logp, weights)), -1.0 / m)


def info_nce_estimate(loss_value, m: int) -> float:
    """``log m - loss``: the mutual-information lower bound implied by the loss."""
    value = loss_value.item() if isinstance(loss_value, Tensor) else float(loss_value)
    return math.log(m) - value

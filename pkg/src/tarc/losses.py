"""Training objectives: cross-entropy, NT-Xent, supervised contrastive, multi-objective.

Contrastive batches use the interleaved layout: rows ``2k`` and ``2k + 1``
are the two augmented views of sample ``k``. Embeddings are expected to be
unit-norm, so similarities are plain dot products.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

DEFAULT_TEMPERATURE = 0.07


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax of the target class."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ContractError(f"cross_entropy: target outside [0, {logits.shape[1]})")
    return T.scale(T.mean(T.gather(T.log_softmax(logits), targets)), -1.0)


def pair_ids(two_n: int) -> np.ndarray:
    if two_n < 2 or two_n % 2:
        raise ContractError(f"contrastive batch needs an even number >= 2 of rows, got {two_n}")
    return np.arange(two_n) // 2


def _positive_mask(labels: np.ndarray) -> np.ndarray:
    mask = labels[:, None] == labels[None, :]
    np.fill_diagonal(mask, False)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ContractError("supcon: an anchor has no positives (partner views must share labels)")
    return mask


def _supcon_value_and_grad(Z: np.ndarray, positives: np.ndarray, tau: float):
    n = Z.shape[0]
    S = (Z @ Z.T) / tau
    np.fill_diagonal(S, -np.inf)
    row_max = S.max(axis=1, keepdims=True)
    E = np.exp(S - row_max)
    denom = E.sum(axis=1, keepdims=True)
    log_denom = np.log(denom) + row_max
    counts = positives.sum(axis=1)
    S_pos = np.where(positives, S, 0.0)
    per_anchor = log_denom[:, 0] - S_pos.sum(axis=1) / counts
    value = per_anchor.mean()
    # dL/dS = (softmax over k != i  -  positives / |P(i)|) / n
    G = (E / denom - positives / counts[:, None]) / n
    dZ = (G + G.T) @ Z / tau
    return value, dZ


def supcon(Z: Tensor, labels, tau: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Supervised contrastive loss averaged over all ``2N`` anchors.

    The ``1/|P(i)|`` average sits outside the log: each anchor contributes
    ``-(1/|P(i)|) * sum_p log(exp(s_ip/tau) / sum_{k != i} exp(s_ik/tau))``.
    Forward value and adjoint are computed as one fused tape primitive.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if Z.ndim != 2:
        raise DimensionError(f"supcon: expected [2N, d] embeddings, got {Z.shape}")
    labels = np.asarray(labels)
    if labels.shape != (Z.shape[0],):
        raise DimensionError(f"supcon: labels {labels.shape} do not match {Z.shape[0]} rows")
    pair_ids(Z.shape[0])
    positives = _positive_mask(labels)
    value, dZ = _supcon_value_and_grad(Z.data, positives, tau)
    return T.custom((Z,), np.array(value), lambda g: (g * dZ,), "supcon")


def ntxent(Z: Tensor, tau: float = DEFAULT_TEMPERATURE) -> Tensor:
    """NT-Xent: the supervised loss with each anchor's partner view as its only positive."""
    return supcon(Z, pair_ids(Z.shape[0]), tau)


def supcon_composite(Z: Tensor, labels, tau: float = DEFAULT_TEMPERATURE) -> Tensor:
    """The same loss assembled from catalog primitives (reference route, slower)."""
    labels = np.asarray(labels)
    positives = _positive_mask(labels).astype(np.float64)
    n = Z.shape[0]
    offdiag = 1.0 - np.eye(n)
    S = T.scale(T.matmul(Z, T.transpose(Z)), 1.0 / tau)
    shift = Tensor(np.max(np.where(offdiag > 0, S.data, -np.inf), axis=1, keepdims=True))
    E = T.mul(T.exp(T.sub(S, shift)), Tensor(offdiag))
    log_denom = T.add(T.log(T.sum(E, axis=1)), Tensor(shift.data[:, 0]))
    weights = Tensor(positives / positives.sum(axis=1, keepdims=True))
    pos_term = T.sum(T.mul(S, weights), axis=1)
    return T.mean(T.sub(log_denom, pos_term))


def multi_objective(
    cls_logits: Tensor,
    y,
    rot_logits: Tensor,
    y_rot,
    alpha: float = 1.0,
    beta: float = 1.0,
    replay_cls_logits: Optional[Tensor] = None,
    replay_y=None,
) -> Tensor:
    """``alpha * (CE(current) + CE(replay)) + beta * CE(rotation)``.

    Replay CE is a separate mean over its own batch; it is absent when no
    buffer batch was drawn.
    """
    if alpha < 0 or beta < 0:
        raise ContractError("alpha and beta must be non-negative")
    if (replay_cls_logits is None) != (replay_y is None):
        raise ContractError("replay logits and replay labels must be given together")
    cls_term = cross_entropy(cls_logits, y)
    if replay_cls_logits is not None and len(replay_y):
        cls_term = T.add(cls_term, cross_entropy(replay_cls_logits, replay_y))
    total = T.scale(cls_term, alpha)
    if rot_logits is not None:
        total = T.add(total, T.scale(cross_entropy(rot_logits, y_rot), beta))
    return total

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

DICE_EPS = 1e-5


def soft_dice_loss(logits: Tensor, mask: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """``1 - mean_k (2 sum p_k g_k + eps) / (sum p_k + sum g_k + eps)``, background included.

    Sums pool over the whole batch.
    """
    k = logits.shape[1]
    probs = ops.softmax(logits, axis=1)
    onehot = np.moveaxis(np.eye(k, dtype=logits.dtype)[mask], -1, 1)
    axes = (0, 2, 3)
    inter = ops.sum(ops.mul(probs, onehot), axis=axes)
    denom = ops.add(ops.sum(probs, axis=axes), onehot.sum(axis=axes) + eps)
    dice = ops.div(ops.add(ops.scalar_mul(inter, 2.0), eps), denom)
    return ops.sub(1.0, ops.mean(dice))


def combined_loss(logits: Tensor, mask: np.ndarray, ce_weight: float = 0.5) -> Tensor:
    """``ce_weight * CE + (1 - ce_weight) * soft Dice`` for ``(N,K,H,W)`` logits."""
    mask = np.asarray(mask)
    if logits.ndim != 4 or mask.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"combined_loss: logits {logits.shape} vs mask {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() >= logits.shape[1]):
        raise ShapeError(f"combined_loss: mask ids outside [0, {logits.shape[1]})")
    ce = ops.cross_entropy_with_logits(logits, mask, axis=1)
    dice = soft_dice_loss(logits, mask)
    return ops.add(ops.scalar_mul(ce, ce_weight), ops.scalar_mul(dice, 1.0 - ce_weight))

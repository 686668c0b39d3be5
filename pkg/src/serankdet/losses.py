"""Segmentation loss."""

from __future__ import annotations

from . import tensor as T
from .tensor import Tensor, as_tensor


def soft_iou_loss(logits: Tensor, target: Tensor, smoothing: float = 1.0) -> Tensor:
    """1 - (|p*y| + s) / (|p| + |y| - |p*y| + s) with p = sigmoid(logits).

    Sums run over the whole tensor (batch included).  The smoothing term
    keeps the empty-prediction/empty-target case at zero loss.
    """
    if logits.shape != target.shape:
        raise ValueError(f"loss shapes differ: {logits.shape} vs {target.shape}")
    p = T.sigmoid(logits)
    inter = T.sum_all(T.mul(p, target))
    total = T.add(T.sum_all(p), T.sum_all(target))
    s = as_tensor(smoothing, like=logits)
    num = T.add(inter, s)
    den = T.add(T.sub(total, inter), s)
    return T.sub(as_tensor(1.0, like=logits), T.div(num, den))


def multi_head_loss(heads: list, target: Tensor) -> Tensor:
    """Mean soft-IoU loss over supervision heads."""
    losses = [soft_iou_loss(h, target) for h in heads]
    acc = losses[0]
    for extra in losses[1:]:
        acc = T.add(acc, extra)
    return T.scalar_mul(acc, 1.0 / len(losses))

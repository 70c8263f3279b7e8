"""Multi-task objective: two semantic cross-entropies plus dice + BCE on the change head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .net import TripletOutput
from .tensor import Tensor, make_node


@dataclass
class LossBreakdown:
    l_cls1: float
    l_cls2: float
    l_dice: float
    l_bce: float
    l_bcd: float
    total: float
    tensor: Tensor | None = None

    def as_record(self) -> str:
        return " ".join(
            f"{k}={getattr(self, k)!r}" for k in ("l_cls1", "l_cls2", "l_dice", "l_bce", "total")
        )


def cross_entropy_map(logits: Tensor, labels: np.ndarray, ignore_id: int | None = None) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[label]."""
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"cross_entropy_map: shape mismatch logits {logits.shape} vs labels {labels.shape}")
    valid = np.ones(labels.shape, dtype=bool) if ignore_id is None else labels != ignore_id
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"cross_entropy_map: label {labels[bad][0]} outside [0, {k})")
    count = int(valid.sum())
    if count == 0:
        return make_node(np.asarray(0.0), (logits,), lambda g: (np.zeros(logits.shape),))

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    onehot = np.zeros(logits.shape)
    safe = np.where(valid, labels, 0)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    onehot *= valid[:, None]
    loss = -(onehot * logp).sum() / count

    def backward(g):
        probs = np.exp(logp)
        return (float(g) * (probs * valid[:, None] - onehot) / count,)

    return make_node(np.asarray(loss), (logits,), backward)


def _check_target(change_logits: Tensor, target: np.ndarray) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if t.size != change_logits.data.size:
        raise ValueError(f"shape mismatch change logits {change_logits.shape} vs target {t.shape}")
    return t.reshape(change_logits.shape)


def dice_loss(change_logits: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """Batch-global soft dice on sigmoid probabilities."""
    t = _check_target(change_logits, target)
    p = T.sigmoid(change_logits)
    inter = T.sum_all(T.mul(p, Tensor(t)))
    denom = T.add(T.sum_all(p), Tensor(t.sum() + smooth))
    ratio = T.mul(T.add(T.scalar_mul(inter, 2.0), Tensor(smooth)), _reciprocal(denom))
    return T.sub(Tensor(1.0), ratio)


def _reciprocal(x: Tensor) -> Tensor:
    r = 1.0 / x.data
    return make_node(r, (x,), lambda g: (-g * r * r,))


def bce_loss(change_logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy evaluated on logits: max(x,0) - x*t + log1p(exp(-|x|))."""
    t = _check_target(change_logits, target)
    x = change_logits.data
    loss = (np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean()
    n = x.size

    def backward(g):
        return (float(g) * (T._sigmoid(x) - t) / n,)

    return make_node(np.asarray(loss), (change_logits,), backward)


def combined_loss(
    output: TripletOutput,
    labels_t1: np.ndarray,
    labels_t2: np.ndarray,
    change_mask: np.ndarray,
    ignore_id: int | None = None,
) -> LossBreakdown:
    """Unweighted sum L = CE(s1) + CE(s2) + (dice + BCE)(change)."""
    cls1 = cross_entropy_map(output.s1_logits, labels_t1, ignore_id)
    cls2 = cross_entropy_map(output.s2_logits, labels_t2, ignore_id)
    dice = dice_loss(output.change_logits, change_mask)
    bce = bce_loss(output.change_logits, change_mask)
    bcd = T.add(dice, bce)
    total = T.add(T.add(cls1, cls2), bcd)
    return LossBreakdown(
        l_cls1=cls1.item(),
        l_cls2=cls2.item(),
        l_dice=dice.item(),
        l_bce=bce.item(),
        l_bcd=bcd.item(),
        total=total.item(),
        tensor=total,
    )

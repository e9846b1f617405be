"""Classification, segmentation and combined training objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, NonFiniteError, ShapeError, Tensor, _make, add, scale


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError(f"lam: must be a finite non-negative float, got {self.lam!r}")


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [N,C], got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be integers in [0, {c})")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, labels])
    probs = np.exp(z - lse[:, None])

    def bwd(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return ((d * (float(g) / n)).astype(DTYPE),)

    return _make(np.asarray(loss), (logits,), "cross_entropy", bwd)


def bce_with_logits(mask_logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over every element, in the fused stable form."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != mask_logits.shape:
        raise ShapeError(f"target shape {t.shape} != logits shape {mask_logits.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("target must be binary (0/1)")
    x = mask_logits.data.astype(np.float64)
    t = t.astype(np.float64)
    m = x.size
    loss = np.mean(np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x))))

    def bwd(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (((sig - t) * (float(g) / m)).astype(DTYPE),)

    return _make(np.asarray(loss), (mask_logits,), "bce_with_logits", bwd)


def total_loss(l_cls: Tensor, l_seg: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """l_cls + lam * l_seg."""
    for name, t in (("l_cls", l_cls), ("l_seg", l_seg)):
        if t.data.size != 1:
            raise ShapeError(f"{name} must be a scalar, got shape {t.shape}")
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{name} is not finite")
    return add(l_cls, scale(l_seg, cfg.lam))

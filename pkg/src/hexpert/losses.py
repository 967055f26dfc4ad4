"""Prediction losses: cross-entropy, mean squared error, Huber.

Every loss reduces to a scalar by averaging over the batch (first axis).
Cross-entropy takes a probability vector per row, not logits.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor


class DomainError(ValueError):
    """Input outside the loss's mathematical domain."""


def cross_entropy(prediction, target):
    """Mean of -sum(target * log(prediction)) over rows.

    prediction rows must be probability vectors (entries in [0,1], summing
    to 1 within 1e-6). Zero-probability entries only matter where the target
    puts mass.
    """
    prediction = as_tensor(prediction)
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    p = prediction.data
    if p.shape != target_data.shape:
        raise ShapeError(
            f"cross-entropy shape mismatch: {p.shape} vs {target_data.shape}"
        )
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise DomainError("cross-entropy prediction has entries outside [0, 1]")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise DomainError("cross-entropy prediction rows must sum to 1")
    batch = 1 if p.ndim == 1 else p.shape[0]
    mask = target_data > 0.0
    value = -(target_data[mask] * np.log(p[mask])).sum() / batch
    out = Tensor(value, (prediction,), None)

    def backward(g):
        gp = np.zeros_like(p)
        gp[mask] = -g * target_data[mask] / p[mask] / batch
        prediction.accumulate(gp)

    out._backward = backward
    return out


def mse(prediction, target):
    """Mean squared error over all elements."""
    prediction = as_tensor(prediction)
    target = as_tensor(target)
    diff = prediction - target
    return (diff * diff).mean()


def huber(prediction, target, delta=1.0):
    """Mean Huber loss: 0.5 e^2 inside |e| <= delta, linear outside."""
    prediction = as_tensor(prediction)
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    e = prediction.data - target_data
    abs_e = np.abs(e)
    per_elem = np.where(
        abs_e <= delta, 0.5 * e * e, delta * (abs_e - 0.5 * delta)
    )
    out = Tensor(per_elem.mean(), (prediction,), None)

    def backward(g):
        prediction.accumulate(g * np.clip(e, -delta, delta) / e.size)

    out._backward = backward
    return out


def loss(kind, prediction, target, delta=1.0):
    """Dispatch on loss kind: 'cross-entropy' | 'mse' | 'huber'."""
    if kind == "cross-entropy":
        return cross_entropy(prediction, target)
    if kind == "mse":
        return mse(prediction, target)
    if kind == "huber":
        return huber(prediction, target, delta)
    raise ValueError(f"unknown loss kind {kind!r}")

"""Stateless activations and losses. Losses return ``(value, gradient)``."""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(x, axis: int = -1):
    x = np.asarray(x)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1):
    x = np.asarray(x)
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _check_same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def bce_with_logits(logits, targets, reduction: str = "mean"):
    """Binary cross-entropy on logits.

    Uses ``max(l, 0) - l*y + log1p(exp(-|l|))`` so large logits cannot
    overflow. ``reduction`` is ``"mean"`` over every element or ``"sum"``.
    """
    _check_same_shape(logits, targets, "bce_with_logits")
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=logits.dtype)
    elementwise = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    grad = sigmoid(logits) - targets
    if reduction == "mean":
        n = logits.size
        return float(elementwise.sum() / n), grad / n
    if reduction == "sum":
        return float(elementwise.sum()), grad
    raise ValueError(f"unknown reduction {reduction!r}")


def softmax_cross_entropy(logits, targets):
    """Mean categorical cross-entropy; ``targets`` are integer class ids."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"softmax_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    flat = logits.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    logp = log_softmax(flat)
    n = t.size
    loss = -logp[np.arange(n), t].sum() / n
    grad = np.exp(logp)
    grad[np.arange(n), t] -= 1
    return float(loss), (grad / n).reshape(logits.shape)


def mse(a, b):
    """Mean squared difference; gradient is with respect to ``a``."""
    _check_same_shape(a, b, "mse")
    diff = np.asarray(a) - np.asarray(b)
    return float((diff ** 2).mean()), 2.0 * diff / diff.size

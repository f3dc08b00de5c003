"""AdamW and the learning-rate / teacher-forcing schedules."""

from __future__ import annotations

import math
from typing import List, Sequence

import numpy as np

from .module import Parameter


class TrainingError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


class AdamW:
    """Adam with decoupled weight decay.

    Each step first shrinks every value by ``lr * weight_decay`` and then
    applies the bias-corrected Adam update.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params: List[Parameter] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {p.name!r} {p.value.shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if self.weight_decay:
                p.value *= 1 - lr * self.weight_decay
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.value -= (lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)).astype(p.value.dtype)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


def cosine_lr(step: int, total: int, lr_max: float = 1e-3, lr_min: float = 5e-6) -> float:
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at ``total``."""
    if total <= 0:
        return lr_max
    step = min(max(step, 0), total)
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total))


def inverse_sigmoid_schedule(i: float, k: float = 20.0) -> float:
    """Teacher-forcing probability ``k / (k + exp(i / k))`` for epoch ``i``."""
    if k <= 0:
        raise ValueError("rate k must be positive")
    x = i / k
    if x > 700:
        return 0.0
    return k / (k + math.exp(x))

"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .module import Module


def relative_error(analytic, numeric, floor: float = 1e-5):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(loss_fn: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` with respect to ``array`` (mutated and restored)."""
    grad = np.zeros(array.shape, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = loss_fn()
        flat[k] = orig - h
        down = loss_fn()
        flat[k] = orig
        gflat[k] = (up - down) / (2 * h)
    return grad


def grad_check(loss_fn: Callable[[], float], arrays: Sequence[np.ndarray],
               analytic: Sequence[np.ndarray], h: float = 1e-5, floor: float = 1e-5) -> float:
    """Max elementwise relative error between analytic and numeric gradients.

    ``loss_fn`` must read ``arrays`` in place (they are perturbed one element
    at a time) and return a scalar. Arrays must be float64.
    """
    worst = 0.0
    for arr, g in zip(arrays, analytic):
        if arr.dtype != np.float64:
            raise TypeError("grad_check needs float64 arrays")
        num = numeric_grad(loss_fn, arr, h)
        if not np.all(np.isfinite(num)) or not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient during grad_check")
        if arr.size:
            worst = max(worst, float(relative_error(g, num, floor).max()))
    return worst


def check_module(module: Module, x: np.ndarray, rng=None, h: float = 1e-5, check_input: bool = True) -> float:
    """Grad-check a single-input, single-output module against ``sum(R * f(x))``.

    ``R`` is a fixed random projection so every output element contributes.
    """
    rng = np.random.default_rng(rng)
    out = module.forward(x)
    proj = rng.standard_normal(out.shape)

    def loss():
        return float((module.forward(x) * proj).sum())

    module.zero_grad()
    module.forward(x)
    dx = module.backward(proj)
    arrays, grads = [], []
    if check_input:
        arrays.append(x)
        grads.append(dx)
    for p in module.parameters():
        arrays.append(p.value)
        grads.append(p.grad.copy())
    return grad_check(loss, arrays, grads, h)

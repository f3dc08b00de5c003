"""Feed-forward layers with hand-written backward passes.

Sequence tensors use the ``(batch, channels, time)`` layout for convolution,
batch norm and upsampling, and ``(..., features)`` for linear and layer norm.
"""

from __future__ import annotations

import numpy as np

from .functional import sigmoid
from .init import default_rng, he_init
from .module import DEFAULT_DTYPE, Module, Parameter, Sequential


def _check_shape(x, expected_dim: int, axis: int, what: str):
    if x.ndim < 2 or x.shape[axis] != expected_dim:
        raise ValueError(f"{what}: expected size {expected_dim} on axis {axis}, got input shape {x.shape}")


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng=None, dtype=DEFAULT_DTYPE, bias: bool = True):
        rng = default_rng(rng)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(he_init((in_features, out_features), in_features, rng, dtype), "weight")
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), "bias") if bias else None
        self._x = None

    def apply(self, x):
        """Forward without caching (inference inside step loops)."""
        y = x @ self.weight.value
        if self.bias is not None:
            y = y + self.bias.value
        return y

    def forward(self, x):
        _check_shape(x, self.in_features, -1, "Linear")
        self._x = x
        return self.apply(x)

    def backward(self, dy):
        x2 = self._x.reshape(-1, self.in_features)
        dy2 = dy.reshape(-1, self.out_features)
        self.weight.grad += x2.T @ dy2
        if self.bias is not None:
            self.bias.grad += dy2.sum(axis=0)
        return dy @ self.weight.value.T


class Conv1d(Module):
    """1-D convolution over ``(N, C_in, T)`` with zero padding and stride."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, padding: int = 0,
                 stride: int = 1, rng=None, dtype=DEFAULT_DTYPE):
        rng = default_rng(rng)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = padding
        self.stride = stride
        fan_in = in_channels * kernel_size
        self.weight = Parameter(he_init((out_channels, in_channels, kernel_size), fan_in, rng, dtype), "weight")
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), "bias")
        self._cache = None

    def output_length(self, t: int) -> int:
        return (t + 2 * self.padding - self.kernel_size) // self.stride + 1

    def _columns(self, x):
        n, c, t = x.shape
        t_out = self.output_length(t)
        if t_out < 1:
            raise ValueError(f"Conv1d: input length {t} too short for kernel {self.kernel_size}")
        xp = np.pad(x, ((0, 0), (0, 0), (self.padding, self.padding))) if self.padding else x
        span = self.stride * (t_out - 1) + 1
        cols = np.stack([xp[:, :, j:j + span:self.stride] for j in range(self.kernel_size)], axis=2)
        return cols.reshape(n, c * self.kernel_size, t_out), t_out

    def forward(self, x):
        if x.ndim != 3:
            raise ValueError(f"Conv1d expects (N, C, T) input, got shape {x.shape}")
        _check_shape(x, self.in_channels, 1, "Conv1d")
        cols, t_out = self._columns(x)
        w2 = self.weight.value.reshape(self.out_channels, -1)
        self._cache = (x.shape, cols)
        return np.matmul(w2, cols) + self.bias.value[:, None]

    def backward(self, dy):
        (n, c, t), cols = self._cache
        k, s, p = self.kernel_size, self.stride, self.padding
        w2 = self.weight.value.reshape(self.out_channels, -1)
        self.weight.grad += np.tensordot(dy, cols, axes=([0, 2], [0, 2])).reshape(self.weight.value.shape)
        self.bias.grad += dy.sum(axis=(0, 2))
        dcols = np.matmul(w2.T, dy).reshape(n, c, k, -1)
        t_out = dy.shape[2]
        span = s * (t_out - 1) + 1
        dxp = np.zeros((n, c, t + 2 * p), dtype=dy.dtype)
        for j in range(k):
            dxp[:, :, j:j + span:s] += dcols[:, :, j]
        return dxp[:, :, p:p + t] if p else dxp


class BatchNorm1d(Module):
    """Batch normalization over all axes except channels (axis 1)."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(num_features, dtype=dtype), "weight")
        self.bias = Parameter(np.zeros(num_features, dtype=dtype), "bias")
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self._cache = None

    def _view(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x):
        _check_shape(x, self.num_features, 1, "BatchNorm1d")
        axes = (0,) + tuple(range(2, x.ndim))
        if self.training:
            m = x.size // self.num_features
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            mom = self.momentum
            self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(self.running_mean.dtype)
            unbiased = var * m / max(m - 1, 1)
            self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(self.running_var.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._view(mean, x.ndim)) * self._view(inv_std, x.ndim)
        self._cache = (xhat, inv_std, axes, self.training)
        return xhat * self._view(self.weight.value, x.ndim) + self._view(self.bias.value, x.ndim)

    def backward(self, dy):
        xhat, inv_std, axes, training = self._cache
        nd = dy.ndim
        self.weight.grad += (dy * xhat).sum(axis=axes)
        self.bias.grad += dy.sum(axis=axes)
        dxhat = dy * self._view(self.weight.value, nd)
        if not training:
            return dxhat * self._view(inv_std, nd)
        m = dy.size // self.num_features
        s1 = self._view(dxhat.sum(axis=axes), nd)
        s2 = self._view((dxhat * xhat).sum(axis=axes), nd)
        return self._view(inv_std, nd) / m * (m * dxhat - s1 - xhat * s2)


class LayerNorm(Module):
    """Normalize the last axis; ``affine=False`` drops gain and shift."""

    def __init__(self, num_features: int, eps: float = 1e-5, affine: bool = True, dtype=DEFAULT_DTYPE):
        self.num_features = num_features
        self.eps = eps
        self.affine = affine
        if affine:
            self.weight = Parameter(np.ones(num_features, dtype=dtype), "weight")
            self.bias = Parameter(np.zeros(num_features, dtype=dtype), "bias")
        self._cache = None

    def forward(self, x):
        _check_shape(x, self.num_features, -1, "LayerNorm")
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std)
        if self.affine:
            return xhat * self.weight.value + self.bias.value
        return xhat

    def backward(self, dy):
        xhat, inv_std = self._cache
        d = self.num_features
        if self.affine:
            lead = tuple(range(dy.ndim - 1))
            self.weight.grad += (dy * xhat).sum(axis=lead)
            self.bias.grad += dy.sum(axis=lead)
            dxhat = dy * self.weight.value
        else:
            dxhat = dy
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        return inv_std / d * (d * dxhat - s1 - xhat * s2)


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.2):
        self.slope = slope
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, dy):
        return np.where(self._mask, dy, self.slope * dy)


class Sigmoid(Module):
    def __init__(self):
        self._y = None

    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, dy):
        return dy * self._y * (1 - self._y)


class Upsample(Module):
    """Nearest-neighbour upsampling along the last (time) axis."""

    def __init__(self, scale: int = 2):
        self.scale = scale

    def forward(self, x):
        return np.repeat(x, self.scale, axis=-1)

    def backward(self, dy):
        return dy.reshape(dy.shape[:-1] + (-1, self.scale)).sum(axis=-1)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng=None, dtype=DEFAULT_DTYPE):
        rng = default_rng(rng)
        self.num_embeddings = num_embeddings
        self.weight = Parameter(he_init((num_embeddings, dim), dim, rng, dtype), "weight")
        self._idx = None

    def forward(self, idx):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_embeddings):
            raise ValueError(f"Embedding: index out of range [0, {self.num_embeddings})")
        self._idx = idx
        return self.weight.value[idx]

    def backward(self, dy):
        np.add.at(self.weight.grad, self._idx.reshape(-1), dy.reshape(-1, dy.shape[-1]))
        return None


def conv_block(in_ch: int, out_ch: int, kernel: int, padding: int, stride: int, rng=None,
               dtype=DEFAULT_DTYPE) -> Sequential:
    """conv1d -> batchnorm -> leaky_relu(0.2)."""
    return Sequential(Conv1d(in_ch, out_ch, kernel, padding, stride, rng, dtype),
                      BatchNorm1d(out_ch, dtype=dtype), LeakyReLU(0.2))


class ResBlock(Module):
    """``x + bn(conv(lrelu(bn(conv(x)))))``; the branch must preserve shape."""

    def __init__(self, channels: int, kernel: int = 3, padding: int = 1, stride: int = 1, rng=None,
                 dtype=DEFAULT_DTYPE):
        rng = default_rng(rng)
        self.branch = Sequential(
            Conv1d(channels, channels, kernel, padding, stride, rng, dtype),
            BatchNorm1d(channels, dtype=dtype),
            LeakyReLU(0.2),
            Conv1d(channels, channels, kernel, padding, stride, rng, dtype),
            BatchNorm1d(channels, dtype=dtype),
        )

    def forward(self, x):
        y = self.branch.forward(x)
        if y.shape != x.shape:
            raise ValueError(f"ResBlock branch changed shape {x.shape} -> {y.shape}")
        return x + y

    def backward(self, dy):
        return dy + self.branch.backward(dy)

"""LSTM layers with full backpropagation through time.

Gate order in the fused weight matrices is input, forget, cell, output.
"""

from __future__ import annotations

import numpy as np

from .functional import sigmoid
from .init import default_rng, he_init
from .module import DEFAULT_DTYPE, Module, Parameter


class LSTM(Module):
    """Single-layer unidirectional LSTM over ``(N, T, input_size)`` batches.

    Besides ``forward`` on a whole sequence, ``begin``/``step``/``end`` run
    it one step at a time for decoders whose next input depends on the
    previous output; the steps are recorded and ``backward`` works the same.
    """

    def __init__(self, input_size: int, hidden_size: int, rng=None, dtype=DEFAULT_DTYPE):
        rng = default_rng(rng)
        h4 = 4 * hidden_size
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.W = Parameter(he_init((input_size, h4), input_size, rng, dtype), "W")
        self.U = Parameter(he_init((hidden_size, h4), hidden_size, rng, dtype), "U")
        self.b = Parameter(np.zeros(h4, dtype=dtype), "b")
        self._steps = None
        self._cache = None

    def _zeros(self, n):
        return np.zeros((n, self.hidden_size), dtype=self.W.value.dtype)

    def cell(self, x_t, h, c):
        """One recurrence step without recording (pure inference)."""
        H = self.hidden_size
        gates = x_t @ self.W.value + h @ self.U.value + self.b.value
        i = sigmoid(gates[:, :H])
        f = sigmoid(gates[:, H:2 * H])
        g = np.tanh(gates[:, 2 * H:3 * H])
        o = sigmoid(gates[:, 3 * H:])
        c = f * c + i * g
        return o * np.tanh(c), c

    def begin(self, n: int, h0=None, c0=None):
        h0 = self._zeros(n) if h0 is None else h0
        c0 = self._zeros(n) if c0 is None else c0
        if h0.shape != (n, self.hidden_size) or c0.shape != (n, self.hidden_size):
            raise ValueError(f"LSTM: initial state must be {(n, self.hidden_size)}, got {h0.shape}/{c0.shape}")
        self._steps = {"x": [], "h": [h0], "c": [c0], "acts": [], "tanh_c": []}

    def step(self, x_t):
        if x_t.shape[-1] != self.input_size:
            raise ValueError(f"LSTM: expected input width {self.input_size}, got {x_t.shape}")
        s = self._steps
        H = self.hidden_size
        h, c = s["h"][-1], s["c"][-1]
        gates = x_t @ self.W.value + h @ self.U.value + self.b.value
        acts = np.empty_like(gates)
        acts[:, :2 * H] = sigmoid(gates[:, :2 * H])
        acts[:, 2 * H:3 * H] = np.tanh(gates[:, 2 * H:3 * H])
        acts[:, 3 * H:] = sigmoid(gates[:, 3 * H:])
        c = acts[:, H:2 * H] * c + acts[:, :H] * acts[:, 2 * H:3 * H]
        tc = np.tanh(c)
        h = acts[:, 3 * H:] * tc
        s["x"].append(x_t)
        s["h"].append(h)
        s["c"].append(c)
        s["acts"].append(acts)
        s["tanh_c"].append(tc)
        return h

    def end(self):
        """Finish a stepped pass; returns ``(outputs, (h_T, c_T))``."""
        s = self._steps
        self._cache = {
            "x": np.stack(s["x"], axis=1),
            "h": np.stack(s["h"], axis=1),
            "c": np.stack(s["c"], axis=1),
            "acts": np.stack(s["acts"], axis=1),
            "tanh_c": np.stack(s["tanh_c"], axis=1),
        }
        self._steps = None
        hs = self._cache["h"]
        return hs[:, 1:], (hs[:, -1], self._cache["c"][:, -1])

    def forward(self, x, h0=None, c0=None):
        if x.ndim != 3 or x.shape[-1] != self.input_size:
            raise ValueError(f"LSTM: expected (N, T, {self.input_size}) input, got {x.shape}")
        self.begin(x.shape[0], h0, c0)
        for t in range(x.shape[1]):
            self.step(x[:, t])
        return self.end()

    def backward(self, dout=None, dh_last=None, dc_last=None):
        """Backpropagate; returns ``(dx, dh0, dc0)``."""
        cache = self._cache
        H = self.hidden_size
        x, hs, cs, acts, tcs = cache["x"], cache["h"], cache["c"], cache["acts"], cache["tanh_c"]
        n, T = x.shape[:2]
        dh_next = self._zeros(n) if dh_last is None else dh_last.copy()
        dc_next = self._zeros(n) if dc_last is None else dc_last.copy()
        U_T = self.U.value.T
        dgates = np.empty_like(acts)
        for t in range(T - 1, -1, -1):
            dh = dh_next if dout is None else dh_next + dout[:, t]
            a = acts[:, t]
            i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            tc = tcs[:, t]
            dc = dc_next + dh * o * (1 - tc * tc)
            dg = dgates[:, t]
            dg[:, :H] = dc * g * i * (1 - i)
            dg[:, H:2 * H] = dc * cs[:, t] * f * (1 - f)
            dg[:, 2 * H:3 * H] = dc * i * (1 - g * g)
            dg[:, 3 * H:] = dh * tc * o * (1 - o)
            dc_next = dc * f
            dh_next = dg @ U_T
        self.W.grad += np.tensordot(x, dgates, axes=([0, 1], [0, 1]))
        self.U.grad += np.tensordot(hs[:, :-1], dgates, axes=([0, 1], [0, 1]))
        self.b.grad += dgates.sum(axis=(0, 1))
        dx = dgates @ self.W.value.T
        return dx, dh_next, dc_next


class BiLSTM(Module):
    """Forward and time-reversed LSTMs; final states are concatenated."""

    def __init__(self, input_size: int, hidden_size: int, rng=None, dtype=DEFAULT_DTYPE):
        rng = default_rng(rng)
        self.hidden_size = hidden_size
        self.fwd = LSTM(input_size, hidden_size, rng, dtype)
        self.bwd = LSTM(input_size, hidden_size, rng, dtype)

    def forward(self, x):
        """Returns ``(outputs (N, T, 2H), final_h (N, 2H))``."""
        out_f, (h_f, _) = self.fwd.forward(x)
        out_b, (h_b, _) = self.bwd.forward(x[:, ::-1])
        outputs = np.concatenate([out_f, out_b[:, ::-1]], axis=-1)
        return outputs, np.concatenate([h_f, h_b], axis=-1)

    def backward(self, dout=None, dh_final=None):
        H = self.hidden_size
        dout_f = dout_b = None
        if dout is not None:
            dout_f = dout[..., :H]
            dout_b = dout[:, ::-1, H:]
        dh_f = dh_b = None
        if dh_final is not None:
            dh_f, dh_b = dh_final[:, :H], dh_final[:, H:]
        dx_f, _, _ = self.fwd.backward(dout_f, dh_f)
        dx_b, _, _ = self.bwd.backward(dout_b, dh_b)
        return dx_f + dx_b[:, ::-1]


class StackedLSTM(Module):
    """Several unidirectional LSTM layers, each fed by the previous outputs."""

    def __init__(self, input_size: int, hidden_size: int, num_layers: int = 2, rng=None, dtype=DEFAULT_DTYPE):
        rng = default_rng(rng)
        self.hidden_size = hidden_size
        self.layers = [LSTM(input_size if i == 0 else hidden_size, hidden_size, rng, dtype)
                       for i in range(num_layers)]

    def forward(self, x, state=None):
        finals = []
        for i, layer in enumerate(self.layers):
            h0, c0 = (None, None) if state is None else state[i]
            x, final = layer.forward(x, h0, c0)
            finals.append(final)
        return x, finals

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout, _, _ = layer.backward(dout)
        return dout

    def step(self, x_t, state):
        """Inference step; ``state`` is a list of ``(h, c)`` per layer."""
        new_state = []
        for layer, (h, c) in zip(self.layers, state):
            h, c = layer.cell(x_t, h, c)
            new_state.append((h, c))
            x_t = h
        return x_t, new_state

    def zero_state(self, n: int, dtype=None):
        dtype = dtype or self.layers[0].W.value.dtype
        return [(np.zeros((n, self.hidden_size), dtype), np.zeros((n, self.hidden_size), dtype))
                for _ in self.layers]

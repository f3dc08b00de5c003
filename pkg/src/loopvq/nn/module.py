"""Parameter containers and the module base class.

Every module caches what its ``backward`` needs during ``forward``, so a
module instance supports one outstanding forward pass at a time. Gradients
accumulate into ``Parameter.grad`` until ``zero_grad`` is called.
"""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

DEFAULT_DTYPE = np.float32


class Parameter:
    __slots__ = ("value", "grad", "name")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


class Module:
    """Base class: parameter discovery, train/eval flag, state dicts."""

    # attribute names holding non-trainable arrays that belong in checkpoints
    buffer_names: Tuple[str, ...] = ()

    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, child in self._children():
            if isinstance(child, Parameter):
                yield prefix + name, child
            else:
                yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(prefix + name + ".")

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.value for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.value.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {p.value.shape}")
            p.value = value.astype(p.value.dtype).copy()
            p.grad = np.zeros_like(p.value)
        for name, buf in buffers.items():
            value = np.asarray(state[name])
            if value.shape != np.shape(buf):
                raise ValueError(f"{name}: shape {value.shape} does not match {np.shape(buf)}")
            owner, attr = self._resolve(name)
            setattr(owner, attr, value.astype(np.asarray(buf).dtype).copy())

    def _resolve(self, dotted: str):
        parts = dotted.split(".")
        owner = self
        i = 0
        while i < len(parts) - 1:
            nxt = getattr(owner, parts[i])
            if isinstance(nxt, (list, tuple)):
                nxt = nxt[int(parts[i + 1])]
                i += 1
            owner = nxt
            i += 1
        return owner, parts[-1]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        """Cast parameters and floating buffers in place."""
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        for m in self.modules():
            for name in m.buffer_names:
                buf = getattr(m, name)
                if isinstance(buf, np.ndarray) and np.issubdtype(buf.dtype, np.floating):
                    setattr(m, name, buf.astype(dtype))
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].value.dtype if params else DEFAULT_DTYPE

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)

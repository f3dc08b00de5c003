"""Autoregressive LSTM prior over VQ code sequences.

The first index of a sequence is drawn from the empirical start
distribution; the LSTM predicts every following index from the ones before.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import nn
from ..nn.functional import log_softmax, softmax, softmax_cross_entropy


@dataclass
class PriorConfig:
    num_codes: int = 512
    length: int = 32
    embed_dim: int = 64
    hidden: int = 128
    num_layers: int = 2


class CodePrior(nn.Module):
    buffer_names = ("start_probs",)

    def __init__(self, config: PriorConfig | None = None, rng=None, dtype=nn.DEFAULT_DTYPE):
        config = config or PriorConfig()
        rng = nn.default_rng(rng)
        self.config = config
        self.embed = nn.Embedding(config.num_codes, config.embed_dim, rng, dtype)
        self.lstm = nn.StackedLSTM(config.embed_dim, config.hidden, config.num_layers, rng, dtype)
        self.head = nn.Linear(config.hidden, config.num_codes, rng, dtype)
        self.start_probs = np.full(config.num_codes, 1.0 / config.num_codes)

    @property
    def kind(self) -> str:
        return "prior"

    def _check(self, codes) -> np.ndarray:
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[0] == 0:
            raise ValueError(f"expected a non-empty (N, t) code array, got shape {codes.shape}")
        if codes.min() < 0 or codes.max() >= self.config.num_codes:
            raise ValueError(f"code index out of range [0, {self.config.num_codes})")
        return codes.astype(np.int64)

    def fit_start(self, codes) -> None:
        codes = self._check(codes)
        counts = np.bincount(codes[:, 0], minlength=self.config.num_codes).astype(np.float64)
        self.start_probs = counts / counts.sum()

    def logits(self, codes) -> np.ndarray:
        """Next-index logits for positions ``1..t-1`` given positions ``0..t-2``."""
        codes = self._check(codes)
        h, _ = self.lstm.forward(self.embed.forward(codes[:, :-1]))
        return self.head.forward(h)

    def loss_and_grad(self, codes):
        codes = self._check(codes)
        logits = self.logits(codes)
        n, t1, k = logits.shape
        loss, dlogits = softmax_cross_entropy(logits.reshape(-1, k), codes[:, 1:].reshape(-1))
        dh = self.head.backward(dlogits.reshape(n, t1, k).astype(logits.dtype))
        self.embed.backward(self.lstm.backward(dh))
        return float(loss), logits

    def accuracy(self, codes) -> float:
        """Teacher-forced argmax next-index accuracy over positions ``1..t-1``."""
        codes = self._check(codes)
        if codes.shape[1] < 2:
            return 1.0
        pred = self.logits(codes).argmax(axis=-1)
        return float((pred == codes[:, 1:]).mean())

    def sample(self, n: int, temperature: float | None = None, rng=None) -> np.ndarray:
        """Draw ``n`` sequences; ``temperature=None`` selects argmax decoding.

        Argmax mode starts every sequence from the modal start index, so all
        ``n`` outputs coincide.
        """
        if temperature is not None and not temperature > 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        rng = nn.default_rng(rng)
        cfg = self.config
        out = np.zeros((n, cfg.length), dtype=np.int64)
        if n == 0:
            return out
        if temperature is None:
            out[:, 0] = int(np.argmax(self.start_probs))
        else:
            p0 = np.asarray(self.start_probs, dtype=np.float64)
            out[:, 0] = rng.choice(cfg.num_codes, size=n, p=p0 / p0.sum())
        state = self.lstm.zero_state(n, self.dtype)
        for pos in range(1, cfg.length):
            x = self.embed.weight.value[out[:, pos - 1]]
            h, state = self.lstm.step(x, state)
            logits = self.head.apply(h).astype(np.float64)
            if temperature is None:
                out[:, pos] = logits.argmax(axis=1)
            else:
                probs = softmax(logits / temperature, axis=1)
                u = rng.random((n, 1))
                out[:, pos] = np.minimum((probs.cumsum(axis=1) < u).sum(axis=1), cfg.num_codes - 1)
        return out

    def log_likelihood(self, codes) -> np.ndarray:
        codes = self._check(codes)
        lp = log_softmax(self.logits(codes).astype(np.float64), axis=-1)
        steps = np.take_along_axis(lp, codes[:, 1:, None], axis=-1)[..., 0].sum(axis=1)
        with np.errstate(divide="ignore"):
            return steps + np.log(self.start_probs[codes[:, 0]])

    def config_dict(self):
        return asdict(self.config)


def train_prior(codes, num_codes: int, n_epochs: int = 200, batch_size: int = 64, lr_max: float = 3e-3,
                lr_min: float = 5e-6, weight_decay: float = 0.01, rng=None, log=None,
                config: PriorConfig | None = None, target_accuracy: float | None = None):
    """Fit a :class:`CodePrior` by next-index cross-entropy.

    Returns ``(prior, accuracy)`` with the teacher-forced accuracy on
    ``codes``. Training stops early once ``target_accuracy`` is exceeded.
    """
    codes = np.asarray(codes)
    if codes.ndim != 2 or len(codes) == 0:
        raise ValueError("train_prior needs a non-empty (N, t) code corpus")
    rng = nn.default_rng(rng)
    config = config or PriorConfig(num_codes=num_codes, length=codes.shape[1])
    prior = CodePrior(config, rng)
    prior.fit_start(codes)
    opt = nn.AdamW(prior.parameters(), lr=lr_max, weight_decay=weight_decay)
    n = len(codes)
    batches = -(-n // batch_size)
    total = batches * n_epochs
    step = 0
    acc = prior.accuracy(codes)
    for epoch in range(n_epochs):
        order = rng.permutation(n)
        running = 0.0
        for b in range(batches):
            idx = order[b * batch_size:(b + 1) * batch_size]
            opt.zero_grad()
            loss, _ = prior.loss_and_grad(codes[idx])
            opt.step(nn.cosine_lr(step, total, lr_max, lr_min))
            step += 1
            running += loss * len(idx)
        acc = prior.accuracy(codes)
        if log is not None:
            log(f"epoch={epoch} loss={running / n:.6g} accuracy={acc:.4f}")
        if target_accuracy is not None and acc > target_accuracy:
            break
    return prior, acc

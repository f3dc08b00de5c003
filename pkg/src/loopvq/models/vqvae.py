"""VQ-VAE over pianorolls with an EMA-updated codebook.

The encoder compresses the ``(128, 93)`` roll to ``t`` latent vectors of width
``L``; each is replaced by its nearest codebook entry before decoding. The
decoder gradient at the quantized vectors is copied straight through to the
encoder output, and the codebook follows running means of the vectors
assigned to each entry instead of receiving gradients.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import asdict, dataclass
from typing import Dict, Tuple

import numpy as np

from .. import nn
from .. import pianoroll as pr
from ..formats import Reader, check_magic
from ..nn.functional import bce_with_logits


class Codebook(nn.Module):
    """``K x L`` dictionary tracked by exponential moving averages.

    ``ema_counts`` and ``ema_sums`` hold the decayed number and vector sum of
    encoder outputs assigned to each entry; every entry is their ratio, with
    the counts Laplace-smoothed so no entry divides by zero.
    """

    buffer_names = ("embeddings", "ema_counts", "ema_sums", "unused", "initialized")

    def __init__(self, num_codes: int = 512, dim: int = 16, decay: float = 0.99, eps: float = 1e-5,
                 dead_after: int = 100, rng=None, dtype=np.float64):
        if num_codes < 1:
            raise ValueError("codebook needs at least one entry")
        rng = nn.default_rng(rng)
        self.num_codes = num_codes
        self.dim = dim
        self.decay = decay
        self.eps = eps
        self.dead_after = dead_after
        self.embeddings = rng.standard_normal((num_codes, dim)).astype(dtype)
        self.ema_counts = np.ones(num_codes, dtype=dtype)
        self.ema_sums = self.embeddings * self._smoothed(self.ema_counts)[:, None]
        self.unused = np.zeros(num_codes, dtype=dtype)
        self.initialized = np.zeros((), dtype=dtype)

    def _smoothed(self, counts):
        n = counts.sum()
        return (counts + self.eps) / (n + self.num_codes * self.eps) * n

    def _refresh(self):
        smoothed = self._smoothed(self.ema_counts)
        ok = smoothed > 0
        self.embeddings[ok] = self.ema_sums[ok] / smoothed[ok, None]

    def set_entries(self, index, vectors):
        """Overwrite entries and their EMA state so the ratio reproduces ``vectors``."""
        self.embeddings[index] = vectors
        smoothed = self._smoothed(self.ema_counts)
        self.ema_sums[index] = np.asarray(vectors) * smoothed[index, None]
        self._refresh()

    def init_from(self, rows: np.ndarray, rng) -> None:
        """k-means++ seeding of every entry from a sample of encoder outputs."""
        rng = nn.default_rng(rng)
        rows = np.asarray(rows, dtype=np.float64)
        chosen = [int(rng.integers(len(rows)))]
        d2 = ((rows - rows[chosen[0]]) ** 2).sum(axis=1)
        for _ in range(1, self.num_codes):
            total = d2.sum()
            if total <= 0:
                k = int(rng.integers(len(rows)))
            else:
                k = int(rng.choice(len(rows), p=d2 / total))
            chosen.append(k)
            d2 = np.minimum(d2, ((rows - rows[k]) ** 2).sum(axis=1))
        self.ema_counts[:] = 1.0
        self.unused[:] = 0
        self.set_entries(np.arange(self.num_codes), rows[chosen])
        self.initialized[()] = 1.0

    def distances(self, z: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Squared L2 distance from every row of ``z`` to every entry.

        Differences are formed explicitly (not via the ``|z|^2 - 2ze + |e|^2``
        expansion) so points equidistant from two entries compare equal.
        """
        z = np.asarray(z, dtype=np.float64)
        e = self.embeddings.astype(np.float64)
        out = np.empty((len(z), len(e)))
        for start in range(0, len(z), chunk):
            diff = z[start:start + chunk, None, :] - e[None]
            out[start:start + chunk] = np.einsum("nkl,nkl->nk", diff, diff)
        return out

    def nearest(self, z: np.ndarray) -> np.ndarray:
        """Index of the closest entry per row; ties go to the lowest index."""
        z = np.asarray(z)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ValueError(f"expected rows of width {self.dim}, got shape {z.shape}")
        return self.distances(z).argmin(axis=1)

    def lookup(self, index) -> np.ndarray:
        index = np.asarray(index)
        if index.size and (index.min() < 0 or index.max() >= self.num_codes):
            raise ValueError(f"code index out of range [0, {self.num_codes})")
        return self.embeddings[index]

    def ema_update(self, z: np.ndarray, index: np.ndarray, rng=None) -> None:
        """Fold a batch of assigned rows into the running centroids.

        Entries left unassigned for ``dead_after`` consecutive updates are
        re-seeded from random rows of the batch when ``rng`` is given.
        """
        z = np.asarray(z, dtype=self.ema_sums.dtype)
        index = np.asarray(index)
        counts = np.bincount(index, minlength=self.num_codes).astype(self.ema_counts.dtype)
        sums = np.zeros_like(self.ema_sums)
        np.add.at(sums, index, z)
        g = self.decay
        self.ema_counts = g * self.ema_counts + (1 - g) * counts
        self.ema_sums = g * self.ema_sums + (1 - g) * sums
        self._refresh()
        self.unused = np.where(counts > 0, 0, self.unused + 1)
        if rng is not None and self.dead_after > 0 and len(z):
            dead = np.nonzero(self.unused >= self.dead_after)[0]
            if dead.size:
                picks = rng.integers(len(z), size=dead.size)
                self.ema_counts[dead] = 1.0
                self.unused[dead] = 0
                self.set_entries(dead, z[picks])

    def perplexity(self, index: np.ndarray) -> float:
        p = np.bincount(np.asarray(index).reshape(-1), minlength=self.num_codes) / max(np.size(index), 1)
        p = p[p > 0]
        return float(np.exp(-(p * np.log(p)).sum()))


def quantize_nearest(z: np.ndarray, codebook: Codebook) -> Tuple[np.ndarray, np.ndarray]:
    """Map each row of ``z`` to its nearest entry; returns ``(indices, quantized rows)``."""
    idx = codebook.nearest(z)
    return idx, codebook.embeddings[idx]


@dataclass
class VqConfig:
    t: int = 32
    latent_dim: int = 16
    num_codes: int = 512
    beta: float = 0.25
    decay: float = 0.99
    eps: float = 1e-5
    dead_after: int = 100
    channels: int = 32
    embed_channels: int = 64
    n_steps: int = pr.N_STEPS
    n_pitches: int = pr.N_PITCHES

    def __post_init__(self):
        ratio = self.n_steps // self.t
        if self.t < 1 or self.n_steps % self.t or ratio & (ratio - 1) or ratio > 8:
            raise ValueError(f"t must divide {self.n_steps} by a power of two up to 8, got t={self.t}")

    @property
    def downsamples(self) -> int:
        return int(math.log2(self.n_steps // self.t))


class VQVAE(nn.Module):
    def __init__(self, config: VqConfig | None = None, rng=None, dtype=nn.DEFAULT_DTYPE):
        config = config or VqConfig()
        rng = nn.default_rng(rng)
        self.config = config
        c, L, d = config.channels, config.latent_dim, config.downsamples
        strides = [2 if i < d else 1 for i in range(3)]
        self.encoder = nn.Sequential(
            nn.conv_block(config.n_pitches, config.embed_channels, 1, 0, 1, rng, dtype),
            nn.conv_block(config.embed_channels, c, 1, 0, 1, rng, dtype),
            nn.conv_block(c, c, 3, 1, strides[0], rng, dtype), nn.ResBlock(c, 3, 1, 1, rng, dtype),
            nn.conv_block(c, c, 3, 1, strides[1], rng, dtype), nn.ResBlock(c, 3, 1, 1, rng, dtype),
            nn.conv_block(c, L, 3, 1, strides[2], rng, dtype), nn.ResBlock(L, 3, 1, 1, rng, dtype),
        )
        dec = [nn.conv_block(L, c, 3, 1, 1, rng, dtype)]
        for i in range(max(2, d)):
            if i < d:
                dec.append(nn.Upsample(2))
            dec.append(nn.ResBlock(c, 3, 1, 1, rng, dtype))
        dec += [nn.conv_block(c, config.embed_channels, 1, 0, 1, rng, dtype),
                nn.Conv1d(config.embed_channels, config.n_pitches, 3, 1, 1, rng, dtype)]
        self.decoder = nn.Sequential(*dec)
        self.codebook = Codebook(config.num_codes, L, config.decay, config.eps, config.dead_after, rng, dtype)

    @property
    def kind(self) -> str:
        return "vq-vae"

    def _input(self, x):
        x = np.asarray(x)
        expected = (self.config.n_steps, self.config.n_pitches)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise ValueError(f"expected pianoroll batch (N, {expected[0]}, {expected[1]}), got {x.shape}")
        return x.astype(self.dtype).transpose(0, 2, 1)

    def encode(self, x) -> np.ndarray:
        """Continuous encoder output, ``(N, t, L)``."""
        ze = self.encoder.forward(self._input(x))
        return ze.transpose(0, 2, 1)

    def decode_latents(self, q: np.ndarray) -> np.ndarray:
        """Decoder logits ``(N, 128, 93)`` from latent vectors ``(N, t, L)``."""
        return self.decoder.forward(np.asarray(q, dtype=self.dtype).transpose(0, 2, 1)).transpose(0, 2, 1)

    def train_step(self, x, rng=None) -> Dict[str, float]:
        """Forward, backward and codebook update for one batch.

        Parameter gradients are accumulated; the caller runs the optimizer.
        """
        rng = nn.default_rng(rng)
        xin = self._input(x)
        n = xin.shape[0]
        L, t = self.config.latent_dim, self.config.t
        ze = self.encoder.forward(xin)  # (N, L, t)
        rows = ze.transpose(0, 2, 1).reshape(-1, L)
        if not self.codebook.initialized:
            self.codebook.init_from(rows, rng)
        idx, qrows = quantize_nearest(rows, self.codebook)
        q = qrows.reshape(n, t, L).transpose(0, 2, 1).astype(ze.dtype)
        logits = self.decoder.forward(q)
        recon, dlogits = bce_with_logits(logits, xin)
        diff = ze - q
        commit = float((diff.astype(np.float64) ** 2).mean())
        loss = recon + self.config.beta * commit
        if not np.isfinite(loss):
            raise nn.TrainingError(f"non-finite loss: recon={recon} commit={commit}")
        dq = self.decoder.backward(dlogits.astype(ze.dtype))
        # straight-through: the quantizer passes its output gradient unchanged
        dze = dq + self.config.beta * 2.0 * diff / diff.size
        self.encoder.backward(dze.astype(ze.dtype))
        self.codebook.ema_update(rows, idx, rng)
        return {"loss": float(loss), "recon": float(recon), "commit": commit,
                "perplexity": self.codebook.perplexity(idx),
                "codes_used": int(np.unique(idx).size)}

    def encode_to_codes(self, x) -> np.ndarray:
        """``(N, t)`` integer code sequences (eval mode)."""
        x = np.asarray(x)
        was_training = self.training
        self.eval()
        try:
            ze = self.encode(x)
        finally:
            self.train(was_training)
        idx = self.codebook.nearest(ze.reshape(-1, self.config.latent_dim))
        return idx.reshape(x.shape[0], self.config.t).astype(np.int64)

    def decode_codes(self, codes) -> np.ndarray:
        """Binary pianorolls ``(N, 128, 93)`` from ``(N, t)`` code sequences."""
        codes = np.asarray(codes)
        if codes.ndim == 1:
            codes = codes[None]
        if codes.shape[1] != self.config.t:
            raise ValueError(f"code sequences must have length {self.config.t}, got {codes.shape}")
        q = self.codebook.lookup(codes)
        was_training = self.training
        self.eval()
        try:
            logits = self.decode_latents(q)
        finally:
            self.train(was_training)
        return (logits >= 0).astype(np.uint8)

    def reconstruct(self, x) -> np.ndarray:
        return self.decode_codes(self.encode_to_codes(x))

    def config_dict(self) -> Dict:
        return asdict(self.config)


@dataclass
class VqEpochReport:
    epoch: int
    lr: float
    recon: float
    commit: float
    perplexity: float
    codes_used: int

    def line(self) -> str:
        return (f"epoch={self.epoch} lr={self.lr:.6g} recon={self.recon:.6g} commit={self.commit:.6g} "
                f"perplexity={self.perplexity:.4g} codes_used={self.codes_used}")


class VqTrainer:
    def __init__(self, model: VQVAE, n_epochs: int, batch_size: int = 16, lr_max: float = 1e-3,
                 lr_min: float = 5e-6, weight_decay: float = 0.01, rng=None):
        self.model = model
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.rng = nn.default_rng(rng)
        self.optimizer = nn.AdamW(model.parameters(), lr=lr_max, weight_decay=weight_decay)
        self.step_count = 0
        self.total_steps = None

    def train_epoch(self, data: np.ndarray, epoch: int) -> VqEpochReport:
        n = len(data)
        if n == 0:
            raise ValueError("empty training set")
        batches = max(1, -(-n // self.batch_size))
        if self.total_steps is None:
            self.total_steps = batches * self.n_epochs
        order = self.rng.permutation(n)
        self.model.train()
        sums = {"recon": 0.0, "commit": 0.0, "perplexity": 0.0}
        used = set()
        lr = self.lr_max
        for b in range(batches):
            idx = order[b * self.batch_size:(b + 1) * self.batch_size]
            lr = nn.cosine_lr(self.step_count, self.total_steps, self.lr_max, self.lr_min)
            self.optimizer.zero_grad()
            out = self.model.train_step(data[idx], self.rng)
            self.optimizer.step(lr)
            self.step_count += 1
            for k in sums:
                sums[k] += out[k] * len(idx)
        return VqEpochReport(epoch, lr, sums["recon"] / n, sums["commit"] / n, sums["perplexity"] / n,
                             int(np.unique(self.model.encode_to_codes(data)).size) if n <= 4096 else -1)

    def fit(self, data: np.ndarray, log=None):
        reports = []
        for epoch in range(self.n_epochs):
            rep = self.train_epoch(data, epoch)
            reports.append(rep)
            if log is not None:
                log(rep)
        return reports


# --------------------------------------------------------------------------
# latent-code utilities
# --------------------------------------------------------------------------

def manipulate_codes(codes, length: int = 32) -> np.ndarray:
    """Copy latent steps 0 and 1 onto the steps that start the second half.

    With 32 steps (4 per bar) this makes the opening of bar 5 repeat the
    opening of bar 1. Works on one sequence or a batch.
    """
    codes = np.array(codes, copy=True)
    if codes.shape[-1] != length:
        raise ValueError(f"code sequences must have length {length}, got {codes.shape[-1]}")
    half = length // 2
    codes[..., half] = codes[..., 0]
    codes[..., half + 1] = codes[..., 1]
    return codes


def code_histograms(codes: np.ndarray, num_codes: int) -> np.ndarray:
    """``(t, K)`` count of each index at each latent position."""
    codes = np.asarray(codes)
    if codes.ndim != 2 or len(codes) == 0:
        raise ValueError("need a non-empty (N, t) code array")
    hist = np.zeros((codes.shape[1], num_codes), dtype=np.int64)
    for pos in range(codes.shape[1]):
        hist[pos] = np.bincount(codes[:, pos], minlength=num_codes)
    return hist


def code_frequency_report(codes: np.ndarray, num_codes: int, ranks: int = 2) -> Dict[str, np.ndarray]:
    """Per-position most and least frequent indices.

    ``most[r]`` is the sequence built from each position's ``r``-th most
    frequent index; ``least[r]`` likewise from the rarest indices that occur
    at least once. Ties resolve to the lower index.
    """
    hist = code_histograms(codes, num_codes)
    t = hist.shape[0]
    most = np.zeros((ranks, t), dtype=np.int64)
    least = np.zeros((ranks, t), dtype=np.int64)
    for pos in range(t):
        counts = hist[pos]
        by_most = np.lexsort((np.arange(num_codes), -counts))
        seen = np.nonzero(counts)[0]
        by_least = seen[np.lexsort((seen, counts[seen]))]
        for r in range(ranks):
            most[r, pos] = by_most[min(r, num_codes - 1)]
            least[r, pos] = by_least[min(r, len(by_least) - 1)]
    return {"histogram": hist, "most": most, "least": least}


# --------------------------------------------------------------------------
# code cache file:  b"CODE", u32 K, u32 t, u32 count, count x t u16 indices
# --------------------------------------------------------------------------

CODES_MAGIC = b"CODE"


def codes_to_bytes(codes: np.ndarray, num_codes: int) -> bytes:
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError("codes must be a (count, t) array")
    if num_codes > 65536 or (codes.size and (codes.min() < 0 or codes.max() >= num_codes)):
        raise ValueError("code indices must lie in [0, K) with K <= 65536")
    header = CODES_MAGIC + struct.pack("<III", num_codes, codes.shape[1], codes.shape[0])
    return header + codes.astype("<u2").tobytes()


def codes_from_bytes(data: bytes, what: str = "codes") -> Tuple[np.ndarray, int]:
    reader = Reader(data, what)
    check_magic(reader, CODES_MAGIC)
    num_codes, t, count = reader.unpack("III")
    codes = np.frombuffer(reader.take(2 * t * count), dtype="<u2").reshape(count, t).astype(np.int64)
    reader.expect_end()
    return codes, num_codes


def save_codes(path, codes: np.ndarray, num_codes: int) -> None:
    with open(path, "wb") as fh:
        fh.write(codes_to_bytes(codes, num_codes))


def load_codes(path) -> Tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        return codes_from_bytes(fh.read(), what=os.fspath(path))

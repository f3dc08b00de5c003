"""Continuous-latent VAE baselines: AR LSTM-VAE, NonAR LSTM-VAE and CNN-VAE.

All three share one objective: per-sample summed binary cross-entropy on the
pianoroll logits plus ``beta * KL(q(z|x) || N(0, I))``. The posterior mean
goes through a gain-free layer norm, the variance head predicts log-variance.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .. import nn
from .. import pianoroll as pr
from ..nn.functional import bce_with_logits, sigmoid

KINDS = ("ar-lstm", "nonar-lstm", "cnn")


@dataclass
class VaeConfig:
    kind: str = "ar-lstm"
    latent_dim: Optional[int] = None
    encoder_hidden: int = 128
    nonar_hidden: int = 256
    channels: int = 32
    beta_max: float = 1.0
    beta_warmup: float = 0.25  # fraction of epochs spent ramping beta up
    sampling_rate: float = 20.0  # inverse-sigmoid rate for scheduled sampling
    n_steps: int = pr.N_STEPS
    n_pitches: int = pr.N_PITCHES

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown VAE kind {self.kind!r}; expected one of {KINDS}")
        if self.latent_dim is None:
            self.latent_dim = 512 if self.kind == "cnn" else 128
        if self.kind == "cnn" and self.n_steps % 8:
            raise ValueError("cnn kind needs n_steps divisible by 8")


@dataclass
class GaussianLatent:
    mu: np.ndarray
    log_var: np.ndarray

    def sample(self, noise: np.ndarray) -> np.ndarray:
        return reparameterize(self, noise)


def reparameterize(lat: GaussianLatent, noise: np.ndarray) -> np.ndarray:
    """``z = mu + exp(log_var / 2) * noise``."""
    return lat.mu + np.exp(0.5 * lat.log_var) * noise


def kl_gaussian(lat: GaussianLatent) -> float:
    """KL to the standard normal, summed over latent dims, averaged over the batch."""
    mu = np.atleast_2d(lat.mu).astype(np.float64)
    lv = np.atleast_2d(lat.log_var).astype(np.float64)
    return float(0.5 * (mu ** 2 + np.exp(lv) - 1.0 - lv).sum() / mu.shape[0])


def kl_gaussian_grad(lat: GaussianLatent):
    n = np.atleast_2d(lat.mu).shape[0]
    return lat.mu / n, 0.5 * (np.exp(lat.log_var) - 1.0) / n


def beta_schedule(epoch: int, n_epochs: int, beta_max: float = 1.0, warmup: float = 0.25) -> float:
    """Linear ramp from 0 over the first ``warmup`` fraction of epochs, then flat."""
    ramp = max(1, int(round(warmup * n_epochs)))
    return beta_max * min(1.0, epoch / ramp)


class _GaussianHeads(nn.Module):
    def __init__(self, in_features: int, latent: int, rng, dtype):
        self.mu = nn.Linear(in_features, latent, rng, dtype)
        self.mu_norm = nn.LayerNorm(latent, affine=False)
        self.log_var = nn.Linear(in_features, latent, rng, dtype)

    def forward(self, h):
        return GaussianLatent(self.mu_norm.forward(self.mu.forward(h)), self.log_var.forward(h))

    def backward(self, dmu, dlog_var):
        return self.mu.backward(self.mu_norm.backward(dmu)) + self.log_var.backward(dlog_var)


class LstmEncoder(nn.Module):
    def __init__(self, cfg: VaeConfig, rng, dtype):
        self.lstm = nn.BiLSTM(cfg.n_pitches, cfg.encoder_hidden, rng, dtype)
        self.heads = _GaussianHeads(2 * cfg.encoder_hidden, cfg.latent_dim, rng, dtype)

    def forward(self, x):
        _, h = self.lstm.forward(x)
        return self.heads.forward(h)

    def backward(self, dmu, dlog_var):
        dh = self.heads.backward(dmu, dlog_var)
        return self.lstm.backward(None, dh)


class CnnEncoder(nn.Module):
    def __init__(self, cfg: VaeConfig, rng, dtype):
        c = cfg.channels
        self.body = nn.Sequential(
            nn.conv_block(cfg.n_pitches, c, 3, 1, 1, rng, dtype),
            nn.conv_block(c, c, 3, 1, 2, rng, dtype),
            nn.ResBlock(c, 3, 1, 1, rng, dtype),
            nn.conv_block(c, c, 3, 1, 2, rng, dtype),
            nn.ResBlock(c, 3, 1, 1, rng, dtype),
        )
        self.flat_shape = (c, cfg.n_steps // 4)
        self.heads = _GaussianHeads(c * cfg.n_steps // 4, cfg.latent_dim, rng, dtype)

    def forward(self, x):
        h = self.body.forward(x.transpose(0, 2, 1))
        return self.heads.forward(h.reshape(h.shape[0], -1))

    def backward(self, dmu, dlog_var):
        dh = self.heads.backward(dmu, dlog_var)
        dx = self.body.backward(dh.reshape((-1,) + self.flat_shape))
        return dx.transpose(0, 2, 1)


class ArDecoder(nn.Module):
    """LSTM whose state starts at ``z`` and whose input is ``[previous frame, z]``.

    The previous frame is the ground truth with probability ``teacher_prob``
    (per sample and step) and otherwise the model's own thresholded output.
    """

    def __init__(self, cfg: VaeConfig, rng, dtype):
        self.n_pitches = cfg.n_pitches
        self.n_steps = cfg.n_steps
        self.lstm = nn.LSTM(cfg.n_pitches + cfg.latent_dim, cfg.latent_dim, rng, dtype)
        self.head = nn.Linear(cfg.latent_dim, cfg.n_pitches, rng, dtype)

    def forward(self, z, x=None, teacher_prob: float = 0.0, rng=None):
        n = z.shape[0]
        P = self.n_pitches
        if teacher_prob > 0 and x is None:
            raise ValueError("teacher forcing needs the target pianoroll x")
        rng = np.random.default_rng(rng)
        self.lstm.begin(n, z, z.copy())
        prev = np.zeros((n, P), dtype=z.dtype)
        for t in range(self.n_steps):
            h = self.lstm.step(np.concatenate([prev, z], axis=1))
            if t == self.n_steps - 1:
                break
            if teacher_prob >= 1.0:
                prev = x[:, t].astype(z.dtype)
                continue
            pred = (self.head.apply(h) >= 0).astype(z.dtype)
            if teacher_prob > 0:
                use_truth = rng.random(n) < teacher_prob
                pred[use_truth] = x[use_truth, t]
            prev = pred
        hs, _ = self.lstm.end()
        return self.head.forward(hs)

    def backward(self, dlogits):
        dhs = self.head.backward(dlogits)
        dx, dh0, dc0 = self.lstm.backward(dhs)
        return dh0 + dc0 + dx[..., self.n_pitches:].sum(axis=1)


class NonArDecoder(nn.Module):
    """``z`` repeated at every step, fed to an LSTM, then a per-step linear head."""

    def __init__(self, cfg: VaeConfig, rng, dtype):
        self.n_steps = cfg.n_steps
        self.lstm = nn.LSTM(cfg.latent_dim, cfg.nonar_hidden, rng, dtype)
        self.head = nn.Linear(cfg.nonar_hidden, cfg.n_pitches, rng, dtype)

    def forward(self, z, x=None, teacher_prob: float = 0.0, rng=None):
        zr = np.repeat(z[:, None, :], self.n_steps, axis=1)
        hs, _ = self.lstm.forward(zr)
        return self.head.forward(hs)

    def backward(self, dlogits):
        dx, _, _ = self.lstm.backward(self.head.backward(dlogits))
        return dx.sum(axis=1)


class CnnDecoder(nn.Module):
    def __init__(self, cfg: VaeConfig, rng, dtype):
        c = cfg.channels
        self.seed_shape = (c, cfg.n_steps // 8)
        self.fc = nn.Linear(cfg.latent_dim, c * cfg.n_steps // 8, rng, dtype)
        self.body = nn.Sequential(
            nn.Upsample(2), nn.ResBlock(c, 3, 1, 1, rng, dtype),
            nn.Upsample(2), nn.ResBlock(c, 3, 1, 1, rng, dtype),
            nn.Upsample(2), nn.Conv1d(c, cfg.n_pitches, 7, 3, 1, rng, dtype),
        )

    def forward(self, z, x=None, teacher_prob: float = 0.0, rng=None):
        h = self.fc.forward(z).reshape((-1,) + self.seed_shape)
        return self.body.forward(h).transpose(0, 2, 1)

    def backward(self, dlogits):
        dh = self.body.backward(dlogits.transpose(0, 2, 1))
        return self.fc.backward(dh.reshape(dh.shape[0], -1))


_PARTS = {
    "ar-lstm": (LstmEncoder, ArDecoder),
    "nonar-lstm": (LstmEncoder, NonArDecoder),
    "cnn": (CnnEncoder, CnnDecoder),
}


class ContinuousVAE(nn.Module):
    def __init__(self, config: VaeConfig | str = "ar-lstm", rng=None, dtype=nn.DEFAULT_DTYPE):
        if isinstance(config, str):
            config = VaeConfig(kind=config)
        rng = nn.default_rng(rng)
        self.config = config
        enc_cls, dec_cls = _PARTS[config.kind]
        self.encoder = enc_cls(config, rng, dtype)
        self.decoder = dec_cls(config, rng, dtype)

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def _input(self, x):
        x = np.asarray(x)
        expected = (self.config.n_steps, self.config.n_pitches)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise ValueError(f"expected pianoroll batch (N, {expected[0]}, {expected[1]}), got {x.shape}")
        return x.astype(self.dtype)

    def encode(self, x) -> GaussianLatent:
        return self.encoder.forward(self._input(x))

    def decode_logits(self, z, x=None, teacher_prob: float = 0.0, rng=None):
        z = np.asarray(z, dtype=self.dtype)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latent batch (N, {self.latent_dim}), got {z.shape}")
        if x is not None:
            x = self._input(x)
        return self.decoder.forward(z, x, teacher_prob, rng)

    def decode(self, z, mode: str = "full-sampling", x=None, teacher_prob: float = 1.0, rng=None):
        """Probabilities in (0, 1) of shape ``(N, 128, 93)``.

        ``mode="teacher-forced"`` needs ``x``; it only changes the AR decoder.
        """
        if mode == "teacher-forced":
            if x is None:
                raise ValueError("teacher-forced decoding needs x")
            logits = self.decode_logits(z, x, teacher_prob, rng)
        elif mode == "full-sampling":
            logits = self.decode_logits(z)
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        return sigmoid(logits)

    def loss_and_grad(self, x, beta: float, rng, teacher_prob: float = 1.0) -> Dict[str, float]:
        """One forward/backward pass; gradients accumulate into the parameters."""
        x = self._input(x)
        n = x.shape[0]
        lat = self.encoder.forward(x)
        noise = rng.standard_normal(lat.mu.shape).astype(self.dtype)
        std = np.exp(0.5 * lat.log_var)
        z = lat.mu + std * noise
        logits = self.decoder.forward(z, x, teacher_prob, rng)
        recon_sum, dlogits = bce_with_logits(logits, x, reduction="sum")
        recon = recon_sum / n
        kl = kl_gaussian(lat)
        loss = recon + beta * kl
        if not np.isfinite(loss):
            raise nn.TrainingError(f"non-finite loss: recon={recon} kl={kl} beta={beta}")
        dz = self.decoder.backward((dlogits / n).astype(self.dtype))
        dmu_kl, dlv_kl = kl_gaussian_grad(lat)
        dmu = dz + beta * dmu_kl
        dlv = dz * noise * 0.5 * std + beta * dlv_kl
        self.encoder.backward(dmu.astype(self.dtype), dlv.astype(self.dtype))
        return {"loss": float(loss), "recon": float(recon), "kl": float(kl)}

    def reconstruct(self, x) -> np.ndarray:
        """Binary reconstruction from the posterior mean, decoded without teacher forcing."""
        was_training = self.training
        self.eval()
        try:
            lat = self.encode(x)
            return (self.decode_logits(lat.mu) >= 0).astype(np.uint8)
        finally:
            self.train(was_training)

    def generate(self, n: int, rng=None) -> np.ndarray:
        """Decode ``n`` draws from the standard-normal prior, thresholded at 0.5."""
        rng = nn.default_rng(rng)
        shape = (self.config.n_steps, self.config.n_pitches)
        if n == 0:
            return np.zeros((0,) + shape, dtype=np.uint8)
        was_training = self.training
        self.eval()
        try:
            z = rng.standard_normal((n, self.latent_dim)).astype(self.dtype)
            return (self.decode_logits(z) >= 0).astype(np.uint8)
        finally:
            self.train(was_training)

    def config_dict(self) -> Dict:
        return asdict(self.config)


@dataclass
class EpochReport:
    epoch: int
    lr: float
    recon: float
    kl: float
    beta: float
    teacher_prob: float = 1.0

    def line(self) -> str:
        return (f"epoch={self.epoch} lr={self.lr:.6g} recon={self.recon:.6g} "
                f"kl={self.kl:.6g} beta={self.beta:.4g}")


class VaeTrainer:
    """AdamW with per-step cosine annealing, beta warm-up and scheduled sampling."""

    def __init__(self, model: ContinuousVAE, n_epochs: int, batch_size: int = 64, lr_max: float = 1e-3,
                 lr_min: float = 5e-6, weight_decay: float = 0.01, rng=None, beta_max: float | None = None,
                 scheduled_sampling: bool = True, clip_norm: float | None = 1.0):
        self.model = model
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.rng = nn.default_rng(rng)
        self.beta_max = model.config.beta_max if beta_max is None else beta_max
        self.scheduled_sampling = scheduled_sampling
        self.clip_norm = clip_norm
        self.optimizer = nn.AdamW(model.parameters(), lr=lr_max, weight_decay=weight_decay)
        self.step_count = 0
        self.total_steps = None

    def beta(self, epoch: int) -> float:
        return beta_schedule(epoch, self.n_epochs, self.beta_max, self.model.config.beta_warmup)

    def teacher_prob(self, epoch: int) -> float:
        if self.model.kind != "ar-lstm":
            return 1.0
        if not self.scheduled_sampling:
            return 1.0
        return nn.inverse_sigmoid_schedule(epoch, self.model.config.sampling_rate)

    def train_epoch(self, data: np.ndarray, epoch: int) -> EpochReport:
        n = len(data)
        if n == 0:
            raise ValueError("empty training set")
        batches = max(1, -(-n // self.batch_size))
        if self.total_steps is None:
            self.total_steps = batches * self.n_epochs
        beta = self.beta(epoch)
        tp = self.teacher_prob(epoch)
        order = self.rng.permutation(n)
        self.model.train()
        recon = kl = 0.0
        lr = self.lr_max
        for b in range(batches):
            idx = order[b * self.batch_size:(b + 1) * self.batch_size]
            lr = nn.cosine_lr(self.step_count, self.total_steps, self.lr_max, self.lr_min)
            self.optimizer.zero_grad()
            out = self.model.loss_and_grad(data[idx], beta, self.rng, tp)
            if self.clip_norm:
                nn.clip_grad_norm(self.optimizer.params, self.clip_norm)
            self.optimizer.step(lr)
            self.step_count += 1
            recon += out["recon"] * len(idx)
            kl += out["kl"] * len(idx)
        return EpochReport(epoch, lr, recon / n, kl / n, beta, tp)

    def fit(self, data: np.ndarray, log=None) -> List[EpochReport]:
        reports = []
        for epoch in range(self.n_epochs):
            rep = self.train_epoch(data, epoch)
            reports.append(rep)
            if log is not None:
                log(rep)
        return reports

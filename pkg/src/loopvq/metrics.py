"""Musical metrics for loop corpora.

Every metric takes a stack of ``(128, 93)`` pianorolls (or code sequences for
the overlap/uniqueness pair) and returns a corpus-level average.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import pianoroll as pr

METRIC_KEYS = ("hd", "fnd", "fnb", "db", "os", "us", "up", "nd")


def _samples(samples) -> np.ndarray:
    s = np.asarray(samples)
    if s.ndim == 2:
        s = s[None]
    if s.ndim != 3 or s.shape[1:] != (pr.N_STEPS, pr.N_PITCHES):
        raise ValueError(f"expected pianorolls of shape (N, {pr.N_STEPS}, {pr.N_PITCHES}), got {s.shape}")
    if len(s) == 0:
        raise ValueError("metric of an empty sample set is undefined")
    return s


def metric_hd(samples) -> float:
    """Mean hamming distance between bar 1 and bar 5."""
    s = _samples(samples)
    b0 = s[:, :pr.STEPS_PER_BAR]
    b4 = s[:, 4 * pr.STEPS_PER_BAR:5 * pr.STEPS_PER_BAR]
    return float((b0 != b4).sum(axis=(1, 2)).mean() / pr.CELLS_PER_BAR)


def metric_first_note(samples):
    """``(fnd, fnb)``: fraction with kick and crash, and with any bass, at step 0."""
    s = _samples(samples)
    first = s[:, 0]
    fnd = np.mean((first[:, pr.KICK_ROW] == 1) & (first[:, pr.CRASH_ROW] == 1))
    fnb = np.mean(first[:, :pr.N_BASS].any(axis=1))
    return float(fnd), float(fnb)


def metric_dup_bass(samples) -> float:
    """Mean fraction of steps with two or more bass rows sounding."""
    s = _samples(samples)
    dup = s[:, :, :pr.N_BASS].sum(axis=2, dtype=np.int64) >= 2
    return float(dup.mean())


def metric_overlap_unique(generated_codes, training_codes):
    """``(os, us)`` computed on exact code sequences."""
    gen = np.asarray(generated_codes)
    if gen.ndim != 2 or len(gen) == 0:
        raise ValueError("need a non-empty (N, t) array of generated codes")
    train = {tuple(row) for row in np.asarray(training_codes).tolist()}
    rows = [tuple(row) for row in gen.tolist()]
    os_ = sum(r in train for r in rows) / len(rows)
    us = len(set(rows)) / len(rows)
    return float(os_), float(us)


def metric_pitch_density(samples):
    """``(up, nd)``: active rows per bar, and note onsets per bar divided by 16."""
    s = _samples(samples)
    bars = s.reshape(len(s), pr.N_BARS, pr.STEPS_PER_BAR, pr.N_PITCHES)
    up = float(bars.any(axis=2).sum(axis=2).mean())
    padded = np.concatenate([np.zeros((len(s), 1, pr.N_PITCHES), dtype=np.int8), s.astype(np.int8)], axis=1)
    onsets = np.diff(padded, axis=1) == 1
    per_bar = onsets.reshape(len(s), pr.N_BARS, -1).sum(axis=2)
    nd = float(per_bar.mean() / pr.STEPS_PER_BAR)
    return up, nd


def reconstruction_error(model, data) -> float:
    """Per-cell mismatch rate between ``model.reconstruct(data)`` and ``data``."""
    data = _samples(data)
    recon = np.asarray(model.reconstruct(data))
    return float((recon != data).mean())


@dataclass
class MetricReport:
    hd: float
    fnd: float
    fnb: float
    db: float
    up: float
    nd: float
    n_samples: int
    os: Optional[float] = None
    us: Optional[float] = None
    reconstruction_error: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate_all(generated, training=None, generated_codes=None, training_codes=None,
                 recon_error: float | None = None) -> MetricReport:
    """Score ``generated``; overlap and uniqueness need both code sets.

    ``training`` is accepted for symmetry with the command line but only the
    code-level comparison uses the training corpus.
    """
    gen = _samples(generated)
    fnd, fnb = metric_first_note(gen)
    up, nd = metric_pitch_density(gen)
    report = MetricReport(hd=metric_hd(gen), fnd=fnd, fnb=fnb, db=metric_dup_bass(gen), up=up, nd=nd,
                          n_samples=len(gen), reconstruction_error=recon_error)
    if generated_codes is not None and training_codes is not None:
        if len(generated_codes) != len(gen):
            raise ValueError(f"{len(generated_codes)} code sequences for {len(gen)} samples")
        report.os, report.us = metric_overlap_unique(generated_codes, training_codes)
    return report

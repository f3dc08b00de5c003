"""Generative models and checkpoint helpers shared by the command line."""

from __future__ import annotations

from .. import nn
from .continuous import KINDS as CONTINUOUS_KINDS
from .continuous import ContinuousVAE, VaeConfig, VaeTrainer
from .prior import CodePrior, PriorConfig, train_prior
from .vqvae import VQVAE, Codebook, VqConfig, VqTrainer, manipulate_codes, quantize_nearest

__all__ = [
    "CONTINUOUS_KINDS", "ContinuousVAE", "VaeConfig", "VaeTrainer", "CodePrior", "PriorConfig", "train_prior",
    "VQVAE", "Codebook", "VqConfig", "VqTrainer", "manipulate_codes", "quantize_nearest",
    "save_model", "load_model",
]


def save_model(path, model, extra: dict | None = None) -> None:
    """Write ``model`` with its kind tag and constructor config."""
    config = {"model": model.config_dict()}
    if extra:
        config["extra"] = extra
    nn.save_checkpoint(path, model.kind, model.state_dict(), config)


def load_model(path):
    """Rebuild a model from a checkpoint written by :func:`save_model`."""
    kind, config, state = nn.load_checkpoint(path)
    cfg = config.get("model", {})
    if kind in CONTINUOUS_KINDS:
        model = ContinuousVAE(VaeConfig(**cfg), rng=0)
    elif kind == "vq-vae":
        model = VQVAE(VqConfig(**cfg), rng=0)
    elif kind == "prior":
        model = CodePrior(PriorConfig(**cfg), rng=0)
    else:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    model.load_state_dict(state)
    model.eval()
    return model

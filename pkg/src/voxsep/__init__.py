"""Time-domain monaural singing-voice separation toolkit.

A latent-masking network serially composed with a skip-connection
denoiser, trainable with deep supervision, plus two baselines, the full
filter-projection evaluation protocol (SDR/SIR/SAR, PES, VAD), paired
significance tests, and a reproducible CLI.
"""

from . import audio_io, cli, denoiser, diffcore, masker, metrics, trainer
from .denoiser import Denoiser, DenoiserConfig, HybridModel, build_htmd
from .masker import Masker, MaskerConfig, receptive_field
from .trainer import LossSpec, TrainConfig, deep_loss, loss_preset, train

__version__ = "0.1.0"

__all__ = [
    "audio_io", "cli", "denoiser", "diffcore", "masker", "metrics", "trainer",
    "Denoiser", "DenoiserConfig", "HybridModel", "build_htmd",
    "Masker", "MaskerConfig", "receptive_field",
    "LossSpec", "TrainConfig", "deep_loss", "loss_preset", "train",
    "__version__",
]

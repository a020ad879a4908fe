"""Denoising network: halved-width multi-resolution U with a bidirectional-recurrent bottleneck.

The same structure doubles as the skip-connection baseline when built at
full width with a convolutional bottleneck. Channel plan: encoder level i
outputs growth*i; the decoder conv at level i sees the upsampled path and
the level-i skip (equal widths) and maps to growth*(i-1), with the
shallowest level held at `growth` before the tanh output conv.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .masker import Masker, MaskerConfig, htmd_masker_config, tiny_masker_config


@dataclass
class DenoiserConfig:
    depth: int = 12             # resolution levels; input length must divide 2^depth
    growth: int = 12            # channels added per level (24 for the full-width baseline)
    kernel_down: int = 15
    kernel_up: int = 5
    bottleneck: str = "recurrent"   # "recurrent" | "convolutional"
    recurrent_layers: int = 2
    hidden: int = 168           # total bidirectional width (split across directions)
    leaky_slope: float = 0.3

    def __post_init__(self):
        if self.depth < 1 or self.growth < 1:
            raise ValueError("depth and growth must be positive")
        if self.bottleneck not in ("recurrent", "convolutional"):
            raise ValueError(f"unknown bottleneck {self.bottleneck!r}")
        if self.bottleneck == "recurrent":
            if self.hidden % 2:
                raise ValueError("hidden must be even (split across two directions)")
            if self.recurrent_layers < 1:
                raise ValueError("need at least one recurrent layer")


def htmd_denoiser_config(**overrides) -> DenoiserConfig:
    return replace(DenoiserConfig(), **overrides)


def waveunet_config(**overrides) -> DenoiserConfig:
    return replace(DenoiserConfig(growth=24, bottleneck="convolutional"), **overrides)


def tiny_denoiser_config() -> DenoiserConfig:
    return DenoiserConfig(depth=4, growth=6, hidden=8)


def skip_shapes(cfg: DenoiserConfig, t: int) -> list[tuple[int, int, int]]:
    """(level, time_len, channels) of each stored skip for input length t."""
    if t % (2 ** cfg.depth):
        raise ValueError(f"input length {t} not divisible by 2^{cfg.depth}")
    return [(i, t // 2 ** (i - 1), cfg.growth * i) for i in range(1, cfg.depth + 1)]


def _decoder_out_channels(cfg: DenoiserConfig, level: int) -> int:
    return cfg.growth * (level - 1) if level >= 2 else cfg.growth


class Denoiser(dc.Module):
    kind = "waveunet"  # checkpoint/model-family tag; any DenoiserConfig fits

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        down = []
        in_ch = 1
        for i in range(1, cfg.depth + 1):
            down.append(dc.Conv1d(in_ch, cfg.growth * i, cfg.kernel_down, rng,
                                  padding="same", dtype=dtype))
            in_ch = cfg.growth * i
        self.down = dc.ModuleList(down)

        deep = cfg.growth * cfg.depth
        if cfg.bottleneck == "recurrent":
            per_dir = cfg.hidden // 2
            layers = [dc.BiLSTM(deep, per_dir, rng, dtype=dtype)]
            for _ in range(cfg.recurrent_layers - 1):
                layers.append(dc.BiLSTM(cfg.hidden, per_dir, rng, dtype=dtype))
            self.recurrent = dc.ModuleList(layers)
            self.adapter = dc.Conv1d(cfg.hidden, deep, 1, rng, dtype=dtype)
        else:
            self.bottleneck_conv = dc.Conv1d(deep, deep, cfg.kernel_down, rng,
                                             padding="same", dtype=dtype)

        up = []
        for i in range(cfg.depth, 0, -1):
            up.append(dc.Conv1d(2 * cfg.growth * i, _decoder_out_channels(cfg, i),
                                cfg.kernel_up, rng, padding="same", dtype=dtype))
        self.up = dc.ModuleList(up)
        self.out_conv = dc.Conv1d(cfg.growth, 1, 1, rng, dtype=dtype)

    def _bottleneck(self, h: Tensor) -> Tensor:
        cfg = self.cfg
        if cfg.bottleneck == "convolutional":
            return dc.leaky_relu(self.bottleneck_conv.forward(h), cfg.leaky_slope)
        z = dc.swap_time_channels(h)
        for layer in self.recurrent:
            z = layer.forward(z)
        z = dc.leaky_relu(z, cfg.leaky_slope)
        return self.adapter.forward(dc.swap_time_channels(z))

    def denoise(self, est: Tensor) -> Tensor:
        """(batch, 1, T) -> (batch, 1, T), outputs inside (-1, 1)."""
        cfg = self.cfg
        if est.ndim != 3 or est.shape[1] != 1:
            raise ValueError(f"expected (batch, 1, T), got {est.shape}")
        if est.shape[2] % (2 ** cfg.depth):
            raise ValueError(f"input length {est.shape[2]} not divisible by 2^{cfg.depth}")
        h = est
        skips = []
        for conv in self.down:
            h = dc.leaky_relu(conv.forward(h), cfg.leaky_slope)
            skips.append(h)
            h = dc.downsample_decimate(h)
        h = self._bottleneck(h)
        for conv, skip in zip(self.up, reversed(skips)):
            h = dc.upsample_linear(h)
            if h.shape[2] != skip.shape[2]:
                raise ValueError(f"decoder time {h.shape[2]} != skip time {skip.shape[2]}")
            h = dc.leaky_relu(conv.forward(dc.concat([h, skip], axis=1)), cfg.leaky_slope)
        return dc.tanh(self.out_conv.forward(h))

    def forward(self, x: Tensor, training: bool = False):
        return self.denoise(x), None


class HybridModel(dc.Module):
    """Masking stage serially composed with the denoiser; both estimates exposed."""

    kind = "htmd"

    def __init__(self, masker: Masker, denoiser: Denoiser):
        super().__init__()
        self.masker = masker
        self.denoiser = denoiser

    def forward(self, x: Tensor, training: bool = False):
        mid, _ = self.masker.mask_and_decode(x, training)
        final = self.denoiser.denoise(mid)
        return final, mid


def build_htmd(masker_cfg: MaskerConfig | None = None,
               denoiser_cfg: DenoiserConfig | None = None,
               seed: int = 0, dtype=np.float32) -> HybridModel:
    rng = np.random.default_rng(seed)
    masker = Masker(masker_cfg or htmd_masker_config(), rng, dtype)
    denoiser = Denoiser(denoiser_cfg or htmd_denoiser_config(), rng, dtype)
    return HybridModel(masker, denoiser)


def build_tiny_htmd(seed: int = 0, dtype=np.float32) -> HybridModel:
    return build_htmd(tiny_masker_config(), tiny_denoiser_config(), seed, dtype)

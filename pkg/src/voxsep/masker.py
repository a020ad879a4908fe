"""Masking network: strided linear encoder, dilated-TCN mask estimator, transposed-conv decoder.

One configuration type covers both the hybrid model's masking stage
(one repeat, ten dilated blocks) and the purely mask-based baseline
(three repeats of nine blocks).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass
class MaskerConfig:
    n_filters: int = 512        # latent channels (N)
    kernel_len: int = 16        # encoder filter length (L)
    stride: int = 8             # encoder hop; must divide kernel_len
    bottleneck: int = 128       # TCN bottleneck width (B)
    conv_channels: int = 512    # block hidden width (H)
    skip_channels: int = 128    # skip contribution width (Sc)
    kernel: int = 3             # depthwise kernel width (P)
    blocks_per_repeat: int = 10 # X; dilations 2^0 .. 2^(X-1)
    repeats: int = 1            # R
    leaky_slope: float = 0.3

    def __post_init__(self):
        if self.kernel_len % self.stride:
            raise ValueError("stride must divide kernel_len")
        if self.blocks_per_repeat < 1 or self.repeats < 1:
            raise ValueError("need at least one block and one repeat")
        for f in ("n_filters", "bottleneck", "conv_channels", "skip_channels", "kernel"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")


def htmd_masker_config(**overrides) -> MaskerConfig:
    return replace(MaskerConfig(), **overrides)


def convtasnet_config(**overrides) -> MaskerConfig:
    return replace(MaskerConfig(blocks_per_repeat=9, repeats=3), **overrides)


def tiny_masker_config() -> MaskerConfig:
    return MaskerConfig(n_filters=16, bottleneck=8, conv_channels=16,
                        skip_channels=8, blocks_per_repeat=3, repeats=1)


def receptive_field(cfg: MaskerConfig) -> int:
    """Input samples influencing one output sample.

    The dilated stack spans 1 + R * sum((P-1)*2^i) latent frames; frames
    convert to samples through the encoder geometry.
    """
    frames = 1 + cfg.repeats * (cfg.kernel - 1) * (2 ** cfg.blocks_per_repeat - 1)
    return (frames - 1) * cfg.stride + cfg.kernel_len


@dataclass
class LatentFrames:
    tensor: Tensor              # (batch, n_filters, frames)
    frame_stride: int
    frame_len: int

    @property
    def frames(self) -> int:
        return self.tensor.shape[2]


class TcnBlock(dc.Module):
    # convs feeding batch-norm (and the residual stream, which only ever
    # re-enters through such convs) carry no bias: the normalization would
    # cancel any constant shift, leaving a permanently dead parameter
    def __init__(self, cfg: MaskerConfig, dilation: int, rng, dtype=np.float32):
        super().__init__()
        self.slope = cfg.leaky_slope
        self.conv_in = dc.Conv1d(cfg.bottleneck, cfg.conv_channels, 1, rng,
                                 bias=False, dtype=dtype)
        self.bn_in = dc.BatchNorm1d(cfg.conv_channels, dtype=dtype)
        self.dconv = dc.Conv1d(cfg.conv_channels, cfg.conv_channels, cfg.kernel, rng,
                               dilation=dilation, groups=cfg.conv_channels,
                               padding="same", bias=False, dtype=dtype)
        self.bn_d = dc.BatchNorm1d(cfg.conv_channels, dtype=dtype)
        self.conv_res = dc.Conv1d(cfg.conv_channels, cfg.bottleneck, 1, rng,
                                  bias=False, dtype=dtype)
        self.conv_skip = dc.Conv1d(cfg.conv_channels, cfg.skip_channels, 1, rng, dtype=dtype)

    def forward(self, x: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        h = dc.leaky_relu(self.bn_in.forward(self.conv_in.forward(x), training), self.slope)
        h = dc.leaky_relu(self.bn_d.forward(self.dconv.forward(h), training), self.slope)
        residual = dc.add(x, self.conv_res.forward(h))
        skip = self.conv_skip.forward(h)
        return residual, skip


class Masker(dc.Module):
    kind = "convtasnet"  # checkpoint/model-family tag; any MaskerConfig fits

    def __init__(self, cfg: MaskerConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.encoder = dc.Conv1d(1, cfg.n_filters, cfg.kernel_len, rng,
                                 stride=cfg.stride, bias=False, dtype=dtype)
        self.bottleneck_conv = dc.Conv1d(cfg.n_filters, cfg.bottleneck, 1, rng,
                                         bias=False, dtype=dtype)
        blocks = []
        for _ in range(cfg.repeats):
            for i in range(cfg.blocks_per_repeat):
                blocks.append(TcnBlock(cfg, 2 ** i, rng, dtype))
        self.blocks = dc.ModuleList(blocks)
        self.head = dc.Conv1d(cfg.skip_channels, cfg.n_filters, 1, rng, dtype=dtype)
        self.decoder = dc.ConvTranspose1d(cfg.n_filters, 1, cfg.kernel_len, rng,
                                          stride=cfg.stride, bias=False, dtype=dtype)

    # pipeline stages -------------------------------------------------------

    def encode(self, x: Tensor) -> LatentFrames:
        """Linear strided analysis of (batch, 1, T); requires T >= kernel_len."""
        if x.ndim != 3 or x.shape[1] != 1:
            raise ValueError(f"expected (batch, 1, T), got {x.shape}")
        if x.shape[2] < self.cfg.kernel_len:
            raise ValueError(f"input length {x.shape[2]} shorter than one frame "
                             f"({self.cfg.kernel_len})")
        latent = self.encoder.forward(x)
        return LatentFrames(latent, self.cfg.stride, self.cfg.kernel_len)

    def estimate_mask(self, latent: LatentFrames, training: bool = False) -> Tensor:
        """Sigmoid-bounded mask over the latent frames, summed from block skips."""
        if latent.tensor.shape[1] != self.cfg.n_filters:
            raise ValueError("latent channel count does not match config")
        h = self.bottleneck_conv.forward(latent.tensor)
        skip_sum = None
        for block in self.blocks:
            h, skip = block.forward(h, training)
            skip_sum = skip if skip_sum is None else dc.add(skip_sum, skip)
        s = dc.leaky_relu(skip_sum, self.cfg.leaky_slope)
        return dc.sigmoid(self.head.forward(s))

    @staticmethod
    def apply_mask(latent: LatentFrames, mask: Tensor) -> LatentFrames:
        if mask.shape != latent.tensor.shape:
            raise ValueError(f"mask shape {mask.shape} != latent {latent.tensor.shape}")
        return LatentFrames(dc.mul(latent.tensor, mask),
                            latent.frame_stride, latent.frame_len)

    def decode(self, latent: LatentFrames) -> Tensor:
        return self.decoder.forward(latent.tensor)

    def mask_and_decode(self, x: Tensor, training: bool = False,
                        mask_override: Tensor | None = None):
        """Full masking pass; returns (estimate, artifacts).

        `mask_override` substitutes the estimated mask (testing hook for
        probing the linear encode/decode path).
        """
        latent = self.encode(x)
        mask = mask_override if mask_override is not None \
            else self.estimate_mask(latent, training)
        masked = self.apply_mask(latent, mask)
        estimate = self.decode(masked)
        return estimate, {"latent": latent, "mask": mask}

    def forward(self, x: Tensor, training: bool = False):
        estimate, _ = self.mask_and_decode(x, training)
        return estimate, None

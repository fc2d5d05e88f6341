"""Convolutional fusion decoder from transformer skip features to depth.

Four skip levels are projected to per-level widths and resampled onto a
fixed pyramid at 1/4, 1/8, 1/16 and 1/32 of the input image resolution,
then fused coarse-to-fine with residual conv units and x2 upsampling. The
output head emits two channels: a sigmoid-squashed normalized depth and a
raw per-pixel log-uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .tokens import tokens_to_grid

DEPTH_MODE_LINEAR = "linear"
DEPTH_MODE_INVERSE = "inverse"

# pyramid levels sit at image / PYRAMID_STRIDES[l]
PYRAMID_STRIDES = (4, 8, 16, 32)


@dataclass
class DecoderConfig:
    d_model: int
    patch_size: int
    level_channels: Optional[tuple[int, int, int, int]] = None
    fusion_channels: Optional[int] = None
    head_channels: Optional[tuple[int, int]] = None

    def __post_init__(self):
        d = self.d_model
        if self.level_channels is None:
            self.level_channels = (
                max(8, d // 8), max(8, d // 4), max(8, d // 2), d,
            )
        if self.fusion_channels is None:
            self.fusion_channels = max(32, d // 3)
        if self.head_channels is None:
            f = self.fusion_channels
            self.head_channels = (max(16, f // 2), max(8, f // 8))
        for stride in PYRAMID_STRIDES:
            p = self.patch_size
            if p % stride != 0 and stride % p != 0:
                raise ValueError(
                    f"patch size {p} incompatible with pyramid stride {stride}"
                )


@dataclass
class DepthPrediction:
    """Dense metric depth plus per-pixel log-uncertainty, same shape."""

    depth: Tensor
    log_uncertainty: Tensor


def depth_from_sigmoid(
    sigma: Tensor, d_min: float, d_max: float, mode: str = DEPTH_MODE_LINEAR
) -> Tensor:
    """Map the head's (0,1) output onto metric depth in [d_min, d_max]."""
    if d_min >= d_max:
        raise ValueError(f"d_min {d_min} must be < d_max {d_max}")
    if mode == DEPTH_MODE_LINEAR:
        return d_min + (d_max - d_min) * sigma
    if mode == DEPTH_MODE_INVERSE:
        inv = 1.0 / d_max + (1.0 / d_min - 1.0 / d_max) * sigma
        return 1.0 / inv
    raise ValueError(f"unknown depth mode {mode!r}")


class ResidualConvUnit(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        out = self.conv2(F.relu(self.conv1(F.relu(x))))
        return out + x


class FusionStage(nn.Module):
    """Merge one skip level with the coarser path and upsample x2."""

    def __init__(self, channels: int, has_residual_input: bool):
        super().__init__()
        self.rcu_skip = ResidualConvUnit(channels) if has_residual_input else None
        self.rcu_out = ResidualConvUnit(channels)
        self.out_conv = nn.Conv2d(channels, channels, 1)

    def forward(self, level: Tensor, prev: Optional[Tensor] = None) -> Tensor:
        if prev is None:
            x = level
        else:
            x = prev + self.rcu_skip(level)
        x = self.rcu_out(x)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=True)
        return self.out_conv(x)


def _make_resample(channels: int, patch_size: int, stride: int) -> nn.Module:
    """Resample a token grid (image/patch_size) to image/stride resolution."""
    if patch_size == stride:
        return nn.Identity()
    if patch_size % stride == 0:
        f = patch_size // stride
        return nn.ConvTranspose2d(channels, channels, kernel_size=f, stride=f)
    s = stride // patch_size
    return nn.Conv2d(channels, channels, 3, stride=s, padding=1)


class FusionDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        fusion = cfg.fusion_channels
        self.projections = nn.ModuleList()
        self.resamples = nn.ModuleList()
        self.to_fusion = nn.ModuleList()
        for ch, stride in zip(cfg.level_channels, PYRAMID_STRIDES):
            self.projections.append(nn.Conv2d(cfg.d_model, ch, 1))
            self.resamples.append(_make_resample(ch, cfg.patch_size, stride))
            self.to_fusion.append(nn.Conv2d(ch, fusion, 3, padding=1))
        self.stages = nn.ModuleList(
            FusionStage(fusion, has_residual_input=(lvl < 3)) for lvl in range(4)
        )
        h1, h2 = cfg.head_channels
        self.head_conv1 = nn.Conv2d(fusion, h1, 3, padding=1)
        self.head_conv2 = nn.Conv2d(h1, h2, 3, padding=1)
        self.head_conv3 = nn.Conv2d(h2, 2, 1)

    def forward(self, skips: Sequence[Tensor], rows: int, cols: int) -> tuple[Tensor, Tensor]:
        """Decode skip token features [..., N, d] into (sigma, log_uncertainty).

        Returns two maps of shape [..., h, w] with h = rows * patch_size.
        """
        if len(skips) != 4:
            raise ValueError(f"expected 4 skip levels, got {len(skips)}")
        h, w = rows * self.cfg.patch_size, cols * self.cfg.patch_size
        if h % PYRAMID_STRIDES[-1] or w % PYRAMID_STRIDES[-1]:
            raise ValueError(
                f"image size {h}x{w} must be divisible by {PYRAMID_STRIDES[-1]} "
                "for the fusion pyramid"
            )
        squeeze = skips[0].dim() == 2
        feats = []
        for lvl, tok in enumerate(skips):
            grid = tokens_to_grid(tok, rows, cols)
            if grid.dim() == 3:
                grid = grid.unsqueeze(0)
            x = self.projections[lvl](grid)
            x = self.resamples[lvl](x)
            feats.append(self.to_fusion[lvl](x))
        path = self.stages[3](feats[3])
        for lvl in (2, 1, 0):
            path = self.stages[lvl](feats[lvl], path)
        x = self.head_conv1(path)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=True)
        x = F.relu(self.head_conv2(x))
        x = self.head_conv3(x)
        if x.shape[-2:] != (h, w):
            raise ValueError(
                f"decoded resolution {tuple(x.shape[-2:])} does not match "
                f"image size {(h, w)}"
            )
        sigma = torch.sigmoid(x[:, 0])
        log_u = x[:, 1]
        if squeeze:
            sigma, log_u = sigma.squeeze(0), log_u.squeeze(0)
        return sigma, log_u


def decode(
    decoder: FusionDecoder,
    skips: Sequence[Tensor],
    rows: int,
    cols: int,
    d_min: float,
    d_max: float,
    depth_mode: str = DEPTH_MODE_LINEAR,
) -> DepthPrediction:
    """Run the decoder and map the sigmoid channel onto metric depth."""
    sigma, log_u = decoder(skips, rows, cols)
    return DepthPrediction(
        depth=depth_from_sigmoid(sigma, d_min, d_max, depth_mode),
        log_uncertainty=log_u,
    )

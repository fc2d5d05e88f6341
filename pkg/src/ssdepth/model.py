"""Full depth network: patch embedding, masked transformer encoder, fusion decoder.

The weak and strong branches are two forward passes of this single module;
the strong pass confines attention to the subsets of a per-sample partition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .decoder import (
    DEPTH_MODE_LINEAR,
    DecoderConfig,
    DepthPrediction,
    FusionDecoder,
    depth_from_sigmoid,
)
from .encoder import (
    ATTN_SCALE_STANDARD,
    MASK_FILL_EXACT,
    EncoderConfig,
    TransformerEncoder,
    attention_bias_from_partition,
)
from .losses import PredictorHead
from .masking import Partition, reassemble, shuffle_tokens
from .tokens import PatchEmbedding

PREDICTOR_MLP = "mlp"
PREDICTOR_NONE = "none"
PREDICTOR_TRANSFORMER = "transformer"


def default_skip_blocks(depth: int) -> tuple[int, ...]:
    """Four evenly spaced block indices; (2, 5, 8, 11) for a 12-block encoder."""
    if depth < 4:
        raise ValueError("encoder needs at least 4 blocks for the skip pyramid")
    return tuple((i + 1) * depth // 4 - 1 for i in range(4))


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (32, 64)
    patch_size: int = 4
    d_model: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    skip_blocks: Optional[tuple[int, ...]] = None
    d_min: float = 1.0
    d_max: float = 20.0
    depth_mode: str = DEPTH_MODE_LINEAR
    mask_fill: str = MASK_FILL_EXACT
    attn_scale: str = ATTN_SCALE_STANDARD
    predictor: str = PREDICTOR_MLP
    predictor_blocks: int = 2
    level_channels: Optional[tuple[int, int, int, int]] = None
    fusion_channels: Optional[int] = None
    head_channels: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.skip_blocks is None:
            self.skip_blocks = default_skip_blocks(self.depth)
        else:
            self.skip_blocks = tuple(self.skip_blocks)
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError("image size must be divisible by patch size")

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.image_size
        return h // self.patch_size, w // self.patch_size

    @property
    def num_tokens(self) -> int:
        r, c = self.grid
        return r * c

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            depth=self.depth,
            d_model=self.d_model,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            skip_blocks=self.skip_blocks,
            mask_fill=self.mask_fill,
            attn_scale=self.attn_scale,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            d_model=self.d_model,
            patch_size=self.patch_size,
            level_channels=self.level_channels,
            fusion_channels=self.fusion_channels,
            head_channels=self.head_channels,
        )


@dataclass
class ModelOutput:
    depth: Tensor  # [B, h, w]
    log_uncertainty: Tensor  # [B, h, w]
    sigma: Tensor  # [B, h, w]
    tokens: Tensor  # [B, N, d_model], final encoder output, spatial order


class _TransformerPredictor(nn.Module):
    """Predictor head variant made of plain transformer blocks (ablation)."""

    def __init__(self, cfg: EncoderConfig, blocks: int):
        super().__init__()
        from .encoder import TransformerBlock

        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(blocks))

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def build_predictor(cfg: ModelConfig) -> Optional[nn.Module]:
    if cfg.predictor == PREDICTOR_NONE:
        return None
    if cfg.predictor == PREDICTOR_MLP:
        return PredictorHead(cfg.d_model)
    if cfg.predictor == PREDICTOR_TRANSFORMER:
        enc_cfg = cfg.encoder_config()
        enc_cfg.skip_blocks = ()
        return _TransformerPredictor(enc_cfg, cfg.predictor_blocks)
    raise ValueError(f"unknown predictor kind {cfg.predictor!r}")


class DepthModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rows, cols = cfg.grid
        self.patch_embed = PatchEmbedding(rows, cols, cfg.patch_size, cfg.d_model)
        self.encoder = TransformerEncoder(cfg.encoder_config())
        self.decoder = FusionDecoder(cfg.decoder_config())
        self.predictor = build_predictor(cfg)

    def encoder_parameters(self):
        yield from self.patch_embed.parameters()
        yield from self.encoder.parameters()

    def decoder_parameters(self):
        yield from self.decoder.parameters()
        if self.predictor is not None:
            yield from self.predictor.parameters()

    def forward(
        self, images: Tensor, partitions: Optional[Sequence[Partition]] = None
    ) -> ModelOutput:
        """Forward a batch [B, 3, h, w], optionally under per-sample partitions.

        A ``None`` partition list, or one where every partition has K = 1,
        is the plain unmasked forward.
        """
        if images.dim() == 3:
            images = images.unsqueeze(0)
        tokens = self.patch_embed(images)
        if partitions is not None and len(partitions) != images.shape[0]:
            raise ValueError("one partition per batch sample required")
        if partitions is not None and any(p.k > 1 for p in partitions):
            enc_final, skips = self._masked_encode(tokens, partitions)
        else:
            enc = self.encoder(tokens, None)
            enc_final, skips = enc.final, enc.skips
        rows, cols = self.cfg.grid
        sigma, log_u = self.decoder(skips, rows, cols)
        depth = depth_from_sigmoid(
            sigma, self.cfg.d_min, self.cfg.d_max, self.cfg.depth_mode
        )
        return ModelOutput(
            depth=depth, log_uncertainty=log_u, sigma=sigma, tokens=enc_final
        )

    def _masked_encode(self, tokens: Tensor, partitions: Sequence[Partition]):
        device = tokens.device
        perm = torch.from_numpy(np.stack([p.perm for p in partitions])).to(device)
        inv = torch.from_numpy(np.stack([p.inv_perm for p in partitions])).to(device)
        allow = torch.stack(
            [attention_bias_from_partition(p, device) for p in partitions]
        ).unsqueeze(1)  # [B, 1, N, N]

        def gather(x, idx):
            return torch.take_along_dim(x, idx.unsqueeze(-1), dim=1)

        shuffled = gather(tokens, perm)
        enc = self.encoder(shuffled, allow)
        final = gather(enc.final, inv)
        skips = tuple(gather(s, inv) for s in enc.skips)
        return final, skips

    @torch.no_grad()
    def predict(self, images: Tensor) -> DepthPrediction:
        """Unmasked inference pass returning metric depth and log-uncertainty."""
        out = self.forward(images)
        return DepthPrediction(depth=out.depth, log_uncertainty=out.log_uncertainty)

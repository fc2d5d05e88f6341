"""Pre-norm transformer encoder with optional block-sparse attention masking.

The mask confines attention to tokens of the same subset. In ``exact`` fill
mode, disallowed logits are set to -inf, so cross-subset attention weights
are exactly zero after softmax and joint masked encoding is equivalent to
encoding each subset independently. The ``legacy`` mode reproduces the
original -10.0 fill, which leaks a small amount of attention across subsets
and therefore breaks that equivalence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .masking import Partition, build_attention_mask, reassemble, shuffle_tokens

MASK_FILL_EXACT = "exact"
MASK_FILL_LEGACY = "legacy"
ATTN_SCALE_STANDARD = "standard"
ATTN_SCALE_LEGACY = "legacy"


@dataclass
class EncoderConfig:
    depth: int
    d_model: int
    heads: int
    mlp_ratio: float = 4.0
    skip_blocks: tuple[int, ...] = ()
    mask_fill: str = MASK_FILL_EXACT
    attn_scale: str = ATTN_SCALE_STANDARD
    debug: bool = False

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by heads {self.heads}"
            )
        if any(b < 0 or b >= self.depth for b in self.skip_blocks):
            raise ValueError(f"skip_blocks {self.skip_blocks} out of range")
        if self.mask_fill not in (MASK_FILL_EXACT, MASK_FILL_LEGACY):
            raise ValueError(f"unknown mask_fill {self.mask_fill!r}")
        if self.attn_scale not in (ATTN_SCALE_STANDARD, ATTN_SCALE_LEGACY):
            raise ValueError(f"unknown attn_scale {self.attn_scale!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass
class EncodedTokens:
    """Final block output plus the per-skip-block features, same token order."""

    final: Tensor  # [..., N, d_model]
    skips: tuple[Tensor, ...]


def masked_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    allow: Optional[Tensor] = None,
    *,
    scale: Optional[float] = None,
    mask_fill: str = MASK_FILL_EXACT,
    debug: bool = False,
) -> Tensor:
    """Scaled dot-product attention restricted to ``allow``-ed key positions.

    q, k, v: [..., N, d_head]; allow: boolean [N, N] or broadcastable to the
    logit shape. Rows with no allowed key come back as zeros.
    """
    if debug and (
        torch.isnan(q).any() or torch.isnan(k).any() or torch.isnan(v).any()
    ):
        raise FloatingPointError("NaN in attention inputs")
    d_head = q.shape[-1]
    if scale is None:
        scale = d_head ** -0.5
    logits = (q @ k.transpose(-2, -1)) * scale
    if allow is not None:
        fill = float("-inf") if mask_fill == MASK_FILL_EXACT else -10.0
        logits = logits.masked_fill(~allow, fill)
    attn = torch.softmax(logits, dim=-1)
    if allow is not None:
        dead = ~allow.any(dim=-1)
        if dead.any():
            attn = attn.masked_fill(dead.unsqueeze(-1), 0.0)
    return attn @ v


class TransformerBlock(nn.Module):
    """Pre-norm block: LN -> QKV -> masked attention -> proj, LN -> MLP."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        hidden = int(d * cfg.mlp_ratio)
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def _attention(self, x: Tensor, allow: Optional[Tensor]) -> Tensor:
        cfg = self.cfg
        *lead, n, d = x.shape
        qkv = self.qkv(x).reshape(*lead, n, 3, cfg.heads, cfg.d_head)
        qkv = qkv.movedim(-3, 0).movedim(-2, -3)  # [3, ..., heads, N, d_head]
        q, k, v = qkv[0], qkv[1], qkv[2]
        if cfg.attn_scale == ATTN_SCALE_LEGACY:
            scale = cfg.d_head ** 0.5
        else:
            scale = cfg.d_head ** -0.5
        out = masked_attention(
            q, k, v, allow, scale=scale, mask_fill=cfg.mask_fill, debug=cfg.debug
        )
        out = out.movedim(-3, -2).reshape(*lead, n, d)
        return self.proj(out)

    def forward(self, x: Tensor, allow: Optional[Tensor] = None) -> Tensor:
        x = x + self._attention(self.norm1(x), allow)
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


class TransformerEncoder(nn.Module):
    """Stack of pre-norm blocks; captures features after the skip blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.depth))

    def forward(self, tokens: Tensor, allow: Optional[Tensor] = None) -> EncodedTokens:
        x = tokens
        skips = {}
        for i, block in enumerate(self.blocks):
            x = block(x, allow)
            if i in self.cfg.skip_blocks:
                skips[i] = x
        return EncodedTokens(
            final=x, skips=tuple(skips[i] for i in sorted(skips))
        )


def attention_bias_from_partition(part: Partition, device=None) -> Tensor:
    """Boolean allow mask over shuffled slots as a torch tensor."""
    return torch.from_numpy(build_attention_mask(part)).to(device=device)


def encode_with_partition(
    encoder: TransformerEncoder, tokens: Tensor, part: Partition
) -> EncodedTokens:
    """Joint masked encoding: shuffle, encode under the block mask, restore order.

    ``tokens`` are spatial order [N, d] (or [B, N, d] sharing one partition);
    the result is back in spatial order.
    """
    shuffled = shuffle_tokens(tokens, part)
    allow = attention_bias_from_partition(part, device=tokens.device)
    enc = encoder(shuffled, allow)
    return EncodedTokens(
        final=reassemble(enc.final, part),
        skips=tuple(reassemble(s, part) for s in enc.skips),
    )


def encode_subsets_oracle(
    encoder: TransformerEncoder, tokens: Tensor, part: Partition
) -> EncodedTokens:
    """Reference path: encode each non-empty subset as its own sequence.

    Results are concatenated in subset order (i.e. shuffled-slot order) and
    then restored to spatial order. Empty subsets are no-ops. Only valid in
    exact fill mode, where this is equivalent to the joint masked encoding.
    """
    if encoder.cfg.mask_fill != MASK_FILL_EXACT:
        raise ValueError("subset-wise encoding requires exact mask fill mode")
    if tokens.dim() != 2:
        raise ValueError("oracle path expects a single sequence [N, d]")
    finals, skip_parts = [], None
    for idx in part.subsets:
        if len(idx) == 0:
            continue
        sub = tokens[torch.from_numpy(idx).to(tokens.device)]
        enc = encoder(sub, None)
        finals.append(enc.final)
        if skip_parts is None:
            skip_parts = [[] for _ in enc.skips]
        for acc, s in zip(skip_parts, enc.skips):
            acc.append(s)
    final = torch.cat(finals, dim=0)
    skips = tuple(torch.cat(acc, dim=0) for acc in (skip_parts or []))
    return EncodedTokens(
        final=reassemble(final, part),
        skips=tuple(reassemble(s, part) for s in skips),
    )

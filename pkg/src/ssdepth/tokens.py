"""Image <-> patch token conversions and the learned patch embedding.

Token order is row-major over the patch grid. Each patch is flattened
pixel-major with the channel index fastest, which matches a stride-p
convolution over an HWC view of the image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor, nn


@dataclass
class TokenSequence:
    """Embedded patch tokens plus the grid geometry they came from.

    ``perm`` is set while the tokens are in shuffled order; ``None`` means
    spatial (row-major) order.
    """

    tokens: Tensor  # [N, d_model] or [B, N, d_model]
    rows: int
    cols: int
    patch_size: int
    perm: Optional[Tensor] = None

    @property
    def num_tokens(self) -> int:
        return self.rows * self.cols

    @property
    def d_model(self) -> int:
        return self.tokens.shape[-1]


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """Split ``image`` [..., 3, h, w] into flattened patches [..., N, p*p*3]."""
    if image.shape[-3] != 3:
        raise ValueError(f"expected 3 channels, got {image.shape[-3]}")
    h, w = image.shape[-2], image.shape[-1]
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    lead = image.shape[:-3]
    x = image.reshape(*lead, 3, rows, p, cols, p)
    # (..., rows, cols, p, p, 3): channel varies fastest inside a patch
    x = x.permute(*range(len(lead)), -4, -2, -3, -1, -5)
    return x.reshape(*lead, rows * cols, p * p * 3)


def unpatchify(patches: Tensor, rows: int, cols: int, patch_size: int) -> Tensor:
    """Inverse of :func:`patchify`; returns [..., 3, rows*p, cols*p]."""
    p = patch_size
    if patches.shape[-2] != rows * cols or patches.shape[-1] != p * p * 3:
        raise ValueError(
            f"patch matrix {tuple(patches.shape[-2:])} does not match "
            f"grid {rows}x{cols} with patch size {p}"
        )
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, rows, cols, p, p, 3)
    x = x.permute(*range(len(lead)), -1, -5, -3, -4, -2)
    return x.reshape(*lead, 3, rows * p, cols * p)


def embed(patches: Tensor, weight: Tensor, bias: Tensor, pos: Tensor) -> Tensor:
    """Affine patch embedding: ``patches @ weight + bias + pos``.

    weight: [p*p*3, d_model], bias: [d_model], pos: [N, d_model].
    """
    if patches.shape[-1] != weight.shape[0]:
        raise ValueError(
            f"patch width {patches.shape[-1]} does not match projection "
            f"input {weight.shape[0]}"
        )
    if patches.shape[-2] != pos.shape[0]:
        raise ValueError(
            f"token count {patches.shape[-2]} does not match positional "
            f"table {pos.shape[0]}"
        )
    return patches @ weight + bias + pos


class PatchEmbedding(nn.Module):
    """Linear projection of flattened patches plus a learned per-position vector.

    No class token; the table has one embedding per grid position and the
    module is fixed to a single resolution.
    """

    def __init__(self, rows: int, cols: int, patch_size: int, d_model: int):
        super().__init__()
        self.rows = rows
        self.cols = cols
        self.patch_size = patch_size
        self.d_model = d_model
        patch_dim = patch_size * patch_size * 3
        self.weight = nn.Parameter(torch.empty(patch_dim, d_model))
        self.bias = nn.Parameter(torch.zeros(d_model))
        self.pos = nn.Parameter(torch.zeros(rows * cols, d_model))
        nn.init.xavier_uniform_(self.weight)
        nn.init.normal_(self.pos, std=0.02)

    def forward(self, images: Tensor) -> Tensor:
        """Embed images [..., 3, h, w] into tokens [..., N, d_model]."""
        patches = patchify(images, self.patch_size)
        return embed(patches, self.weight, self.bias, self.pos)

    def as_sequence(self, images: Tensor) -> TokenSequence:
        return TokenSequence(
            tokens=self.forward(images),
            rows=self.rows,
            cols=self.cols,
            patch_size=self.patch_size,
        )


def to_grid(seq: TokenSequence) -> Tensor:
    """Reshape a spatial-order token sequence to [..., d_model, rows, cols]."""
    if seq.perm is not None:
        raise ValueError("token sequence carries an unapplied permutation")
    return tokens_to_grid(seq.tokens, seq.rows, seq.cols)


def tokens_to_grid(tokens: Tensor, rows: int, cols: int) -> Tensor:
    if tokens.shape[-2] != rows * cols:
        raise ValueError(
            f"token count {tokens.shape[-2]} does not match grid {rows}x{cols}"
        )
    return tokens.transpose(-1, -2).reshape(*tokens.shape[:-2], tokens.shape[-1], rows, cols)


def grid_to_tokens(grid: Tensor) -> Tensor:
    """Inverse of :func:`tokens_to_grid`."""
    d, rows, cols = grid.shape[-3], grid.shape[-2], grid.shape[-1]
    return grid.reshape(*grid.shape[:-3], d, rows * cols).transpose(-1, -2)

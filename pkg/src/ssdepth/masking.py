"""K-way disjoint token partitions and the block attention mask.

A partition is sampled by shuffling token indices with a uniform random
permutation and cutting the shuffled sequence at K-1 split points drawn
uniformly (with replacement) from {1..N-1}. Duplicate split points produce
empty subsets, which downstream code must tolerate. Every token is kept:
the union of the subsets is always the full index set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor


@dataclass
class Partition:
    """K disjoint subsets of {0..N-1} expressed as cut points of a shuffled order.

    ``perm[i]`` is the spatial token index sitting at shuffled slot ``i``;
    subset k occupies shuffled slots ``[splits[k], splits[k+1])``.
    """

    perm: np.ndarray
    splits: np.ndarray  # sorted, length K+1, splits[0] = 0, splits[-1] = N
    inv_perm: np.ndarray = field(init=False)

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=np.int64)
        n = self.perm.shape[0]
        if self.splits[0] != 0 or self.splits[-1] != n:
            raise ValueError("splits must start at 0 and end at N")
        if np.any(np.diff(self.splits) < 0):
            raise ValueError("splits must be sorted")
        self.inv_perm = np.argsort(self.perm)

    @property
    def n(self) -> int:
        return int(self.perm.shape[0])

    @property
    def k(self) -> int:
        return int(self.splits.shape[0] - 1)

    @property
    def subsets(self) -> list[np.ndarray]:
        """Spatial token indices per subset, in shuffled-slot order."""
        return [
            self.perm[self.splits[i] : self.splits[i + 1]]
            for i in range(self.k)
        ]

    def subset_sizes(self) -> np.ndarray:
        return np.diff(self.splits)


def sample_partition(n: int, k: int, rng: np.random.Generator) -> Partition:
    """Sample a K-way disjoint partition of n tokens.

    k may exceed n (the surplus subsets come out empty); k < 1 is an error.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if n < 1:
        raise ValueError(f"N must be >= 1, got {n}")
    perm = rng.permutation(n)
    if k == 1:
        inner = np.empty(0, dtype=np.int64)
    elif n == 1:
        # no interior cut points exist; everything lands in the first subset
        inner = np.ones(k - 1, dtype=np.int64)
    else:
        inner = rng.integers(1, n, size=k - 1)
    splits = np.concatenate(([0], np.sort(inner), [n]))
    return Partition(perm=perm, splits=splits)


def build_attention_mask(part: Partition) -> np.ndarray:
    """Boolean [N, N] mask over shuffled slots: True iff same subset.

    Built as the outer product of the per-subset indicator rows, so the
    result is block diagonal under the subset ordering.
    """
    n, k = part.n, part.k
    mask_v = np.zeros((k, n), dtype=np.float32)
    for i in range(k):
        mask_v[i, part.splits[i] : part.splits[i + 1]] = 1.0
    return (mask_v.T @ mask_v) > 0


def shuffle_tokens(tokens: Tensor, part: Partition) -> Tensor:
    """Reorder spatial-order tokens [..., N, d] into shuffled-slot order."""
    if tokens.shape[-2] != part.n:
        raise ValueError(f"expected {part.n} tokens, got {tokens.shape[-2]}")
    idx = torch.from_numpy(part.perm).to(tokens.device)
    return tokens.index_select(-2, idx)


def reassemble(tokens: Tensor, part: Partition) -> Tensor:
    """Restore shuffled-slot tokens [..., N, d] to spatial order."""
    if tokens.shape[-2] != part.n:
        raise ValueError(f"expected {part.n} tokens, got {tokens.shape[-2]}")
    idx = torch.from_numpy(part.inv_perm).to(tokens.device)
    return tokens.index_select(-2, idx)

import numpy as np
import pytest
import torch

from ssdepth.tokens import (
    PatchEmbedding,
    TokenSequence,
    embed,
    grid_to_tokens,
    patchify,
    to_grid,
    tokens_to_grid,
    unpatchify,
)


def test_patchify_single_patch():
    img = torch.arange(12, dtype=torch.float32).reshape(3, 2, 2)
    p = patchify(img, 2)
    assert p.shape == (1, 12)
    # one patch: pixel-major, channel fastest
    expected = [img[c, r, q].item() for r in range(2) for q in range(2) for c in range(3)]
    assert p[0].tolist() == expected


def test_patchify_ramp_top_right_patch():
    # 4x4 ramp image: value = c*16 + r*4 + q
    img = torch.arange(48, dtype=torch.float32).reshape(3, 4, 4)
    p = patchify(img, 2)
    assert p.shape == (4, 12)
    # hand-indexed: row 1 is the top-right patch, grid position (0, 1)
    expected = []
    for r in (0, 1):
        for q in (2, 3):
            for c in range(3):
                expected.append(float(c * 16 + r * 4 + q))
    assert p[1].tolist() == expected
    assert p[1].tolist() == [2, 18, 34, 3, 19, 35, 6, 22, 38, 7, 23, 39]


def test_patchify_full_size_shape():
    img = torch.zeros(3, 192, 640)
    p = patchify(img, 16)
    assert p.shape == (480, 768)


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError):
        patchify(torch.zeros(3, 30, 64), 4)
    with pytest.raises(ValueError):
        patchify(torch.zeros(3, 32, 63), 4)


@pytest.mark.parametrize("h,w,p", [(4, 4, 2), (8, 12, 4), (6, 10, 2), (16, 16, 16)])
def test_patchify_roundtrip(h, w, p):
    rng = torch.Generator().manual_seed(h * 100 + w)
    img = torch.rand(3, h, w, generator=rng)
    patches = patchify(img, p)
    assert torch.equal(unpatchify(patches, h // p, w // p, p), img)


def test_patchify_batched_matches_single():
    rng = torch.Generator().manual_seed(0)
    imgs = torch.rand(3, 3, 8, 8, generator=rng)
    batched = patchify(imgs, 4)
    for i in range(3):
        assert torch.equal(batched[i], patchify(imgs[i], 4))


def test_embed_zero_inputs():
    patches = torch.zeros(4, 12)
    w = torch.zeros(12, 8)
    out = embed(patches, w, torch.zeros(8), torch.zeros(4, 8))
    assert torch.equal(out, torch.zeros(4, 8))


def test_embed_identity_projection():
    patches = torch.randn(4, 12)
    out = embed(patches, torch.eye(12), torch.zeros(12), torch.zeros(4, 12))
    assert torch.equal(out, patches)


def test_embed_full_size_shape():
    rng = torch.Generator().manual_seed(1)
    patches = torch.rand(480, 768, generator=rng)
    out = embed(patches, torch.rand(768, 768, generator=rng),
                torch.rand(768, generator=rng), torch.rand(480, 768, generator=rng))
    assert out.shape == (480, 768)


def test_embed_is_affine_in_patches():
    rng = torch.Generator().manual_seed(2)
    patches = torch.randn(5, 12, generator=rng)
    w = torch.randn(12, 6, generator=rng)
    b = torch.randn(6, generator=rng)
    pos = torch.randn(5, 6, generator=rng)
    zero = embed(torch.zeros(5, 12), w, b, pos)
    lhs = embed(3.0 * patches, w, b, pos) - zero
    rhs = 3.0 * (embed(patches, w, b, pos) - zero)
    assert torch.allclose(lhs, rhs, atol=1e-5)


def test_embed_shape_mismatch():
    with pytest.raises(ValueError):
        embed(torch.zeros(4, 12), torch.zeros(10, 8), torch.zeros(8), torch.zeros(4, 8))
    with pytest.raises(ValueError):
        embed(torch.zeros(4, 12), torch.zeros(12, 8), torch.zeros(8), torch.zeros(5, 8))


def test_patch_embedding_module_matches_functional():
    torch.manual_seed(0)
    mod = PatchEmbedding(rows=2, cols=3, patch_size=2, d_model=8)
    img = torch.rand(3, 4, 6)
    out = mod(img)
    ref = embed(patchify(img, 2), mod.weight, mod.bias, mod.pos)
    assert torch.equal(out, ref)
    assert out.shape == (6, 8)


def test_to_grid_single_token():
    seq = TokenSequence(tokens=torch.tensor([[1.0, 2.0]]), rows=1, cols=1, patch_size=4)
    grid = to_grid(seq)
    assert grid.shape == (2, 1, 1)
    assert grid[0, 0, 0] == 1.0 and grid[1, 0, 0] == 2.0


def test_to_grid_roundtrip():
    tokens = torch.randn(12, 5)
    grid = tokens_to_grid(tokens, 3, 4)
    assert grid.shape == (5, 3, 4)
    assert torch.equal(grid_to_tokens(grid), tokens)
    # indexing contract: grid[c, r, q] == tokens[r*cols + q, c]
    assert grid[2, 1, 3] == tokens[1 * 4 + 3, 2]


def test_to_grid_full_size_shape():
    tokens = torch.zeros(480, 768)
    assert tokens_to_grid(tokens, 12, 40).shape == (768, 12, 40)


def test_to_grid_refuses_pending_permutation():
    seq = TokenSequence(
        tokens=torch.randn(4, 2), rows=2, cols=2, patch_size=2,
        perm=torch.tensor([1, 0, 3, 2]),
    )
    with pytest.raises(ValueError):
        to_grid(seq)

"""Static visualizations: depth colorization, partition coloring, demo panels."""

from __future__ import annotations

import colorsys
from typing import Optional

import numpy as np
import torch

from .masking import Partition, sample_partition
from .model import DepthModel


def colorize_depth(depth: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    """Map depth to an RGB heatmap (near = warm, far = cool), uint8 HWC."""
    t = np.clip((depth - d_min) / max(d_max - d_min, 1e-9), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(2.0 * t - 0.0) * 1.5, 0, 1)
    g = np.clip(1.5 - np.abs(2.0 * t - 1.0) * 1.5, 0, 1)
    b = np.clip(1.5 - np.abs(2.0 * t - 2.0) * 1.5, 0, 1)
    rgb = np.stack([r, g, b], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def colorize_signed(diff: np.ndarray, scale: Optional[float] = None) -> np.ndarray:
    """Symmetric red/blue map for difference images; exact zeros stay white."""
    if scale is None:
        scale = max(float(np.abs(diff).max()), 1e-9)
    t = np.clip(diff / scale, -1.0, 1.0)
    r = np.where(t > 0, 1.0, 1.0 + t)
    g = 1.0 - np.abs(t)
    b = np.where(t < 0, 1.0, 1.0 - t)
    return np.round(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def subset_palette(n: int) -> np.ndarray:
    """n visually distinct colors, deterministic, unique as uint8 triples."""
    colors = []
    seen = set()
    i = 0
    while len(colors) < n:
        hue = (i * 0.61803398875) % 1.0
        sat = 0.55 + 0.35 * ((i // 3) % 2)
        val = 0.65 + 0.3 * ((i // 2) % 2)
        rgb = tuple(
            int(round(c * 255)) for c in colorsys.hsv_to_rgb(hue, sat, val)
        )
        if rgb not in seen:
            seen.add(rgb)
            colors.append(rgb)
        i += 1
    return np.array(colors, dtype=np.uint8)


def partition_image(part: Partition, rows: int, cols: int, patch_size: int) -> np.ndarray:
    """Color each patch by its subset id, upsampled to pixel resolution."""
    palette = subset_palette(part.k)
    owner = np.empty(part.n, dtype=np.int64)
    for k in range(part.k):
        owner[part.perm[part.splits[k] : part.splits[k + 1]]] = k
    grid = palette[owner.reshape(rows, cols)]
    return np.repeat(np.repeat(grid, patch_size, axis=0), patch_size, axis=1)


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """[3, h, w] float in [0,1] -> HWC uint8."""
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def naive_mask_image(
    image: np.ndarray, patch_size: int, ratio: float, rng: np.random.Generator
) -> np.ndarray:
    """Gray out a random fraction of patches (token-dropping baseline)."""
    c, h, w = image.shape
    rows, cols = h // patch_size, w // patch_size
    drop = rng.random((rows, cols)) < ratio
    drop_px = np.repeat(np.repeat(drop, patch_size, axis=0), patch_size, axis=1)
    out = image.copy()
    out[:, drop_px] = 0.5
    return out


def build_mask_demo(
    model: DepthModel,
    image: np.ndarray,
    k: int,
    seed: int,
    include_uncertainty: bool = False,
    naive: bool = False,
    naive_ratio: float = 0.5,
) -> dict[str, np.ndarray]:
    """Compute the raw arrays behind the mask-demo panel.

    Returns float arrays keyed by panel name; the difference entries are
    signed (strong minus weak).
    """
    cfg = model.cfg
    rows, cols = cfg.grid
    rng = np.random.default_rng(seed)
    part = sample_partition(cfg.num_tokens, k, rng)
    x = torch.from_numpy(image).unsqueeze(0)
    with torch.no_grad():
        weak = model(x)
        strong = model(x, [part])
    out = {
        "input": image,
        "partition": part,
        "weak_depth": weak.depth.squeeze(0).numpy(),
        "strong_depth": strong.depth.squeeze(0).numpy(),
    }
    out["difference"] = out["strong_depth"] - out["weak_depth"]
    if include_uncertainty:
        out["uncertainty"] = weak.log_uncertainty.squeeze(0).numpy()
    if naive:
        masked = naive_mask_image(image, cfg.patch_size, naive_ratio, rng)
        with torch.no_grad():
            naive_out = model(torch.from_numpy(masked).unsqueeze(0))
        out["naive_input"] = masked
        out["naive_depth"] = naive_out.depth.squeeze(0).numpy()
        out["naive_difference"] = out["naive_depth"] - out["weak_depth"]
    return out


def compose_panel(demo: dict[str, np.ndarray], cfg) -> np.ndarray:
    """Assemble the demo arrays into one HWC uint8 strip with separators."""
    rows, cols = cfg.grid
    d_min, d_max = cfg.d_min, cfg.d_max
    diff_scale = max(
        float(np.abs(demo["difference"]).max()),
        float(np.abs(demo.get("naive_difference", np.zeros(1))).max()),
        1e-9,
    )
    tiles = [
        image_to_uint8(demo["input"]),
        partition_image(demo["partition"], rows, cols, cfg.patch_size),
        colorize_depth(demo["weak_depth"], d_min, d_max),
        colorize_depth(demo["strong_depth"], d_min, d_max),
        colorize_signed(demo["difference"], diff_scale),
    ]
    if "uncertainty" in demo:
        u = demo["uncertainty"]
        tiles.append(colorize_depth(u, float(u.min()), float(u.max()) + 1e-9))
    if "naive_depth" in demo:
        tiles.append(image_to_uint8(demo["naive_input"]))
        tiles.append(colorize_depth(demo["naive_depth"], d_min, d_max))
        tiles.append(colorize_signed(demo["naive_difference"], diff_scale))
    sep = np.full((tiles[0].shape[0], 2, 3), 255, dtype=np.uint8)
    strips = []
    for i, tile in enumerate(tiles):
        if i:
            strips.append(sep)
        strips.append(tile)
    return np.concatenate(strips, axis=1)

"""Synthetic scenes with exact dense depth, plus the on-disk dataset format.

Scenes are layered rectangles/ellipses over a depth-gradient ground plane.
Pixel color is a fixed monotone function of depth plus texture noise, so
depth is learnable from appearance; the returned depth map is the analytic
z-buffer and is independent of the texture noise stream.

On disk: ``root/images/<id>.png`` (8-bit RGB) and ``root/depth/<id>.png``
(16-bit single channel, depth_meters = value / 256.0, value 0 = invalid).
Samples without a depth file are unlabeled.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image


class DataError(RuntimeError):
    """Unreadable, malformed or missing dataset content."""


@dataclass
class SparseDepth:
    """Depth values in meters plus a per-pixel validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def density(self) -> float:
        return float(np.mean(self.valid))


@dataclass
class SceneConfig:
    height: int = 32
    width: int = 64
    d_min: float = 2.0
    d_max: float = 18.0
    min_objects: int = 2
    max_objects: int = 6
    # background plane depth is a vertical gradient; top/bottom endpoints are
    # drawn uniformly from these ranges (meters)
    bg_top_range: Optional[tuple[float, float]] = None
    bg_bottom_range: Optional[tuple[float, float]] = None
    noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.d_min >= self.d_max:
            raise ValueError("d_min must be < d_max")
        span = self.d_max - self.d_min
        if self.bg_top_range is None:
            self.bg_top_range = (self.d_min + 0.6 * span, self.d_min + 0.97 * span)
        if self.bg_bottom_range is None:
            self.bg_bottom_range = (self.d_min + 0.03 * span, self.d_min + 0.4 * span)


def depth_to_color(depth: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    """Fixed monotone depth -> RGB map, [3, h, w] in [0, 1]."""
    t = np.clip((depth - d_min) / (d_max - d_min), 0.0, 1.0)
    r = 0.9 - 0.75 * t
    g = 0.2 + 0.6 * t * (1.0 - t) * 2.0
    b = 0.15 + 0.75 * t
    return np.stack([r, g, b]).astype(np.float32)


def render_primitives(
    bg_depth: np.ndarray, primitives: list[tuple[np.ndarray, float]]
) -> np.ndarray:
    """Z-buffer composite: nearer depth wins wherever a primitive covers a pixel."""
    depth = bg_depth.copy()
    for mask, d in primitives:
        depth[mask] = np.minimum(depth[mask], d)
    return depth


def _sample_primitives(cfg: SceneConfig, rng: np.random.Generator):
    h, w = cfg.height, cfg.width
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    prims = []
    for _ in range(count):
        cy = rng.uniform(0.1, 0.9) * h
        cx = rng.uniform(0.1, 0.9) * w
        ry = rng.uniform(0.06, 0.28) * h
        rx = rng.uniform(0.06, 0.28) * w
        d = float(rng.uniform(cfg.d_min, cfg.d_min + 0.85 * (cfg.d_max - cfg.d_min)))
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        prims.append((mask, d))
    return prims


def generate_scene(
    cfg: SceneConfig,
    rng: np.random.Generator,
    texture_rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return (image [3, h, w] float32 in [0,1], depth [h, w] float32 meters).

    ``rng`` drives the geometry; texture noise comes from ``texture_rng``
    (derived from ``rng`` when not given), so the depth map never depends
    on the texture stream.
    """
    h, w = cfg.height, cfg.width
    top = float(rng.uniform(*cfg.bg_top_range))
    bottom = float(rng.uniform(*cfg.bg_bottom_range))
    rows = np.linspace(top, bottom, h, dtype=np.float64)
    bg = np.repeat(rows[:, None], w, axis=1)
    prims = _sample_primitives(cfg, rng)
    depth = render_primitives(bg, prims)
    depth = np.clip(depth, cfg.d_min, cfg.d_max).astype(np.float32)

    if texture_rng is None:
        texture_rng = np.random.default_rng(rng.integers(0, 2**63 - 1))
    image = depth_to_color(depth, cfg.d_min, cfg.d_max)
    if cfg.noise > 0:
        image = image + texture_rng.normal(0.0, cfg.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), depth


def sparsify(depth: np.ndarray, density: float, rng: np.random.Generator) -> SparseDepth:
    """Keep each pixel independently with probability ``density``."""
    if not (0.0 < density <= 1.0):
        raise ValueError(f"density must be in (0, 1], got {density}")
    valid = rng.random(depth.shape) < density
    values = np.where(valid, depth, 0.0).astype(np.float32)
    return SparseDepth(values=values, valid=valid)


# ---------------------------------------------------------------------------
# on-disk format


@dataclass
class DatasetIndex:
    root: Path
    ids: list[str]
    labeled: dict[str, bool] = field(default_factory=dict)

    @property
    def labeled_ids(self) -> list[str]:
        return [i for i in self.ids if self.labeled.get(i, False)]

    @property
    def unlabeled_ids(self) -> list[str]:
        return [i for i in self.ids if not self.labeled.get(i, False)]

    def subset(self, ids: list[str]) -> "DatasetIndex":
        keep = set(ids)
        return DatasetIndex(
            root=self.root,
            ids=[i for i in self.ids if i in keep],
            labeled={i: self.labeled[i] for i in self.ids if i in keep},
        )


def encode_depth_png(depth: SparseDepth) -> np.ndarray:
    """KITTI-convention 16-bit quantization; invalid pixels become 0."""
    q = np.round(depth.values * 256.0)
    q = np.clip(q, 0, 65535).astype(np.uint16)
    return np.where(depth.valid, q, 0).astype(np.uint16)


def decode_depth_png(arr: np.ndarray) -> SparseDepth:
    arr = arr.astype(np.int64)
    valid = arr > 0
    return SparseDepth(
        values=(arr / 256.0).astype(np.float32) * valid, valid=valid
    )


def write_sample(
    root: Path, sample_id: str, image: np.ndarray, depth: Optional[SparseDepth]
) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rgb = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb.transpose(1, 2, 0), mode="RGB").save(
        root / "images" / f"{sample_id}.png"
    )
    if depth is not None:
        (root / "depth").mkdir(parents=True, exist_ok=True)
        Image.fromarray(encode_depth_png(depth)).save(
            root / "depth" / f"{sample_id}.png"
        )


def load_dataset(root) -> DatasetIndex:
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise DataError(f"no images directory under {root}")
    ids = sorted(p.stem for p in img_dir.glob("*.png"))
    if not ids:
        raise DataError(f"no images found under {img_dir}")
    depth_dir = root / "depth"
    labeled = {i: (depth_dir / f"{i}.png").is_file() for i in ids}
    return DatasetIndex(root=root, ids=ids, labeled=labeled)


def read_sample(
    index: DatasetIndex, sample_id: str
) -> tuple[np.ndarray, Optional[SparseDepth]]:
    img_path = index.root / "images" / f"{sample_id}.png"
    try:
        with Image.open(img_path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {img_path}: {exc}") from exc
    image = (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)

    if not index.labeled.get(sample_id, False):
        return image, None
    depth_path = index.root / "depth" / f"{sample_id}.png"
    try:
        with Image.open(depth_path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read depth {depth_path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"depth file {depth_path} is not single-channel")
    depth = decode_depth_png(arr)
    if depth.values.shape != image.shape[1:]:
        raise DataError(
            f"depth size {depth.values.shape} does not match image "
            f"{image.shape[1:]} for sample {sample_id}"
        )
    return image, depth


def generate_dataset(
    root,
    n_labeled: int,
    n_unlabeled: int,
    scene_cfg: SceneConfig,
    seed: int,
    gt_density: float = 1.0,
) -> DatasetIndex:
    """Write a synthetic dataset: labeled samples first, then unlabeled."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    total = n_labeled + n_unlabeled
    for i in range(total):
        image, depth = generate_scene(scene_cfg, rng)
        gt = None
        if i < n_labeled:
            gt = sparsify(depth, gt_density, rng) if gt_density < 1.0 else SparseDepth(
                values=depth, valid=np.ones_like(depth, dtype=bool)
            )
        write_sample(root, f"{i:06d}", image, gt)
    return load_dataset(root)

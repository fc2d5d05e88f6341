import numpy as np
import pytest
from PIL import Image

from ssdepth.data import (
    DataError,
    SceneConfig,
    SparseDepth,
    decode_depth_png,
    encode_depth_png,
    generate_dataset,
    generate_scene,
    load_dataset,
    read_sample,
    render_primitives,
    sparsify,
    write_sample,
)


def test_flat_plane_scene():
    cfg = SceneConfig(
        height=16, width=16, d_min=2.0, d_max=18.0,
        min_objects=0, max_objects=0,
        bg_top_range=(10.0, 10.0), bg_bottom_range=(10.0, 10.0), noise=0.0,
    )
    image, depth = generate_scene(cfg, np.random.default_rng(0))
    assert np.allclose(depth, 10.0)
    assert image.shape == (3, 16, 16)
    assert image.min() >= 0.0 and image.max() <= 1.0


def test_zbuffer_nearer_wins():
    bg = np.full((8, 8), 15.0)
    near = np.zeros((8, 8), bool)
    near[2:6, 2:6] = True
    far = np.zeros((8, 8), bool)
    far[4:8, 4:8] = True
    depth = render_primitives(bg, [(far, 12.0), (near, 5.0)])
    assert depth[3, 3] == 5.0
    assert depth[5, 5] == 5.0  # overlap: nearer object wins
    assert depth[7, 7] == 12.0
    assert depth[0, 0] == 15.0
    # insertion order must not matter
    depth2 = render_primitives(bg, [(near, 5.0), (far, 12.0)])
    assert np.array_equal(depth, depth2)


def test_scene_determinism():
    cfg = SceneConfig(height=24, width=32)
    img_a, dep_a = generate_scene(cfg, np.random.default_rng(42))
    img_b, dep_b = generate_scene(cfg, np.random.default_rng(42))
    assert np.array_equal(img_a, img_b)
    assert np.array_equal(dep_a, dep_b)


def test_depth_invariant_to_texture_seed():
    cfg = SceneConfig(height=24, width=32, noise=0.1)
    img_a, dep_a = generate_scene(
        cfg, np.random.default_rng(5), texture_rng=np.random.default_rng(1)
    )
    img_b, dep_b = generate_scene(
        cfg, np.random.default_rng(5), texture_rng=np.random.default_rng(2)
    )
    assert np.array_equal(dep_a, dep_b)
    assert not np.array_equal(img_a, img_b)


def test_scene_depth_within_range():
    cfg = SceneConfig(height=32, width=64)
    rng = np.random.default_rng(9)
    for _ in range(10):
        image, depth = generate_scene(cfg, rng)
        assert depth.min() >= cfg.d_min and depth.max() <= cfg.d_max
        assert image.min() >= 0.0 and image.max() <= 1.0


def test_sparsify_full_density():
    depth = np.random.default_rng(0).uniform(1, 10, (8, 8)).astype(np.float32)
    sd = sparsify(depth, 1.0, np.random.default_rng(1))
    assert sd.valid.all()
    assert np.array_equal(sd.values, depth)


def test_sparsify_binomial_bound():
    depth = np.ones((32, 64), np.float32)
    rho = 0.05
    sd = sparsify(depth, rho, np.random.default_rng(2))
    n = depth.size
    count = sd.valid.sum()
    sigma = np.sqrt(n * rho * (1 - rho))
    assert abs(count - n * rho) <= 4 * sigma


def test_sparsify_determinism_and_range():
    depth = np.ones((8, 8), np.float32)
    a = sparsify(depth, 0.3, np.random.default_rng(3))
    b = sparsify(depth, 0.3, np.random.default_rng(3))
    assert np.array_equal(a.valid, b.valid)
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            sparsify(depth, bad, np.random.default_rng(0))


def test_depth_png_quantization_exact():
    rng = np.random.default_rng(4)
    values = rng.uniform(1.0, 80.0, (16, 16)).astype(np.float32)
    valid = rng.random((16, 16)) > 0.3
    sd = SparseDepth(values=np.where(valid, values, 0).astype(np.float32), valid=valid)
    decoded = decode_depth_png(encode_depth_png(sd))
    assert np.array_equal(decoded.valid, valid)
    expected = np.round(values * 256.0) / 256.0
    assert np.array_equal(decoded.values[valid], expected[valid].astype(np.float32))


def test_round_trip_on_disk(tmp_path):
    rng = np.random.default_rng(5)
    image = rng.random((3, 16, 24)).astype(np.float32)
    depth = SparseDepth(
        values=rng.uniform(1, 20, (16, 24)).astype(np.float32),
        valid=rng.random((16, 24)) > 0.5,
    )
    depth.values[~depth.valid] = 0.0
    write_sample(tmp_path, "000000", image, depth)
    index = load_dataset(tmp_path)
    assert index.ids == ["000000"]
    assert index.labeled["000000"]
    img_back, gt = read_sample(index, "000000")
    assert np.abs(img_back - image).max() <= 0.5 / 255 + 1e-6
    assert np.array_equal(gt.valid, depth.valid)
    assert np.abs(gt.values[gt.valid] - depth.values[depth.valid]).max() <= 1 / 512 + 1e-9


def test_kitti_convention_external_png(tmp_path):
    # a 16-bit depth PNG produced by other tooling must load as value/256
    (tmp_path / "images").mkdir()
    (tmp_path / "depth").mkdir()
    rgb = np.zeros((4, 6, 3), np.uint8)
    Image.fromarray(rgb, mode="RGB").save(tmp_path / "images" / "x.png")
    arr = np.zeros((4, 6), np.uint16)
    arr[0, 0] = 20480  # 80.0 m
    arr[1, 1] = 256    # 1.0 m
    arr[2, 2] = 1      # 1/256 m, still valid
    Image.fromarray(arr).save(tmp_path / "depth" / "x.png")
    index = load_dataset(tmp_path)
    _, gt = read_sample(index, "x")
    assert gt.values[0, 0] == pytest.approx(80.0)
    assert gt.values[1, 1] == pytest.approx(1.0)
    assert gt.values[2, 2] == pytest.approx(1.0 / 256.0)
    assert gt.valid[0, 0] and gt.valid[1, 1] and gt.valid[2, 2]
    assert not gt.valid[3, 3]  # zero pixel = invalid sentinel


def test_mixed_labeled_unlabeled_index(tmp_path):
    rng = np.random.default_rng(6)
    for i in range(3):
        img = rng.random((3, 8, 8)).astype(np.float32)
        depth = None
        if i == 0:
            depth = SparseDepth(
                values=np.full((8, 8), 5.0, np.float32), valid=np.ones((8, 8), bool)
            )
        write_sample(tmp_path, f"{i:06d}", img, depth)
    index = load_dataset(tmp_path)
    assert len(index.ids) == 3
    assert index.labeled_ids == ["000000"]
    assert len(index.unlabeled_ids) == 2
    _, gt = read_sample(index, "000001")
    assert gt is None


def test_size_mismatch_rejected(tmp_path):
    rng = np.random.default_rng(7)
    (tmp_path / "images").mkdir()
    (tmp_path / "depth").mkdir()
    Image.fromarray(np.zeros((8, 8, 3), np.uint8), mode="RGB").save(
        tmp_path / "images" / "a.png"
    )
    Image.fromarray(np.full((4, 4), 512, np.uint16)).save(tmp_path / "depth" / "a.png")
    index = load_dataset(tmp_path)
    with pytest.raises(DataError):
        read_sample(index, "a")


def test_missing_directory_rejected(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope")


def test_generate_dataset_counts(tmp_path):
    index = generate_dataset(
        tmp_path, n_labeled=2, n_unlabeled=3, scene_cfg=SceneConfig(height=16, width=16),
        seed=0,
    )
    assert len(index.ids) == 5
    assert len(index.labeled_ids) == 2

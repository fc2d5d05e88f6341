import numpy as np
import pytest
import torch

from ssdepth.data import DataError
from ssdepth.metrics import DepthMetrics, depth_metrics, evaluate_model
from ssdepth.verify import _naive_metrics


def test_perfect_prediction():
    gt = np.random.default_rng(0).uniform(1, 50, (8, 8))
    m = depth_metrics(gt.copy(), gt, cap=80.0)
    assert m.abs_rel == 0.0 and m.sq_rel == 0.0 and m.rmse == 0.0
    assert m.rmse_log == 0.0 and m.log10 == 0.0
    assert m.delta1 == 1.0 and m.delta2 == 1.0 and m.delta3 == 1.0


def test_doubled_prediction():
    gt = np.random.default_rng(1).uniform(1, 30, (6, 6))
    m = depth_metrics(2 * gt, gt, cap=80.0)
    assert m.abs_rel == pytest.approx(1.0)
    # ratio 2 exceeds 1.25^3 ~ 1.953, so every delta is zero
    assert m.delta1 == 0.0 and m.delta2 == 0.0 and m.delta3 == 0.0
    assert m.sq_rel == pytest.approx(np.mean(gt))


def test_three_pixel_hand_case():
    pred = np.array([[1.0, 2.0, 4.0]])
    gt = np.array([[2.0, 2.0, 2.0]])
    m = depth_metrics(pred, gt, cap=80.0)
    assert m.abs_rel == pytest.approx((0.5 + 0.0 + 1.0) / 3)
    # ratios are (2.0, 1.0, 2.0): only the middle pixel clears every threshold
    assert m.delta1 == pytest.approx(1 / 3)
    assert m.delta2 == pytest.approx(1 / 3)
    assert m.delta3 == pytest.approx(1 / 3)


def test_scale_sensitivity():
    gt = np.random.default_rng(2).uniform(1, 10, (5, 5))
    for c in (0.5, 0.9, 1.3, 1.8):
        m = depth_metrics(c * gt, gt, cap=1e6)
        assert m.abs_rel == pytest.approx(abs(c - 1.0), rel=1e-12)


def test_delta_monotone_in_threshold():
    rng = np.random.default_rng(3)
    pred = rng.uniform(1, 20, (10, 10))
    gt = rng.uniform(1, 20, (10, 10))
    m = depth_metrics(pred, gt, cap=80.0)
    assert m.delta1 <= m.delta2 <= m.delta3


def test_cap_changes_metrics():
    gt = np.array([[10.0, 60.0]])
    pred = np.array([[10.0, 70.0]])
    m80 = depth_metrics(pred, gt, cap=80.0)
    m50 = depth_metrics(pred, gt, cap=50.0)
    assert m80.abs_rel != m50.abs_rel
    assert m50.abs_rel == 0.0  # both clamped to 50


def test_gt_zero_pixels_excluded():
    gt = np.array([[0.0, 4.0]])
    pred = np.array([[99.0, 4.0]])
    m = depth_metrics(pred, gt, valid=np.array([[True, True]]), cap=80.0)
    assert m.abs_rel == 0.0


def test_no_valid_pixels_raises():
    with pytest.raises(DataError):
        depth_metrics(np.ones((2, 2)), np.zeros((2, 2)), cap=80.0)


def test_vectorized_matches_naive_loop():
    rng = np.random.default_rng(4)
    for _ in range(50):
        h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        pred = rng.uniform(0.5, 40.0, (h, w))
        gt = rng.uniform(0.5, 40.0, (h, w))
        valid = rng.random((h, w)) > 0.25
        valid[0, 0] = True
        cap = float(rng.choice([10.0, 30.0, 80.0]))
        m = depth_metrics(pred, gt, valid, cap=cap)
        ref = _naive_metrics(pred, gt, valid, cap, 1e-3)
        got = (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.log10,
               m.delta1, m.delta2, m.delta3)
        assert max(abs(a - b) for a, b in zip(got, ref)) <= 1e-12


def test_average_is_per_image_mean():
    rng = np.random.default_rng(5)
    images = []
    for _ in range(3):
        pred = rng.uniform(1, 20, (4, 4))
        gt = rng.uniform(1, 20, (4, 4))
        images.append((pred, gt))
    per_image = [depth_metrics(p, g, cap=80.0) for p, g in images]
    avg = DepthMetrics.average(per_image)
    # brute force double loop over images then fields
    for name in ("abs_rel", "rmse", "delta1"):
        total = 0.0
        for m in per_image:
            total += getattr(m, name)
        assert getattr(avg, name) == pytest.approx(total / 3)


def test_evaluate_model_perfect_oracle(tmp_path):
    # a "model" that replays the ground truth must score zero error
    from ssdepth.data import SceneConfig, generate_dataset, load_dataset, read_sample

    generate_dataset(tmp_path, 2, 0, SceneConfig(height=32, width=32), seed=0)
    index = load_dataset(tmp_path)

    class Oracle:
        training = False

        def eval(self):
            return self

        def train(self):
            return self

        def predict(self, x):
            sid = self._ids.pop(0)
            _, gt = read_sample(index, sid)
            from ssdepth.decoder import DepthPrediction

            return DepthPrediction(
                depth=torch.from_numpy(gt.values).unsqueeze(0),
                log_uncertainty=torch.zeros(1, 32, 32),
            )

    oracle = Oracle()
    oracle._ids = list(index.labeled_ids)
    m = evaluate_model(oracle, index, cap=20.0)
    assert m.abs_rel == 0.0 and m.delta1 == 1.0


def test_evaluate_model_empty_set(tmp_path):
    from ssdepth.data import SceneConfig, generate_dataset, load_dataset

    generate_dataset(tmp_path, 0, 2, SceneConfig(height=32, width=32), seed=0)
    index = load_dataset(tmp_path)
    with pytest.raises(DataError):
        evaluate_model(None, index, cap=20.0)

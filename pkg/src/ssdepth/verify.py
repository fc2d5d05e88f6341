"""Runtime self-check suites: partition invariants, gradient checks, metric oracles.

These are the same properties the test suite asserts, packaged so a build
can be verified from the command line on any machine.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch
from torch import Tensor

from .data import SparseDepth
from .encoder import (
    EncoderConfig,
    TransformerEncoder,
    encode_subsets_oracle,
    encode_with_partition,
)
from .losses import (
    PredictorHead,
    depth_consistency,
    feature_consistency,
    supervised_l1,
    uncertainty_nll,
)
from .masking import build_attention_mask, reassemble, sample_partition, shuffle_tokens
from .metrics import depth_metrics
from .model import DepthModel, ModelConfig


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"check": self.name, "pass": bool(self.passed), "detail": self.detail}


def central_difference_grads(
    fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6
) -> list[Tensor]:
    """Central finite differences of a scalar function w.r.t. each parameter."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = fn().item()
                flat[i] = orig - eps
                lo = fn().item()
                flat[i] = orig
                g.view(-1)[i] = (hi - lo) / (2 * eps)
            grads.append(g)
    return grads


def gradcheck(
    fn: Callable[[], Tensor],
    params: list[Tensor],
    eps: float = 1e-6,
    rtol: float = 1e-3,
) -> tuple[bool, float]:
    """Compare autograd gradients of ``fn()`` against central differences.

    Returns (passed, worst relative error), with the error measured as
    max|g_ad - g_fd| / max(max|g_ad|, max|g_fd|, 1e-8).
    """
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [
        p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in params
    ]
    numeric = central_difference_grads(fn, params, eps=eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        num = (a - n).abs().max().item()
        den = max(a.abs().max().item(), n.abs().max().item(), 1e-8)
        worst = max(worst, num / den)
    return worst <= rtol, worst


# ---------------------------------------------------------------------------
# suites


def check_partition_invariants(rng: np.random.Generator, n_partitions: int) -> int:
    """Count invariant violations over freshly sampled partitions."""
    violations = 0
    for _ in range(n_partitions):
        n = int(rng.integers(1, 65))
        k = int(rng.integers(1, 13))
        part = sample_partition(n, k, rng)
        cover = np.sort(np.concatenate([s for s in part.subsets]))
        if not np.array_equal(cover, np.arange(n)):
            violations += 1
            continue
        if not np.array_equal(part.perm[part.inv_perm], np.arange(n)):
            violations += 1
            continue
        if n <= 32:
            allow = build_attention_mask(part)
            owner = np.empty(n, dtype=np.int64)
            for si, s in enumerate(part.subsets):
                owner[part.inv_perm[s]] = si
            expected = owner[:, None] == owner[None, :]
            if not np.array_equal(allow, expected):
                violations += 1
    return violations


def oracle_equivalence_worst_diffs(
    rng: np.random.Generator, n_configs: int, seed: int = 0
) -> dict[torch.dtype, float]:
    """Joint masked encoding vs per-subset oracle over random small configs."""
    worst = {torch.float32: 0.0, torch.float64: 0.0}
    for i in range(n_configs):
        n = int(rng.integers(8, 65))
        d_model = int(rng.choice([16, 32, 64]))
        depth = int(rng.integers(1, 4))
        k = int(rng.integers(1, 9))
        heads = int(rng.choice([h for h in (2, 4) if d_model % h == 0]))
        part = sample_partition(n, k, rng)
        for dtype in (torch.float32, torch.float64):
            torch.manual_seed(seed + i)
            enc = TransformerEncoder(
                EncoderConfig(depth=depth, d_model=d_model, heads=heads)
            ).to(dtype)
            tokens = torch.randn(n, d_model, dtype=dtype)
            with torch.no_grad():
                joint = encode_with_partition(enc, tokens, part)
                oracle = encode_subsets_oracle(enc, tokens, part)
            diff = (joint.final - oracle.final).abs().max().item()
            for a, b in zip(joint.skips, oracle.skips):
                diff = max(diff, (a - b).abs().max().item())
            worst[dtype] = max(worst[dtype], diff)
    return worst


ORACLE_TOL = {torch.float32: 1e-5, torch.float64: 1e-10}


def run_masking_suite(
    seed: int = 0, n_partitions: int = 10_000, n_oracle: int = 25
) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    violations = check_partition_invariants(rng, n_partitions)
    results.append(
        CheckResult(
            "partition_invariants",
            violations == 0,
            f"{n_partitions} partitions, {violations} violations",
        )
    )

    seed_a = np.random.default_rng(123)
    seed_b = np.random.default_rng(123)
    pa = sample_partition(40, 6, seed_a)
    pb = sample_partition(40, 6, seed_b)
    same = np.array_equal(pa.perm, pb.perm) and np.array_equal(pa.splits, pb.splits)
    results.append(CheckResult("partition_determinism", same))

    worst = oracle_equivalence_worst_diffs(rng, n_oracle, seed)
    ok = all(worst[d] <= ORACLE_TOL[d] for d in worst)
    results.append(
        CheckResult(
            "subset_independence_oracle",
            ok,
            f"max abs diff fp32={worst[torch.float32]:.3e} "
            f"fp64={worst[torch.float64]:.3e} over {n_oracle} configs",
        )
    )

    torch.manual_seed(seed)
    enc = TransformerEncoder(EncoderConfig(depth=2, d_model=32, heads=4))
    tokens = torch.randn(24, 32)
    part = sample_partition(24, 1, rng)
    allow = torch.from_numpy(build_attention_mask(part))
    with torch.no_grad():
        masked = enc(shuffle_tokens(tokens, part), allow)
        plain = enc(tokens, None)
    diff = (reassemble(masked.final, part) - plain.final).abs().max().item()
    results.append(
        CheckResult("k1_neutrality", diff <= 1e-6, f"max abs diff {diff:.3e}")
    )
    return results


def run_gradcheck_suite(seed: int = 0) -> list[CheckResult]:
    torch.manual_seed(seed)
    results = []
    h, w = 6, 8

    def sparse(rng_seed=1):
        g = torch.Generator().manual_seed(rng_seed)
        values = torch.rand(h, w, generator=g, dtype=torch.float64) * 10 + 1
        valid = torch.rand(h, w, generator=g) > 0.3
        valid[0, 0] = True
        return SparseDepth(values=values, valid=valid)

    gt = sparse()
    pred = (torch.rand(h, w, dtype=torch.float64) * 10 + 1).requires_grad_()
    ok, err = gradcheck(lambda: supervised_l1(pred, gt), [pred])
    results.append(CheckResult("grad_supervised_l1", ok, f"rel err {err:.2e}"))

    pred2 = (torch.rand(h, w, dtype=torch.float64) * 10 + 1).requires_grad_()
    log_u = torch.randn(h, w, dtype=torch.float64).requires_grad_()
    ok, err = gradcheck(lambda: uncertainty_nll(pred2, log_u, gt), [pred2, log_u])
    results.append(CheckResult("grad_uncertainty_nll", ok, f"rel err {err:.2e}"))

    weak_d = torch.rand(h, w, dtype=torch.float64) * 10 + 1
    weak_s = torch.randn(h, w, dtype=torch.float64)
    strong_d = (torch.rand(h, w, dtype=torch.float64) * 10 + 1).requires_grad_()
    ok, err = gradcheck(
        lambda: depth_consistency(weak_d, weak_s, strong_d), [strong_d]
    )
    results.append(CheckResult("grad_depth_consistency", ok, f"rel err {err:.2e}"))

    head = PredictorHead(8).double()
    z_w = torch.randn(5, 8, dtype=torch.float64)
    z_s = torch.randn(5, 8, dtype=torch.float64).requires_grad_()
    params = [z_s] + list(head.parameters())
    ok, err = gradcheck(lambda: feature_consistency(z_w, z_s, head), params)
    results.append(CheckResult("grad_feature_consistency", ok, f"rel err {err:.2e}"))

    ok, err = _end_to_end_gradcheck(seed)
    results.append(CheckResult("grad_end_to_end", ok, f"rel err {err:.2e}"))
    return results


def _end_to_end_gradcheck(seed: int) -> tuple[bool, float]:
    torch.manual_seed(seed)
    cfg = ModelConfig(
        image_size=(32, 32),
        patch_size=4,
        d_model=8,
        depth=4,
        heads=2,
        mlp_ratio=1.0,
        d_min=1.0,
        d_max=10.0,
        level_channels=(2, 2, 2, 2),
        fusion_channels=4,
        head_channels=(4, 4),
    )
    model = DepthModel(cfg).double()
    rng = np.random.default_rng(seed)
    images = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    parts = [sample_partition(cfg.num_tokens, 3, rng)]
    # pseudo-labels are stop-gradient targets: freeze them, otherwise finite
    # differences would also measure the (deliberately cut) target path
    with torch.no_grad():
        weak = model(images)
        strong0 = model(images, parts)
    weak_log_u = weak.log_uncertainty.clone()
    weak_tokens = weak.tokens.clone()
    # offset the targets so no L1 residual sits within the FD step of its
    # kink, which would corrupt the central difference
    gt = SparseDepth(
        values=strong0.depth + 1.0 + 0.5 * torch.rand(1, 32, 32, dtype=torch.float64),
        valid=torch.ones(1, 32, 32, dtype=torch.bool),
    )
    weak_depth = weak.depth + 0.8 + 0.4 * torch.rand(1, 32, 32, dtype=torch.float64)
    # the feature term dwarfs the depth terms at init; scale it down so its
    # magnitude does not drown the decoder gradients in FD rounding noise
    lambda_fc = 0.05

    def loss_fn():
        strong = model(images, parts)
        return (
            supervised_l1(strong.depth, gt)
            + uncertainty_nll(strong.depth, strong.log_uncertainty, gt)
            + depth_consistency(weak_depth, weak_log_u, strong.depth)
            + lambda_fc * feature_consistency(weak_tokens, strong.tokens, model.predictor)
        )

    return gradcheck(loss_fn, list(model.parameters()), eps=1e-6)


def _naive_metrics(pred, gt, valid, cap, cap_min):
    """Per-pixel loop reference for the vectorized metrics."""
    import math

    ps, gs = [], []
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if valid[i, j] and gt[i, j] > 0:
                ps.append(min(max(pred[i, j], cap_min), cap))
                gs.append(min(max(gt[i, j], cap_min), cap))
    n = len(ps)
    abs_rel = sum(abs(p - g) / g for p, g in zip(ps, gs)) / n
    sq_rel = sum((p - g) ** 2 / g for p, g in zip(ps, gs)) / n
    rmse = math.sqrt(sum((p - g) ** 2 for p, g in zip(ps, gs)) / n)
    rmse_log = math.sqrt(
        sum((math.log(p) - math.log(g)) ** 2 for p, g in zip(ps, gs)) / n
    )
    log10 = sum(abs(math.log10(p) - math.log10(g)) for p, g in zip(ps, gs)) / n
    deltas = []
    for t in (1.25, 1.25**2, 1.25**3):
        deltas.append(sum(1 for p, g in zip(ps, gs) if max(p / g, g / p) < t) / n)
    return (abs_rel, sq_rel, rmse, rmse_log, log10, *deltas)


def run_metrics_suite(seed: int = 0, n_cases: int = 50) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        pred = rng.uniform(0.5, 30.0, size=(h, w))
        gt = rng.uniform(0.5, 30.0, size=(h, w))
        valid = rng.random((h, w)) > 0.2
        valid[0, 0] = True
        cap = float(rng.choice([10.0, 25.0, 80.0]))
        m = depth_metrics(pred, gt, valid, cap=cap)
        ref = _naive_metrics(pred, gt, valid, cap, 1e-3)
        got = (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.log10,
               m.delta1, m.delta2, m.delta3)
        worst = max(worst, max(abs(a - b) for a, b in zip(got, ref)))
    results = [
        CheckResult(
            "metrics_vs_naive_loop",
            worst <= 1e-12,
            f"max abs diff {worst:.3e} over {n_cases} cases",
        )
    ]

    gt = np.full((4, 4), 5.0)
    perfect = depth_metrics(gt.copy(), gt, cap=80.0)
    ok_perfect = (
        perfect.abs_rel == 0.0
        and perfect.rmse == 0.0
        and perfect.delta1 == 1.0
        and perfect.delta3 == 1.0
    )
    doubled = depth_metrics(2 * gt, gt, cap=80.0)
    ok_doubled = (
        abs(doubled.abs_rel - 1.0) < 1e-15
        and doubled.delta1 == 0.0
        and doubled.delta2 == 0.0
        and doubled.delta3 == 0.0
    )
    results.append(CheckResult("metrics_analytic_cases", ok_perfect and ok_doubled))
    return results


SUITES = {
    "masking": run_masking_suite,
    "gradcheck": run_gradcheck_suite,
    "metrics": run_metrics_suite,
}


def run_suites(names: list[str], seed: int = 0) -> list[CheckResult]:
    results = []
    for name in names:
        results.extend(SUITES[name](seed))
    return results

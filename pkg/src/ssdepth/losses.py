"""Loss terms: sparse supervision, uncertainty NLL, and the two consistency losses.

Uncertainty is parameterized as s = log U, so the NLL's division by U
becomes a multiply by exp(-s) and never divides by zero. Consistency
targets (the weak branch's depth, uncertainty and features) are detached
inside the loss functions themselves, so no gradient can reach the
pseudo-label path regardless of how the caller produced it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import torch
from torch import Tensor, nn

WEIGHT_MODE_CONFIDENCE = "confidence"
WEIGHT_MODE_LITERAL = "literal"
WEIGHT_MODE_NONE = "none"


class EmptySupervisionError(ValueError):
    """Raised when a supervised loss is asked to average over zero valid pixels."""


@dataclass
class LossWeights:
    lambda_dc: float = 1.0
    lambda_uc: float = 1.0
    lambda_fc: float = 1.0
    weak_k: int = 1
    strong_k: int = 64

    def __post_init__(self):
        if min(self.lambda_dc, self.lambda_uc, self.lambda_fc) < 0:
            raise ValueError("loss weights must be non-negative")


def supervised_l1(pred: Tensor, gt) -> Tensor:
    """Mean absolute depth error over the valid ground-truth pixels."""
    values, valid = gt.values, gt.valid
    if pred.shape != values.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(values.shape)}")
    if not bool(valid.any()):
        raise EmptySupervisionError("no valid ground-truth pixels")
    return (pred - values).abs()[valid].mean()


def uncertainty_nll(pred: Tensor, log_u: Tensor, gt) -> Tensor:
    """Heteroscedastic NLL: mean over valid pixels of |pred - gt| * exp(-s) + s."""
    values, valid = gt.values, gt.valid
    if pred.shape != values.shape or log_u.shape != values.shape:
        raise ValueError("prediction / uncertainty / ground-truth shapes differ")
    if not bool(valid.any()):
        raise EmptySupervisionError("no valid ground-truth pixels")
    residual = (pred - values).abs()
    per_pixel = residual * torch.exp(-log_u) + log_u
    return per_pixel[valid].mean()


def depth_consistency(
    weak_depth: Tensor,
    weak_log_u: Tensor,
    strong_depth: Tensor,
    weight_mode: str = WEIGHT_MODE_CONFIDENCE,
) -> Tensor:
    """Confidence-weighted L1 between the strong prediction and the weak pseudo-label.

    The weight is exp(-s) clamped to [0, 1], so fully distrusted pixels
    contribute nothing. Both the pseudo-label and the weight are detached.
    ``literal`` mode instead multiplies by U = exp(s) itself, matching the
    written formula rather than its stated intent (kept for comparison only);
    ``none`` drops the gating entirely (the plain-consistency ablation).
    """
    if weak_depth.shape != strong_depth.shape:
        raise ValueError("weak / strong depth shapes differ")
    target = weak_depth.detach()
    s = weak_log_u.detach()
    if weight_mode == WEIGHT_MODE_CONFIDENCE:
        weight = torch.exp(-s).clamp(max=1.0)
    elif weight_mode == WEIGHT_MODE_LITERAL:
        weight = torch.exp(s)
    elif weight_mode == WEIGHT_MODE_NONE:
        weight = torch.ones_like(s)
    else:
        raise ValueError(f"unknown weight mode {weight_mode!r}")
    return (weight * (target - strong_depth).abs()).mean()


def feature_consistency(
    z_weak: Tensor, z_strong: Tensor, head: Optional[nn.Module]
) -> Tensor:
    """Mean squared L2 distance between detached weak tokens and h(strong tokens)."""
    if z_weak.shape != z_strong.shape:
        raise ValueError("weak / strong token shapes differ")
    target = z_weak.detach()
    pred = head(z_strong) if head is not None else z_strong
    return (target - pred).pow(2).sum(dim=-1).mean()


def total_loss(
    terms: Mapping[str, Optional[Tensor]], weights: LossWeights
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the available terms plus a per-term float breakdown.

    Missing terms (e.g. no labeled pixels in the slice) contribute zero and
    are reported as 0.0.
    """
    zero = None
    for t in terms.values():
        if t is not None:
            zero = torch.zeros((), dtype=t.dtype, device=t.device)
            break
    if zero is None:
        raise ValueError("no loss terms present")

    def term(name):
        t = terms.get(name)
        return zero if t is None else t

    total = (
        term("l_gt")
        + weights.lambda_dc * term("l_dc")
        + weights.lambda_uc * term("l_uc")
        + weights.lambda_fc * term("l_fc")
    )
    breakdown = {
        name: float(term(name).detach()) for name in ("l_gt", "l_dc", "l_uc", "l_fc")
    }
    breakdown["total"] = float(total.detach())
    return total, breakdown


class PredictorHead(nn.Module):
    """Two-layer per-token MLP applied to the strong branch before L_fc.

    Hidden width defaults to 2 * d_model so that the identity map is exactly
    representable (relu(x) - relu(-x) = x), which keeps the loss analytically
    checkable.
    """

    def __init__(self, d_model: int, hidden: Optional[int] = None):
        super().__init__()
        self.d_model = d_model
        hidden = hidden or 2 * d_model
        self.fc1 = nn.Linear(d_model, hidden)
        self.fc2 = nn.Linear(hidden, d_model)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(torch.relu(self.fc1(x)))

    @torch.no_grad()
    def init_identity(self):
        """Set weights so the head computes the exact identity map."""
        d, h = self.d_model, self.fc1.out_features
        if h < 2 * d:
            raise ValueError("identity init needs hidden width >= 2 * d_model")
        eye = torch.eye(d)
        w1 = torch.zeros(h, d)
        w1[:d] = eye
        w1[d : 2 * d] = -eye
        w2 = torch.zeros(d, h)
        w2[:, :d] = eye
        w2[:, d : 2 * d] = -eye
        self.fc1.weight.copy_(w1)
        self.fc1.bias.zero_()
        self.fc2.weight.copy_(w2)
        self.fc2.bias.zero_()
        return self

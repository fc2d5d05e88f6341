"""Standard depth evaluation metrics and the per-image evaluation protocol."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
import torch

from .data import DataError, DatasetIndex, read_sample

CAP_MIN_DEFAULT = 1e-3


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    log10: float
    delta1: float
    delta2: float
    delta3: float

    def to_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def average(items: list["DepthMetrics"]) -> "DepthMetrics":
        if not items:
            raise ValueError("cannot average zero metric sets")
        return DepthMetrics(
            **{
                f.name: float(np.mean([getattr(m, f.name) for m in items]))
                for f in fields(DepthMetrics)
            }
        )


def depth_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    valid: Optional[np.ndarray] = None,
    cap: float = 80.0,
    cap_min: float = CAP_MIN_DEFAULT,
) -> DepthMetrics:
    """Error and threshold-accuracy metrics over valid, depth-capped pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mask = gt > 0
    if valid is not None:
        mask &= valid.astype(bool)
    if not mask.any():
        raise DataError("no valid pixels to evaluate")
    p = np.clip(pred[mask], cap_min, cap)
    g = np.clip(gt[mask], cap_min, cap)

    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        sq_rel=float(np.mean((p - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )


def evaluate_model(
    model,
    index: DatasetIndex,
    cap: float,
    cap_min: float = CAP_MIN_DEFAULT,
    device: str = "cpu",
) -> DepthMetrics:
    """Metrics per labeled image, then averaged. No median scaling."""
    labeled = index.labeled_ids
    if not labeled:
        raise DataError(f"no labeled samples to evaluate under {index.root}")
    was_training = model.training
    model.eval()
    per_image = []
    for sample_id in labeled:
        image, gt = read_sample(index, sample_id)
        x = torch.from_numpy(image).unsqueeze(0).to(device)
        pred = model.predict(x).depth.squeeze(0).cpu().numpy()
        per_image.append(
            depth_metrics(pred, gt.values, gt.valid, cap=cap, cap_min=cap_min)
        )
    if was_training:
        model.train()
    return DepthMetrics.average(per_image)

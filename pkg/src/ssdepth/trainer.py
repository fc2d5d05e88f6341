"""Two-branch semi-supervised training loop.

Each step composes a 1:7 labeled:unlabeled batch, runs the weak branch
(full tokens, no gradient) to produce pseudo-labels, runs the strong branch
under fresh per-sample K-way partitions, and takes one Adam step with
separate encoder / decoder learning rates. The weak forward is skipped
entirely when no consistency term is active.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from . import __version__
from .data import DataError, DatasetIndex, SparseDepth, read_sample
from .losses import (
    EmptySupervisionError,
    LossWeights,
    depth_consistency,
    feature_consistency,
    supervised_l1,
    total_loss,
    uncertainty_nll,
)
from .masking import sample_partition
from .metrics import evaluate_model
from .model import DepthModel, ModelConfig


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite; carries the per-term breakdown."""

    def __init__(self, step: int, breakdown: dict[str, float]):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    # model
    image_h: int = 32
    image_w: int = 64
    patch_size: int = 4
    d_model: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    d_min: float = 1.0
    d_max: float = 20.0
    depth_mode: str = "linear"
    mask_fill: str = "exact"
    attn_scale: str = "standard"
    predictor: str = "mlp"
    predictor_blocks: int = 2
    fusion_channels: int = 0  # 0 = derive from d_model
    # optimization
    batch_size: int = 8
    labeled_fraction: float = 0.125  # 1 labeled per 8
    lr_encoder: float = 1e-5
    lr_decoder: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    steps: int = 1000
    seed: int = 0
    # loss weights and branch masking
    lambda_dc: float = 1.0
    lambda_uc: float = 1.0
    lambda_fc: float = 1.0
    weak_k: int = 1
    strong_k: int = 64
    dc_weight_mode: str = "confidence"
    # augmentation
    flip: bool = True
    jitter: float = 0.4
    # bookkeeping
    eval_every: int = 500
    eval_cap: float = 0.0  # 0 = use d_max
    checkpoint_every: int = 0  # 0 = final only
    # the model is small enough that intra-op threading loses to its own
    # overhead; 0 leaves the torch default in place
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_encoder <= 0 or self.lr_decoder <= 0:
            raise ValueError("learning rates must be positive")
        self.weights  # validates non-negative lambdas

    @property
    def weights(self) -> LossWeights:
        return LossWeights(
            lambda_dc=self.lambda_dc,
            lambda_uc=self.lambda_uc,
            lambda_fc=self.lambda_fc,
            weak_k=self.weak_k,
            strong_k=self.strong_k,
        )

    @property
    def cap(self) -> float:
        return self.eval_cap if self.eval_cap > 0 else self.d_max

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=(self.image_h, self.image_w),
            patch_size=self.patch_size,
            d_model=self.d_model,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            d_min=self.d_min,
            d_max=self.d_max,
            depth_mode=self.depth_mode,
            mask_fill=self.mask_fill,
            attn_scale=self.attn_scale,
            predictor=self.predictor,
            predictor_blocks=self.predictor_blocks,
            fusion_channels=self.fusion_channels or None,
        )

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return TrainConfig(**d)


class SampleStream:
    """Epoch-shuffled sampling without replacement; reshuffles per epoch."""

    def __init__(self, ids: list[str], rng: np.random.Generator):
        self.ids = list(ids)
        self.rng = rng
        self._order: list[str] = []

    def take(self, n: int) -> list[str]:
        out = []
        while len(out) < n:
            if not self._order:
                self._order = [self.ids[i] for i in self.rng.permutation(len(self.ids))]
            out.append(self._order.pop())
        return out

    def get_state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": list(self._order)}

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._order = list(state["order"])


@dataclass
class Batch:
    images: np.ndarray  # [B, 3, h, w] float32
    gt: list[Optional[SparseDepth]]
    is_labeled: np.ndarray  # [B] bool
    ids: list[str]


def compose_batch(
    labeled: SampleStream,
    unlabeled: Optional[SampleStream],
    batch_size: int,
    labeled_fraction: float,
) -> tuple[list[str], list[str]]:
    """Pick ids for one batch: labeled first, unlabeled fill the rest.

    With an empty unlabeled pool the whole batch is labeled (pure supervised
    fallback); the labeled pool must never be empty.
    """
    if not labeled.ids:
        raise DataError("labeled pool is empty")
    if unlabeled is None or not unlabeled.ids:
        return labeled.take(batch_size), []
    n_lab = max(1, round(batch_size * labeled_fraction))
    n_lab = min(n_lab, batch_size)
    return labeled.take(n_lab), unlabeled.take(batch_size - n_lab)


def _apply_jitter(image: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    b = rng.uniform(1.0 - strength, 1.0 + strength)
    c = rng.uniform(1.0 - strength, 1.0 + strength)
    s = rng.uniform(1.0 - strength, 1.0 + strength)
    x = image * b
    mean = x.mean()
    x = (x - mean) * c + mean
    gray = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]
    x = gray[None] + (x - gray[None]) * s
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def augment_pair(
    image: np.ndarray, rng: np.random.Generator, flip: bool, jitter: float
) -> tuple[np.ndarray, np.ndarray, bool]:
    """One shared flip decision, then independent photometric jitter per view.

    Geometry stays identical between the views so per-pixel consistency
    targets remain aligned; only the shared flip moves pixels, and the
    caller must mirror the depth target when it fires.
    """
    flipped = bool(flip and rng.random() < 0.5)
    base = np.ascontiguousarray(image[:, :, ::-1]) if flipped else image
    if jitter > 0:
        weak = _apply_jitter(base, rng, jitter)
        strong = _apply_jitter(base, rng, jitter)
    else:
        weak = base.copy()
        strong = base.copy()
    return weak, strong, flipped


def flip_sparse_depth(gt: SparseDepth) -> SparseDepth:
    return SparseDepth(
        values=np.ascontiguousarray(gt.values[:, ::-1]),
        valid=np.ascontiguousarray(gt.valid[:, ::-1]),
    )


class Trainer:
    def __init__(self, cfg: TrainConfig, train_index: DatasetIndex,
                 eval_index: Optional[DatasetIndex] = None, device: str = "cpu"):
        if cfg.threads > 0:
            torch.set_num_threads(cfg.threads)
        self.cfg = cfg
        self.device = device
        self.train_index = train_index
        self.eval_index = eval_index
        torch.manual_seed(cfg.seed)
        self.model = DepthModel(cfg.model_config()).to(device)
        self.optimizer = torch.optim.Adam(
            [
                {"params": list(self.model.encoder_parameters()), "lr": cfg.lr_encoder},
                {"params": list(self.model.decoder_parameters()), "lr": cfg.lr_decoder},
            ],
            betas=(cfg.adam_beta1, cfg.adam_beta2),
        )
        self.step = 0
        base = np.random.default_rng(cfg.seed)
        seeds = base.integers(0, 2**63 - 1, size=4)
        self.labeled_stream = SampleStream(
            train_index.labeled_ids, np.random.default_rng(seeds[0])
        )
        self.unlabeled_stream = SampleStream(
            train_index.unlabeled_ids, np.random.default_rng(seeds[1])
        )
        self.aug_rng = np.random.default_rng(seeds[2])
        self.part_rng = np.random.default_rng(seeds[3])
        self._cache: dict[str, tuple[np.ndarray, Optional[SparseDepth]]] = {}

    # ------------------------------------------------------------------ data

    def _sample(self, sample_id: str):
        if sample_id not in self._cache:
            self._cache[sample_id] = read_sample(self.train_index, sample_id)
        return self._cache[sample_id]

    def next_batch(self) -> Batch:
        lab_ids, unlab_ids = compose_batch(
            self.labeled_stream,
            self.unlabeled_stream,
            self.cfg.batch_size,
            self.cfg.labeled_fraction,
        )
        ids = lab_ids + unlab_ids
        images, gts, labeled = [], [], []
        for sid in ids:
            img, gt = self._sample(sid)
            images.append(img)
            gts.append(gt)
            labeled.append(gt is not None)
        return Batch(
            images=np.stack(images),
            gt=gts,
            is_labeled=np.array(labeled, dtype=bool),
            ids=ids,
        )

    # ------------------------------------------------------------------ step

    def _needs_weak(self) -> bool:
        return self.cfg.lambda_dc > 0 or self.cfg.lambda_fc > 0

    def train_step(self, batch: Batch) -> dict[str, float]:
        cfg = self.cfg
        b = batch.images.shape[0]
        weak_views, strong_views, gts = [], [], []
        for i in range(b):
            weak, strong, flipped = augment_pair(
                batch.images[i], self.aug_rng, cfg.flip, cfg.jitter
            )
            weak_views.append(weak)
            strong_views.append(strong)
            gt = batch.gt[i]
            if gt is not None and flipped:
                gt = flip_sparse_depth(gt)
            gts.append(gt)

        strong_x = torch.from_numpy(np.stack(strong_views)).to(self.device)
        n_tokens = self.model.cfg.num_tokens
        partitions = None
        if cfg.strong_k > 1:
            partitions = [
                sample_partition(n_tokens, cfg.strong_k, self.part_rng)
                for _ in range(b)
            ]
        strong_out = self.model(strong_x, partitions)

        weak_out = None
        if self._needs_weak():
            weak_x = torch.from_numpy(np.stack(weak_views)).to(self.device)
            with torch.no_grad():
                if cfg.weak_k > 1:
                    weak_parts = [
                        sample_partition(n_tokens, cfg.weak_k, self.part_rng)
                        for _ in range(b)
                    ]
                    weak_out = self.model(weak_x, weak_parts)
                else:
                    weak_out = self.model(weak_x)

        terms: dict[str, Optional[Tensor]] = {"l_gt": None, "l_dc": None,
                                              "l_uc": None, "l_fc": None}
        if batch.is_labeled.any():
            values = np.stack(
                [g.values if g is not None else np.zeros_like(batch.images[0, 0])
                 for g in gts]
            )
            valid = np.stack(
                [g.valid if g is not None else np.zeros(batch.images[0, 0].shape, bool)
                 for g in gts]
            )
            gt_t = SparseDepth(
                values=torch.from_numpy(values).to(self.device),
                valid=torch.from_numpy(valid).to(self.device),
            )
            terms["l_gt"] = supervised_l1(strong_out.depth, gt_t)
            if cfg.lambda_uc > 0:
                terms["l_uc"] = uncertainty_nll(
                    strong_out.depth, strong_out.log_uncertainty, gt_t
                )
        if weak_out is not None and cfg.lambda_dc > 0:
            terms["l_dc"] = depth_consistency(
                weak_out.depth,
                weak_out.log_uncertainty,
                strong_out.depth,
                weight_mode=cfg.dc_weight_mode,
            )
        if weak_out is not None and cfg.lambda_fc > 0:
            terms["l_fc"] = feature_consistency(
                weak_out.tokens, strong_out.tokens, self.model.predictor
            )

        loss, breakdown = total_loss(terms, cfg.weights)
        if not np.isfinite(breakdown["total"]):
            raise TrainingDivergedError(self.step + 1, breakdown)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.step += 1
        record = {"step": self.step, **breakdown,
                  "lr_enc": cfg.lr_encoder, "lr_dec": cfg.lr_decoder}
        return record

    # ------------------------------------------------------------------- fit

    def evaluate(self) -> Optional[dict[str, float]]:
        if self.eval_index is None:
            return None
        m = evaluate_model(self.model, self.eval_index, cap=self.cfg.cap,
                           device=self.device)
        return {"step": self.step, **m.to_dict()}

    def fit(self, out_dir, log_name: str = "log.jsonl") -> Path:
        """Run the configured number of steps; returns the final checkpoint path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt_path = out / "checkpoint.ckpt"
        with open(out / log_name, "a") as log:
            if self.step == 0 and self.cfg.steps == 0:
                save_checkpoint(ckpt_path, self)
                return ckpt_path
            while self.step < self.cfg.steps:
                record = self.train_step(self.next_batch())
                log.write(json.dumps(record) + "\n")
                if self.cfg.eval_every > 0 and self.step % self.cfg.eval_every == 0:
                    ev = self.evaluate()
                    if ev is not None:
                        log.write(json.dumps(ev) + "\n")
                if (
                    self.cfg.checkpoint_every > 0
                    and self.step % self.cfg.checkpoint_every == 0
                ):
                    save_checkpoint(ckpt_path, self)
            ev = self.evaluate()
            if ev is not None and (
                self.cfg.eval_every == 0 or self.step % self.cfg.eval_every != 0
            ):
                log.write(json.dumps(ev) + "\n")
        save_checkpoint(ckpt_path, self)
        return ckpt_path

    # ----------------------------------------------------------- persistence

    def rng_state(self) -> dict:
        return {
            "labeled": self.labeled_stream.get_state(),
            "unlabeled": self.unlabeled_stream.get_state(),
            "aug": self.aug_rng.bit_generator.state,
            "part": self.part_rng.bit_generator.state,
        }

    def set_rng_state(self, state: dict) -> None:
        self.labeled_stream.set_state(state["labeled"])
        self.unlabeled_stream.set_state(state["unlabeled"])
        self.aug_rng.bit_generator.state = state["aug"]
        self.part_rng.bit_generator.state = state["part"]


CHECKPOINT_MAGIC = b"SSDPCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, trainer: Trainer) -> None:
    """Single-file checkpoint: magic, format version, JSON header, weight blobs."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "code_version": __version__,
        "step": trainer.step,
        "config": asdict(trainer.cfg),
        "rng": trainer.rng_state(),
    }
    header_bytes = json.dumps(header).encode("utf-8")
    payload = io.BytesIO()
    torch.save(
        {
            "model": trainer.model.state_dict(),
            "optimizer": trainer.optimizer.state_dict(),
        },
        payload,
    )
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload.getvalue())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return (header, blobs) from a checkpoint file."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path} is not a checkpoint (bad magic)")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len).decode("utf-8"))
        blobs = torch.load(io.BytesIO(f.read()), map_location="cpu",
                           weights_only=False)
    return header, blobs


def _untuple_config(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_model_from_checkpoint(path) -> tuple[DepthModel, TrainConfig, int]:
    header, blobs = read_checkpoint(path)
    cfg = TrainConfig.from_dict(_untuple_config(header["config"]))
    model = DepthModel(cfg.model_config())
    model.load_state_dict(blobs["model"])
    return model, cfg, header["step"]


def resume_trainer(
    path,
    train_index: DatasetIndex,
    eval_index: Optional[DatasetIndex] = None,
    steps: Optional[int] = None,
    device: str = "cpu",
) -> Trainer:
    """Rebuild a trainer mid-run: parameters, optimizer state, step, rng streams."""
    header, blobs = read_checkpoint(path)
    cfg = TrainConfig.from_dict(_untuple_config(header["config"]))
    if steps is not None:
        cfg.steps = steps
    trainer = Trainer(cfg, train_index, eval_index, device=device)
    trainer.model.load_state_dict(blobs["model"])
    trainer.optimizer.load_state_dict(blobs["optimizer"])
    trainer.step = header["step"]
    trainer.set_rng_state(header["rng"])
    return trainer

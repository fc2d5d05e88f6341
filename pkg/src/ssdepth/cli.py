"""Command-line entry points: gen-data, train, eval, verify, mask-demo.

Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 data failure.
Every command writes a run manifest into its output directory before any
other side effect.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import DataError, SceneConfig, generate_dataset, load_dataset
from .losses import EmptySupervisionError
from .trainer import (
    TrainConfig,
    Trainer,
    TrainingDivergedError,
    load_model_from_checkpoint,
    resume_trainer,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_DATA = 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    code_version: str = __version__
    started_at: str = ""
    finished_at: str = ""
    outputs: list[str] = field(default_factory=list)

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w") as f:
            json.dump(asdict(self), f, indent=2, default=str)
            f.write("\n")
        os.replace(tmp, path)


def _timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def _start_manifest(out_dir: Path, command: str, config: dict, seed: int) -> RunManifest:
    manifest = RunManifest(
        command=command, config=config, seed=seed, started_at=_timestamp()
    )
    manifest.write(out_dir / "manifest.json")
    return manifest


def _finish_manifest(out_dir: Path, manifest: RunManifest, outputs: list[str]) -> None:
    manifest.finished_at = _timestamp()
    manifest.outputs = outputs
    manifest.write(out_dir / "manifest.json")


# ---------------------------------------------------------------------- data


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is non-empty (use --force)")
    scene = SceneConfig(
        height=args.height,
        width=args.width,
        d_min=args.d_min,
        d_max=args.d_max,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
        noise=args.noise,
        seed=args.seed,
    )
    config = {
        "n_labeled": args.n_labeled,
        "n_unlabeled": args.n_unlabeled,
        "gt_density": args.gt_density,
        **asdict(scene),
    }
    manifest = _start_manifest(out, "gen-data", config, args.seed)
    index = generate_dataset(
        out,
        n_labeled=args.n_labeled,
        n_unlabeled=args.n_unlabeled,
        scene_cfg=scene,
        seed=args.seed,
        gt_density=args.gt_density,
    )
    _finish_manifest(out, manifest, [str(out)])
    print(f"wrote {len(index.ids)} samples ({len(index.labeled_ids)} labeled) to {out}")
    return EXIT_OK


# --------------------------------------------------------------------- train


def _load_config_file(path: Path) -> dict:
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError as exc:  # tomllib is stdlib from 3.11
            raise UsageError(
                "TOML configs need Python 3.11+; use a JSON config instead"
            ) from exc
        return tomllib.loads(text)
    return json.loads(text)


def cmd_train(args) -> int:
    cfg_dict = {}
    if args.config:
        cfg_dict = _load_config_file(Path(args.config))
    if args.steps is not None:
        cfg_dict["steps"] = args.steps
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    try:
        cfg = TrainConfig.from_dict(cfg_dict)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc

    train_index = load_dataset(args.data)
    eval_index = load_dataset(args.eval_data) if args.eval_data else None
    out = Path(args.out)
    if args.resume:
        trainer = resume_trainer(args.resume, train_index, eval_index, steps=args.steps)
    else:
        trainer = Trainer(cfg, train_index, eval_index)
    manifest = _start_manifest(out, "train", asdict(trainer.cfg), trainer.cfg.seed)
    ckpt = trainer.fit(out)
    _finish_manifest(out, manifest, [str(ckpt), str(out / "log.jsonl")])
    print(f"finished at step {trainer.step}; checkpoint: {ckpt}")
    return EXIT_OK


# ---------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    from .metrics import evaluate_model

    model, cfg, step = load_model_from_checkpoint(args.ckpt)
    index = load_dataset(args.data)
    cap = args.cap if args.cap else cfg.cap
    metrics = evaluate_model(model, index, cap=cap)
    print(json.dumps(metrics.to_dict()))
    return EXIT_OK


# -------------------------------------------------------------------- verify


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suites

    names = list(SUITES) if args.suite == "all" else [args.suite]
    results = run_suites(names, seed=args.seed)
    for r in results:
        print(json.dumps(r.to_dict()))
    failed = [r for r in results if not r.passed]
    print(
        json.dumps(
            {"suite": args.suite, "checks": len(results), "failed": len(failed)}
        )
    )
    return EXIT_OK if not failed else EXIT_NUMERIC


# ----------------------------------------------------------------- mask-demo


def cmd_mask_demo(args) -> int:
    from PIL import Image

    from .model import DepthModel
    from .viz import build_mask_demo, compose_panel

    img_path = Path(args.image)
    try:
        with Image.open(img_path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {img_path}: {exc}") from exc
    image = (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)

    if args.ckpt:
        model, cfg, _ = load_model_from_checkpoint(args.ckpt)
    else:
        import torch

        from .trainer import TrainConfig

        torch.manual_seed(args.seed)
        cfg = TrainConfig(image_h=image.shape[1], image_w=image.shape[2])
        model = DepthModel(cfg.model_config())
    if (image.shape[1], image.shape[2]) != tuple(model.cfg.image_size):
        raise DataError(
            f"image size {image.shape[1:]} does not match model "
            f"{model.cfg.image_size}"
        )
    model.eval()
    demo = build_mask_demo(
        model,
        image,
        k=args.k,
        seed=args.seed,
        include_uncertainty=bool(args.ckpt),
        naive=args.naive,
        naive_ratio=args.naive_ratio,
    )
    panel = compose_panel(demo, model.cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(panel).save(out)
    print(f"wrote {out}")
    return EXIT_OK


# --------------------------------------------------------------------- wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="ssdepth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-labeled", type=int, required=True)
    p.add_argument("--n-unlabeled", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--d-min", type=float, default=2.0)
    p.add_argument("--d-max", type=float, default=18.0)
    p.add_argument("--min-objects", type=int, default=2)
    p.add_argument("--max-objects", type=int, default=6)
    p.add_argument("--noise", type=float, default=0.04)
    p.add_argument("--gt-density", type=float, default=1.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the two-branch training loop")
    p.add_argument("--config", help="JSON or TOML file of TrainConfig fields")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, print metrics JSON")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cap", type=float, default=0.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the self-check suites")
    p.add_argument(
        "--suite", choices=["masking", "gradcheck", "metrics", "all"], default="all"
    )
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("mask-demo", help="visualize a partition and both branches")
    p.add_argument("--image", required=True)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--naive", action="store_true")
    p.add_argument("--naive-ratio", type=float, default=0.5)
    p.set_defaults(func=cmd_mask_demo)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data failure: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EmptySupervisionError as exc:
        print(f"data failure: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points: train | finetune | detect | eval | synth | ablate."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .data import DEFECT_TYPES, PATTERNS, SynthSpec, synth_dataset, write_mvtec_layout
from .pipeline import (
    DATA_ROOT_ENV,
    PipelineConfig,
    ablate,
    config_hash,
    load_config,
    run_pipeline,
)

_ABLATE_MODES = {"pixel": "pixel_only", "feature": "feature_only", "combined": "combined"}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML pipeline config; flags override its values")
    p.add_argument("--out", default="runs", help="root for new run directories")
    p.add_argument("--run", help="existing run directory to continue or evaluate")
    p.add_argument(
        "--input",
        help=f"dataset root in the category/train|test|ground_truth layout; "
        f"defaults to ${DATA_ROOT_ENV}, then built-in synthetic data",
    )
    p.add_argument("--category", help="dataset category name")
    p.add_argument("--resolution", type=int, help="working image resolution")
    p.add_argument("--seed", type=int, help="seed applied to every pipeline stage")


def _add_recon_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ckpt", help="denoiser checkpoint path")
    p.add_argument("--w", type=float, help="conditioning weight")
    p.add_argument("--steps", type=int, help="number of reconstruction steps")
    p.add_argument("--tprime", type=int, help="perturbation depth to start from")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddad",
        description="Diffusion-based anomaly detection: reconstruction, scoring, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the denoiser on nominal images")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("finetune", help="domain-adapt the feature extractor")
    _add_common(p)
    p.add_argument("--ckpt", help="denoiser checkpoint path")
    p.add_argument("--fe", help="extractor backbone id (default toy-cnn)")
    p.add_argument("--epochs", type=int, help="adaptation epochs")
    p.add_argument("--lambda-dl", type=float, help="distillation weight")

    p = sub.add_parser("detect", help="score test images into heatmaps")
    _add_common(p)
    _add_recon_flags(p)
    p.add_argument("--fe", help="adapted extractor checkpoint path")
    p.add_argument("--v", type=float, help="pixel-term weight in the combination")
    p.add_argument("--sigma-g", type=float, help="Gaussian smoothing width")
    p.add_argument("--norm-scope", choices=["eval_set", "per_image"])
    p.add_argument(
        "--ablate",
        choices=sorted(_ABLATE_MODES),
        help="restrict the heatmap to one scoring term",
    )

    p = sub.add_parser("eval", help="compute metrics from a run's heatmaps")
    _add_common(p)
    p.add_argument("--fpr-limit", type=float)
    p.add_argument("--no-pro", action="store_true", help="skip the region-overlap metric")

    p = sub.add_parser("synth", help="write a synthetic dataset tree")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--pattern", choices=PATTERNS, default="stripes")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument(
        "--defects",
        default="patch",
        help=f"comma-separated subset of {','.join(DEFECT_TYPES)}",
    )
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="compare scoring variants on the test set")
    _add_common(p)
    _add_recon_flags(p)
    p.add_argument("--fe", help="adapted extractor checkpoint path")
    p.add_argument("--v", type=float)
    p.add_argument("--sigma-g", type=float)
    return parser


def _build_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "input", None):
        cfg.data_root = args.input
    if getattr(args, "category", None):
        cfg.category = args.category
    if getattr(args, "resolution", None) is not None:
        cfg.resolution = args.resolution
        cfg.arch = replace(cfg.arch, input_resolution=args.resolution)
        if cfg.synth is not None:
            cfg.synth = replace(cfg.synth, resolution=args.resolution)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train = replace(cfg.train, seed=args.seed)
        cfg.adapt = replace(cfg.adapt, seed=args.seed)
        cfg.recon = replace(cfg.recon, seed=args.seed)
    if getattr(args, "ckpt", None):
        cfg.denoiser_ckpt = args.ckpt
    # reconstruction overrides
    recon_updates = {}
    for flag, name in (("w", "w"), ("steps", "n_steps"), ("tprime", "t_start")):
        val = getattr(args, flag, None)
        if val is not None:
            recon_updates[name] = val
    if recon_updates:
        cfg.recon = replace(cfg.recon, **recon_updates)
    # scoring overrides
    score_updates = {}
    if getattr(args, "v", None) is not None:
        score_updates["v"] = args.v
    if getattr(args, "sigma_g", None) is not None:
        score_updates["sigma_g"] = args.sigma_g
    if getattr(args, "norm_scope", None):
        score_updates["norm_scope"] = args.norm_scope
    if getattr(args, "ablate", None):
        score_updates["mode"] = _ABLATE_MODES[args.ablate]
    if score_updates:
        cfg.score = replace(cfg.score, **score_updates)
    if getattr(args, "fpr_limit", None) is not None:
        cfg.metrics = replace(cfg.metrics, fpr_limit=args.fpr_limit)
    if getattr(args, "no_pro", False):
        cfg.metrics = replace(cfg.metrics, compute_pro=False)
    return cfg


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    if args.epochs is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    if args.batch_size is not None:
        cfg.train = replace(cfg.train, batch_size=args.batch_size)
    if args.lr is not None:
        cfg.train = replace(cfg.train, learning_rate=args.lr)
    _, run = run_pipeline(cfg, ["train"], out_root=args.out, run_dir=args.run, log=print)
    print(f"run: {run}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _build_config(args)
    if args.fe:
        cfg.backbone = args.fe
    if args.epochs is not None:
        cfg.adapt = replace(cfg.adapt, epochs=args.epochs)
    if args.lambda_dl is not None:
        cfg.adapt = replace(cfg.adapt, lambda_dl=args.lambda_dl)
    _, run = run_pipeline(cfg, ["finetune"], out_root=args.out, run_dir=args.run, log=print)
    print(f"run: {run}")
    return 0


def _cmd_detect(args) -> int:
    cfg = _build_config(args)
    if args.fe:
        cfg.extractor_ckpt = args.fe
    _, run = run_pipeline(cfg, ["detect"], out_root=args.out, run_dir=args.run, log=print)
    print(f"heatmaps: {run / 'heatmaps'}")
    print(f"run: {run}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _build_config(args)
    report, run = run_pipeline(cfg, ["eval"], out_root=args.out, run_dir=args.run, log=print)
    print(f"report: {run / 'report.json'}")
    if report is not None and report.has_nan():
        print("error: metrics contain non-finite values", file=sys.stderr)
        return 2
    return 0


def _cmd_synth(args) -> int:
    defects = tuple(d for d in args.defects.split(",") if d)
    spec = SynthSpec(
        n_train=args.n_train,
        n_test=args.n_test,
        pattern=args.pattern,
        defect_types=defects,
        resolution=args.resolution,
    )
    ds = synth_dataset(spec, seed=args.seed)
    cat = write_mvtec_layout(ds, args.out)
    print(f"dataset: {cat} ({len(ds.items)} images)")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _build_config(args)
    if args.fe:
        cfg.extractor_ckpt = args.fe
    result = ablate(cfg, out_root=args.out, run_dir=args.run, log=print)
    print(f"config: {result['config_hash']}")
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "detect": _cmd_detect,
    "eval": _cmd_eval,
    "synth": _cmd_synth,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

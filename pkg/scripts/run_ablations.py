#!/usr/bin/env python3
"""Compare scoring variants on the synthetic benchmark.

Reuses the checkpoints of an existing benchmark run (or trains one from
scratch when no run directory is given), then scores the test split
five ways — pixel distance with and without conditioning, feature
distance with the adapted and the unadapted extractor, and the combined
map — and prints the comparison table.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ddad.pipeline import ablate, benchmark_config, format_ablation, run_pipeline


def parse_args(argv=None) -> argparse.Namespace:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs", help="root for run directories")
    ap.add_argument(
        "--run",
        help="existing run directory with denoiser/extractor checkpoints; "
        "omit to train a fresh one first",
    )
    ap.add_argument("--quiet", action="store_true", help="suppress stage progress")
    return ap.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    log = (lambda msg: None) if args.quiet else print

    cfg = benchmark_config(args.seed)
    if args.run is None:
        print("no --run given; training the benchmark first")
        _, run_dir = run_pipeline(
            cfg, stages=("train", "finetune"), out_root=args.out, log=log
        )
    else:
        run_dir = Path(args.run)

    cfg.denoiser_ckpt = str(run_dir / "checkpoints" / "denoiser.pt")
    cfg.extractor_ckpt = str(run_dir / "checkpoints" / "extractor.pt")
    result = ablate(cfg, out_root=args.out, run_dir=run_dir, log=log)
    print(format_ablation(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())

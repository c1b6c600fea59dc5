#!/usr/bin/env python3
"""Mode ablation (full / no_steering / plain) and steering-interval sweep on synthetic data.

Defaults reproduce the configuration pinned in tests/test_acceptance.py.

Usage:
    python scripts/run_ablation.py --out results/ablation
    python scripts/run_ablation.py --out results/intervals --modes "" --intervals 1-1,1-2,1-4
    python scripts/run_ablation.py --out results/long --T 512 --synth-length 20000
"""

from __future__ import annotations

import argparse
import logging
import time
from pathlib import Path

from msef.checkpoint import atomic_write
from msef.config import RunConfig, parse_interval
from msef.evaluation import build_grid, run_ablation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--modes", default="full,no_steering,plain")
    ap.add_argument("--intervals", default="")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--T", type=int, default=128)
    ap.add_argument("--H", type=int, default=96)
    ap.add_argument("--synth-length", type=int, default=4000)
    ap.add_argument("--eval-stride", type=int, default=8)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

    rc = RunConfig().update({
        "synth_kind": "sinmix", "synth_length": args.synth_length, "synth_channels": 2, "synth_seed": 7,
        "few_shot_ratio": 0.10, "T": args.T, "H": args.H, "horizons": str(args.H),
        "eval_stride": args.eval_stride, "workers": args.workers,
    }).validate()
    modes = [m for m in args.modes.split(",") if m]
    intervals = [parse_interval(t) for t in args.intervals.split(",") if t]
    seeds = [int(s) for s in args.seeds.split(",")]

    t0 = time.time()
    report = run_ablation(rc, build_grid(modes, intervals, [args.H], seeds), workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.txt", rc.to_text())
    atomic_write(out / "ablation.json", report.to_json() + "\n")
    atomic_write(out / "ablation.txt", report.to_text())
    atomic_write(out / "ablation.csv", report.to_csv())
    print(report.to_text())
    for cell in report.meta["cells"]:
        print(f"  {cell['label']:<12} seed {cell['seed']}  trainable {cell.get('trainable_scalars', '-')}"
              f"  epochs {cell.get('epochs_run', '-')}  {cell.get('seconds', '-')}s")
    print(f"{len(report.rows) - len(report.failed())}/{len(report.rows)} cells ok in {time.time() - t0:.0f}s -> {out}")


if __name__ == "__main__":
    main()

"""Command-line entry point: ``msef {synth,pretrain,train,eval,ablate}``.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path


from . import numerics as nx
from .checkpoint import CheckpointError, atomic_write
from .config import ConfigError, RunConfig, parse_interval
from .data import DataError, synth, write_csv, write_sidecar

log = logging.getLogger("msef")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config resolution


def _add_run_flags(p: argparse.ArgumentParser, skip=()) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    for f in fields(RunConfig):
        if f.name in skip:
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"rc_{f.name}", default=None, metavar=f.name.upper())


def resolve_config(args) -> RunConfig:
    rc = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    if "MSEF_PRECISION" in os.environ:
        rc.precision = os.environ["MSEF_PRECISION"]
    overrides = {k[3:]: v for k, v in vars(args).items() if k.startswith("rc_") and v is not None}
    rc.update(overrides)
    rc.validate()
    nx.set_precision(rc.precision)
    return rc


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if args.length <= 0 or args.channels <= 0:
        raise UsageError("--length and --channels must be positive")
    params = json.loads(args.params) if args.params else None
    series = synth(args.kind, params, args.length, args.channels, args.seed)
    out = Path(args.out)
    csv_path = out / f"{args.kind}.csv"
    write_csv(series, csv_path)
    write_sidecar(series, out / f"{args.kind}.json")
    print(f"{csv_path} sha256={_sha256(csv_path)}")
    return 0


def cmd_pretrain(args) -> int:
    from .data import make_splits, make_windows
    from .tsfm import pretrain_masked

    rc = resolve_config(args)
    series = rc.load_series()
    split = make_splits(series, rc.scheme, rc.few_shot_ratio)
    windows = make_windows(series, split.train, rc.T, 0, stride=args.window_stride)
    corpus = [w.x[c] for w in windows for c in range(series.n_channels)]
    weights = pretrain_masked(corpus, rc.tsfm_config(), args.mask_ratio, args.epochs, rc.seed)
    out = Path(args.out)
    weights.save(out)
    print(f"{out} sha256={_sha256(out)}")
    return 0


def _model_dir_files(run_dir: Path, H: int) -> tuple[str, Path]:
    name = f"fusion_H{H}.msef"
    return name, run_dir / f"history_H{H}.json"


def cmd_train(args) -> int:
    from .evaluation import evaluate, load_frozen, prepare_data
    from .fusion import MSEFModel, build_model
    from .training import train

    rc = resolve_config(args)
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.txt", rc.to_text())
    backbone, tsfm = load_frozen(rc)
    series, split, tr, va, te = prepare_data(rc, rc.H)
    model = build_model(rc.fusion_config(dataset=series.name), backbone, tsfm, seed=rc.seed)
    model, hist = train(model, tr, va, rc.train_config())
    fusion_name, hist_path = _model_dir_files(out, rc.H)
    model.save(out, fusion_name)
    # metrics come from the checkpoint as stored, so eval reproduces them exactly
    reloaded = MSEFModel.load(out, fusion_name)
    row = evaluate(reloaded, te, dataset=series.name, seed=rc.seed)
    hist.extra = {
        "test": {"mse": row.mse, "mae": row.mae, "n_windows": row.n_windows},
        "split": {"train": split.train, "val": split.val, "test": split.test, "few_shot": split.few_shot},
        "few_shot_ratio": rc.few_shot_ratio,
        "n_train_windows": len(tr),
    }
    atomic_write(hist_path, hist.to_json() + "\n")
    print(f"trained {rc.mode} H={rc.H}: best epoch {hist.best_epoch}, test mse {row.mse:.6f} mae {row.mae:.6f}")
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import AblationReport, average_over_horizons, evaluate, format_table, prepare_data
    from .fusion import MSEFModel

    run_dir = Path(args.run_dir)
    cfg_path = run_dir / "config.txt"
    if not cfg_path.exists():
        raise UsageError(f"{run_dir} has no config.txt; not a training run directory")
    rc = RunConfig.from_file(cfg_path)
    if args.precision:
        rc.precision = args.precision
    nx.set_precision(rc.validate().precision)
    horizons = [int(h) for h in args.horizons.split(",")] if args.horizons else [rc.H]
    for H in horizons:
        if not (run_dir / _model_dir_files(run_dir, H)[0]).exists():
            raise UsageError(f"missing checkpoint {run_dir / _model_dir_files(run_dir, H)[0]}")
    rows = []
    for H in horizons:
        model = MSEFModel.load(run_dir, _model_dir_files(run_dir, H)[0])
        series, _, _, _, te = prepare_data(rc, H)
        rows.append(evaluate(model, te, dataset=series.name, seed=rc.seed))
    summary = list(rows)
    if args.avg:
        summary.append(average_over_horizons(rows, horizons))
    report = AblationReport(rows, summary if args.avg else [], {"run_dir": str(run_dir)})
    atomic_write(Path(args.json) if args.json else run_dir / "eval.json", report.to_json() + "\n")
    sys.stdout.write(format_table(summary))
    for r in summary:
        print(json.dumps({"horizon": r.horizon, "mode": r.mode, "mse": r.mse, "mae": r.mae}))
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import build_grid, run_ablation

    rc = resolve_config(args)
    if not args.out:
        raise UsageError("--out is required")
    modes = [m for m in args.modes.split(",") if m] if args.modes else []
    for m in modes:
        if m not in ("full", "no_steering", "plain"):
            raise UsageError(f"unknown mode {m!r}")
    try:
        intervals = [parse_interval(t) for t in args.intervals.split(",") if t] if args.intervals else []
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    for x, y in intervals:
        if y > rc.n_layers:
            raise UsageError(f"interval {x}-{y} exceeds {rc.n_layers} layers")
    seeds = _parse_seeds(args.seeds)
    cells = build_grid(modes, intervals, rc.horizon_list(), seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.txt", rc.to_text())
    report = run_ablation(rc, cells, workers=rc.workers)
    atomic_write(out / "ablation.json", report.to_json() + "\n")
    atomic_write(out / "ablation.txt", report.to_text())
    atomic_write(out / "ablation.csv", report.to_csv())
    sys.stdout.write(report.to_text())
    for r in report.failed():
        print(f"FAILED {r.mode} H={r.horizon} seed={r.seed}: {r.error}", file=sys.stderr)
    ok = len(report.rows) - len(report.failed())
    print(f"{ok}/{len(report.rows)} cells succeeded; wrote {out}")
    return 0 if ok else 1


def _parse_seeds(token: str) -> list[int]:
    try:
        if "," in token:
            return [int(s) for s in token.split(",") if s]
        n = int(token)
    except ValueError:
        raise UsageError(f"bad --seeds {token!r}") from None
    if n < 1:
        raise UsageError("--seeds must be >= 1")
    return list(range(n))


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msef", description="Multi-layer steerable embedding fusion forecaster")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic series (CSV + JSON sidecar)")
    p.add_argument("--kind", default="sinmix", choices=["sinmix", "arma", "piecewise_level"])
    p.add_argument("--length", type=int, default=4000)
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", default="", help="JSON object of generator parameters")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="masked-patch pretraining of the series encoder")
    _add_run_flags(p)
    p.add_argument("--mask-ratio", type=float, default=0.3)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--window-stride", type=int, default=64)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="few-shot training for one mode and horizon")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test-set metrics for a training run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--horizons", default="")
    p.add_argument("--avg", action="store_true", help="append the mean over horizons")
    p.add_argument("--json", default="", help="report path (default RUN_DIR/eval.json)")
    p.add_argument("--precision", choices=["f32", "f64"], default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="mode / steering-interval ablation sweep")
    _add_run_flags(p)
    p.add_argument("--modes", default="full,no_steering,plain")
    p.add_argument("--intervals", default="")
    p.add_argument("--seeds", default="3", help="count (N -> 0..N-1) or comma list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"msef {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"msef {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"msef {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Metrics, horizon averaging and the ablation harness."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import DEFAULT_HORIZONS, RunConfig
from .data import make_splits, make_windows

log = logging.getLogger(__name__)


def _arrays(pred, target) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred.data if hasattr(pred, "data") else pred, dtype=np.float64)
    b = np.asarray(target.data if hasattr(target, "data") else target, dtype=np.float64)
    if a.shape != b.shape:
        raise nx.ShapeError(f"metric shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mae(pred, target) -> float:
    a, b = _arrays(pred, target)
    return float(np.abs(a - b).mean())


def mse(pred, target) -> float:
    a, b = _arrays(pred, target)
    return float(((a - b) ** 2).mean())


@dataclass
class MetricRow:
    dataset: str
    mode: str
    horizon: int | str
    mse: float
    mae: float
    n_windows: int
    seed: int | str
    status: str = "ok"
    error: str = ""


def evaluate(model, windows: Sequence, batch: int = 16, dataset: str = "", seed: int | str = 0) -> MetricRow:
    """Average MSE/MAE over all windows and channels of de-normalised forecasts.

    ``model`` needs ``forecast(x_rows, channels) -> [rows, H]``; ``batch``
    counts windows per call.
    """
    if not windows:
        raise ValueError("cannot evaluate an empty window set")
    se = ae = 0.0
    count = 0
    for s in range(0, len(windows), batch):
        chunk = windows[s : s + batch]
        N = chunk[0].x.shape[0]
        X = np.concatenate([w.x for w in chunk], axis=0)
        Y = np.concatenate([w.y for w in chunk], axis=0)
        channels = np.tile(np.arange(N), len(chunk))
        P = np.asarray(model.forecast(X, channels), dtype=np.float64)
        diff = P - Y
        se += float((diff**2).sum())
        ae += float(np.abs(diff).sum())
        count += diff.size
    cfg = getattr(model, "cfg", None)
    return MetricRow(
        dataset=dataset,
        mode=getattr(cfg, "mode", "model"),
        horizon=windows[0].y.shape[1],
        mse=se / count,
        mae=ae / count,
        n_windows=len(windows),
        seed=seed,
    )


def average_over_horizons(rows: Sequence[MetricRow], horizons: Sequence[int] = DEFAULT_HORIZONS) -> MetricRow:
    by_h = {r.horizon: r for r in rows}
    missing = [h for h in horizons if h not in by_h]
    if missing:
        raise ValueError(f"missing horizon rows: {missing}")
    picked = [by_h[h] for h in horizons]
    keys = {(r.dataset, r.mode, r.seed) for r in picked}
    if len(keys) != 1:
        raise ValueError(f"rows mix datasets/modes/seeds: {sorted(map(str, keys))}")
    first = picked[0]
    return MetricRow(
        dataset=first.dataset,
        mode=first.mode,
        horizon="avg",
        mse=sum(r.mse for r in picked) / len(picked),
        mae=sum(r.mae for r in picked) / len(picked),
        n_windows=sum(r.n_windows for r in picked),
        seed=first.seed,
    )


# ---------------------------------------------------------------- ablation


@dataclass(frozen=True)
class Cell:
    label: str  # mode name, or "[x-y]" for an interval variant of full mode
    mode: str
    interval: tuple[int, int] | None
    H: int
    seed: int


def build_grid(modes: Sequence[str], intervals: Sequence[tuple[int, int]], horizons: Sequence[int], seeds: Sequence[int]) -> list[Cell]:
    variants = [(m, m, None) for m in modes] + [(f"[{x}-{y}]", "full", (x, y)) for x, y in intervals]
    if not variants:
        raise ValueError("ablation grid is empty")
    return [Cell(label, mode, iv, H, s) for label, mode, iv in variants for H in horizons for s in seeds]


@dataclass
class AblationReport:
    rows: list[MetricRow] = field(default_factory=list)
    summary: list[MetricRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"rows": [asdict(r) for r in self.rows], "summary": [asdict(r) for r in self.summary], "meta": self.meta},
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "AblationReport":
        d = json.loads(text)
        return cls([MetricRow(**r) for r in d["rows"]], [MetricRow(**r) for r in d.get("summary", [])], d.get("meta", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(MetricRow.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", *names])
        for kind, rows in (("cell", self.rows), ("summary", self.summary)):
            for r in rows:
                w.writerow([kind, *(getattr(r, n) for n in names)])
        return buf.getvalue()

    def to_text(self) -> str:
        return format_table(self.summary)

    def failed(self) -> list[MetricRow]:
        return [r for r in self.rows if r.status != "ok"]


def summarize(rows: Sequence[MetricRow], horizons_for_avg: Sequence[int] = DEFAULT_HORIZONS) -> list[MetricRow]:
    """Mean over seeds per (dataset, label, horizon), plus an ``avg`` row when all four horizons exist."""
    groups: dict[tuple, list[MetricRow]] = {}
    for r in rows:
        if r.status == "ok":
            groups.setdefault((r.dataset, r.mode, r.horizon), []).append(r)
    out: list[MetricRow] = []
    for (ds, label, H), rs in groups.items():
        out.append(
            MetricRow(ds, label, H, float(np.mean([r.mse for r in rs])), float(np.mean([r.mae for r in rs])),
                      rs[0].n_windows, "mean")
        )
    by_label: dict[tuple, list[MetricRow]] = {}
    for r in out:
        by_label.setdefault((r.dataset, r.mode), []).append(r)
    for rs in list(by_label.values()):
        if all(h in {r.horizon for r in rs} for h in horizons_for_avg):
            out.append(average_over_horizons(rs, horizons_for_avg))
    return out


def format_table(summary: Sequence[MetricRow]) -> str:
    """Plain-text table: one row per (dataset, horizon), one MSE/MAE column pair per variant."""
    labels: list[str] = []
    for r in summary:
        if r.mode not in labels:
            labels.append(r.mode)
    cell = {(r.dataset, r.horizon, r.mode): r for r in summary}
    keys: list[tuple] = []
    for r in summary:
        if (r.dataset, r.horizon) not in keys:
            keys.append((r.dataset, r.horizon))
    keys.sort(key=lambda k: (k[0], math.inf if k[1] == "avg" else int(k[1])))
    width = 17
    lines = [
        f"{'Dataset':<10}{'H':<6}" + "".join(f"| {lab:<{width}}" for lab in labels),
        f"{'':<10}{'':<6}" + "".join(f"| {'MSE':<8} {'MAE':<8}" for _ in labels),
    ]
    lines.append("-" * len(lines[0]))
    for ds, H in keys:
        parts = []
        for lab in labels:
            r = cell.get((ds, H, lab))
            parts.append(f"| {r.mse:<8.4f} {r.mae:<8.4f}" if r else f"| {'-':<8} {'-':<8}")
        lines.append(f"{ds:<10}{str(H):<6}" + "".join(parts))
    return "\n".join(line.rstrip() for line in lines) + "\n"


def prepare_data(rc: RunConfig, H: int):
    """Series, split and the (few-shot train, val, test) window sets for horizon ``H``."""
    series = rc.load_series()
    split = make_splits(series, rc.scheme, rc.few_shot_ratio)
    train = make_windows(series, split.few_shot, rc.T, H, stride=rc.train_stride)
    val = make_windows(series, split.val, rc.T, H, stride=rc.eval_stride, lookback=True)
    test = make_windows(series, split.test, rc.T, H, stride=rc.eval_stride, lookback=True)
    return series, split, train, val, test


def load_frozen(rc: RunConfig):
    from .backbone import init_backbone
    from .tsfm import TsfmWeights, init_tsfm

    backbone = init_backbone(rc.backbone_config())
    tsfm = TsfmWeights.load(rc.tsfm_ckpt) if rc.tsfm_ckpt else init_tsfm(rc.tsfm_config())
    return backbone, tsfm


def run_cell(rc: RunConfig, cell: Cell, frozen=None) -> tuple[MetricRow, dict]:
    """Fresh seeded init, few-shot training, test evaluation for one grid cell."""
    from .fusion import build_model
    from .training import train

    nx.set_precision(rc.precision)
    series, _, tr, va, te = prepare_data(rc, cell.H)
    backbone, tsfm = frozen or load_frozen(rc)
    fcfg = rc.fusion_config(mode=cell.mode, interval=cell.interval, H=cell.H, dataset=series.name)
    model = build_model(fcfg, backbone, tsfm, seed=cell.seed)
    t0 = time.time()
    model, hist = train(model, tr, va, rc.train_config(H=cell.H, seed=cell.seed))
    row = evaluate(model, te, dataset=series.name, seed=cell.seed)
    row.mode = cell.label
    info = {
        "label": cell.label, "H": cell.H, "seed": cell.seed,
        "trainable_scalars": sum(t.data.size for t in model.trainable_parameters().values()),
        "best_epoch": hist.best_epoch, "epochs_run": len(hist.epochs), "seconds": round(time.time() - t0, 2),
    }
    return row, info


def _safe_cell(args) -> tuple[MetricRow, dict]:
    rc, cell, frozen = args
    try:
        return run_cell(rc, cell, frozen)
    except Exception as exc:  # a failing cell must not abort the sweep
        log.warning("cell %s failed: %s", cell, exc)
        row = MetricRow(Path(rc.data).stem if rc.data else rc.synth_kind, cell.label, cell.H, math.nan, math.nan, 0, cell.seed,
                        status="failed", error=f"{type(exc).__name__}: {exc}")
        return row, {"label": cell.label, "H": cell.H, "seed": cell.seed, "traceback": traceback.format_exc()}


def run_ablation(rc: RunConfig, cells: Sequence[Cell], workers: int = 1) -> AblationReport:
    if not cells:
        raise ValueError("ablation grid is empty")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_cell, [(rc, c, None) for c in cells]))
    else:
        nx.set_precision(rc.precision)
        frozen = load_frozen(rc)
        results = [_safe_cell((rc, c, frozen)) for c in cells]
    rows = [r for r, _ in results]
    horizons = sorted({c.H for c in cells})
    report = AblationReport(rows, summarize(rows), {"cells": [i for _, i in results], "horizons": horizons})
    return report

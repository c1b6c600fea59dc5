"""Series loading, canonical splits, few-shot truncation and sliding windows."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMES = ("ratio", "ett_hourly", "ett_minute")
_HOURS_PER_MONTH = 30 * 24


class DataError(ValueError):
    pass


@dataclass
class RawSeries:
    name: str
    values: np.ndarray  # [N, T_total]
    channel_names: list[str]
    timestamps: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError("values must be [channels, time]")
        if len(self.channel_names) != self.values.shape[0]:
            raise DataError("one name per channel required")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]
    few_shot: tuple[int, int]
    few_shot_ratio: float


@dataclass
class ForecastWindow:
    x: np.ndarray  # [N, T]
    y: np.ndarray  # [N, H]
    start: int


# ---------------------------------------------------------------- CSV


def load_csv(path) -> RawSeries:
    """Read a benchmark-style CSV: optional leading ``date`` column, numeric channels."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    has_date = header[0].lower() in ("date", "time", "timestamp", "datetime")
    cols = header[1:] if has_date else header
    if not cols:
        raise DataError(f"{path}: no numeric columns")
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    values = np.empty((len(cols), len(body)))
    stamps = [] if has_date else None
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")
        cells = row[1:] if has_date else row
        if has_date:
            stamps.append(row[0])
        for j, cell in enumerate(cells):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {i}, column {cols[j]!r}: non-numeric cell {cell!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {i}, column {cols[j]!r}: non-finite cell {cell!r}")
            values[j, i - 2] = v
    return RawSeries(path.stem, values, cols, stamps)


def write_csv(series: RawSeries, path) -> str:
    """Serialise ``series`` as CSV text, writing it to ``path``; returns the text."""
    from .checkpoint import atomic_write

    lines = [",".join(["date", *series.channel_names])]
    for t in range(series.length):
        stamp = series.timestamps[t] if series.timestamps else str(t)
        lines.append(",".join([stamp, *(repr(float(v)) for v in series.values[:, t])]))
    text = "\n".join(lines) + "\n"
    atomic_write(path, text)
    return text


# ---------------------------------------------------------------- splits and windows


def make_splits(series: RawSeries | int, scheme: str = "ratio", few_shot_ratio: float = 0.10) -> SplitSpec:
    n = series if isinstance(series, int) else series.length
    if scheme not in SCHEMES:
        raise DataError(f"unknown split scheme {scheme!r}; expected one of {SCHEMES}")
    if not 0.0 < few_shot_ratio <= 1.0:
        raise DataError("few_shot_ratio must lie in (0, 1]")
    if scheme == "ratio":
        a = int(n * 0.7)
        b = int(n * 0.8)
        bounds = (0, a, b, n)
    else:
        unit = _HOURS_PER_MONTH * (4 if scheme == "ett_minute" else 1)
        a, b, c = 12 * unit, 16 * unit, 20 * unit
        if n < c:
            raise DataError(f"{scheme} split needs {c} steps, series has {n}")
        bounds = (0, a, b, c)
    train = (bounds[0], bounds[1])
    few = (0, int(math.floor(few_shot_ratio * (train[1] - train[0]))))
    return SplitSpec(train, (bounds[1], bounds[2]), (bounds[2], bounds[3]), few, few_shot_ratio)


def make_windows(
    series: RawSeries | np.ndarray,
    split_range: tuple[int, int],
    T: int,
    H: int,
    stride: int = 1,
    lookback: bool = False,
) -> list[ForecastWindow]:
    """Sliding windows whose targets lie inside ``split_range``.

    Without ``lookback`` the history must also lie inside the range. With it,
    the history may reach back before the range start (validation/test
    protocol), but never before index 0.
    """
    values = series.values if isinstance(series, RawSeries) else np.asarray(series, dtype=np.float64)
    a, b = split_range
    if stride < 1:
        raise DataError("stride must be >= 1")
    first = max(0, a - T) if lookback else a
    last = b - T - H  # last admissible start
    if last < first:
        need = H if lookback else T + H
        raise DataError(f"range [{a},{b}) of length {b - a} cannot host one window (needs at least {need} steps)")
    return [
        ForecastWindow(values[:, s : s + T], values[:, s + T : s + T + H], s)
        for s in range(first, last + 1, stride)
    ]


# ---------------------------------------------------------------- synthetic data

_FORMULAS = {
    "sinmix": "x_c[t] = sum_k A_k sin(2 pi t / P_k + phi_{c,k}) + slope * t + sigma * e_t,  phi ~ U[0, 2pi) seeded",
    "arma": "x[0] = x0 + e_0; x[t] = sum_i phi_i x[t-i] + e_t + sum_j theta_j e[t-j],  e ~ N(0, sigma^2), x[<0] = x0",
    "piecewise_level": "x[t] = level_k for t in segment k; segment lengths ~ Geom(1/mean_len), levels ~ N(0, scale^2), plus sigma * e_t",
}

_DEFAULTS = {
    "sinmix": {"periods": [24, 64], "amplitudes": [1.0, 0.5], "slope": 0.0005, "noise": 0.1},
    "arma": {"phi": [0.9], "theta": [], "sigma": 1.0, "x0": 0.0, "burn_in": 100},
    "piecewise_level": {"mean_len": 200, "scale": 1.0, "noise": 0.1},
}


def synth(kind: str, params: dict | None = None, length: int = 4000, channels: int = 1, seed: int = 0) -> RawSeries:
    if kind not in _DEFAULTS:
        raise DataError(f"unknown generator {kind!r}; expected one of {sorted(_DEFAULTS)}")
    if length <= 0 or channels <= 0:
        raise DataError("length and channels must be positive")
    p = {**_DEFAULTS[kind], **(params or {})}
    unknown = set(p) - set(_DEFAULTS[kind])
    if unknown:
        raise DataError(f"unknown {kind} parameters: {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    out = np.empty((channels, length))

    if kind == "sinmix":
        periods, amps = list(p["periods"]), list(p["amplitudes"])
        if len(periods) != len(amps) or any(q <= 0 for q in periods):
            raise DataError("sinmix needs matching positive periods and amplitudes")
        for c in range(channels):
            phases = rng.uniform(0.0, 2 * np.pi, size=len(periods))
            x = sum(a * np.sin(2 * np.pi * (t % q) / q + ph) for a, q, ph in zip(amps, periods, phases))
            x = x + p["slope"] * t
            if p["noise"]:
                x = x + p["noise"] * rng.standard_normal(length)
            out[c] = x
    elif kind == "arma":
        phi, theta = list(p["phi"]), list(p["theta"])
        burn = int(p["burn_in"])
        if burn < 0 or p["sigma"] < 0:
            raise DataError("arma needs burn_in >= 0 and sigma >= 0")
        total = length + burn
        for c in range(channels):
            e = p["sigma"] * rng.standard_normal(total) if p["sigma"] else np.zeros(total)
            x = np.empty(total)
            x[0] = p["x0"] + e[0]
            for k in range(1, total):
                ar = sum(phi[i] * (x[k - 1 - i] if k - 1 - i >= 0 else p["x0"]) for i in range(len(phi)))
                ma = sum(theta[j] * e[k - 1 - j] for j in range(len(theta)) if k - 1 - j >= 0)
                x[k] = ar + e[k] + ma
            out[c] = x[burn:]
    else:
        if p["mean_len"] <= 0:
            raise DataError("piecewise_level needs mean_len > 0")
        for c in range(channels):
            x = np.empty(length)
            pos = 0
            while pos < length:
                seg = int(rng.geometric(1.0 / p["mean_len"]))
                x[pos : pos + seg] = rng.normal(0.0, p["scale"])
                pos += seg
            if p["noise"]:
                x = x + p["noise"] * rng.standard_normal(length)
            out[c] = x

    meta = {"kind": kind, "params": p, "length": length, "channels": channels, "seed": seed, "formula": _FORMULAS[kind]}
    return RawSeries(kind, out, [f"ch{c}" for c in range(channels)], None, meta)


def write_sidecar(series: RawSeries, path) -> None:
    from .checkpoint import atomic_write

    atomic_write(path, json.dumps(series.meta, indent=2, sort_keys=True) + "\n")

"""Flat run configuration: newline-delimited ``key=value`` files plus flag overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .backbone import BackboneConfig
from .data import RawSeries, load_csv, synth
from .fusion import FusionConfig
from .training import TrainConfig
from .tsfm import TsfmConfig

DEFAULT_HORIZONS = (96, 192, 336, 720)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data: str | None = None
    synth_kind: str = "sinmix"
    synth_length: int = 4000
    synth_channels: int = 2
    synth_seed: int = 7
    synth_params: str = ""  # JSON object; empty -> generator defaults
    scheme: str = "ratio"
    few_shot_ratio: float = 0.10
    T: int = 512
    H: int = 96
    horizons: str = "96,192,336,720"
    train_stride: int = 1
    eval_stride: int = 1
    # fusion
    mode: str = "full"
    interval: str = ""  # "x-y"; empty -> every layer
    m: int = 4
    train_proj: bool = False
    # backbone
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 2048
    max_prefix: int = 128
    backbone_seed: int = 0
    # encoder
    patch_len: int = 8
    d_ts: int = 32
    n_enc_layers: int = 2
    ts_heads: int = 4
    ts_d_ff: int = 128
    max_patches: int = 64
    tsfm_seed: int = 0
    tsfm_ckpt: str = ""
    # training
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 3
    seed: int = 0
    # run
    precision: str = "f32"
    workers: int = 1

    # -- parsing

    @classmethod
    def field_types(cls) -> dict[str, type]:
        hints = {"str | None": str, "str": str, "int": int, "float": float, "bool": bool}
        return {f.name: hints[f.type if isinstance(f.type, str) else f.type.__name__] for f in fields(cls)}

    def update(self, values: dict) -> "RunConfig":
        types = self.field_types()
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(self, key, _coerce(key, raw, types[key]))
        return self

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls().update(parse_kv(Path(path).read_text()))

    def to_text(self) -> str:
        out = []
        for k, v in asdict(self).items():
            out.append(f"{k}={'' if v is None else v}")
        return "\n".join(out) + "\n"

    # -- derived objects

    def horizon_list(self) -> list[int]:
        try:
            hs = [int(h) for h in self.horizons.split(",") if h.strip()]
        except ValueError:
            raise ConfigError(f"bad horizons {self.horizons!r}") from None
        if not hs or any(h <= 0 for h in hs):
            raise ConfigError("horizons must be positive integers")
        return hs

    def interval_tuple(self) -> tuple[int, int] | None:
        return parse_interval(self.interval) if self.interval else None

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff,
            max_seq=self.max_seq, max_prefix=self.max_prefix, init_seed=self.backbone_seed,
        )

    def tsfm_config(self) -> TsfmConfig:
        return TsfmConfig(
            patch_len=self.patch_len, d_ts=self.d_ts, n_enc_layers=self.n_enc_layers, n_heads=self.ts_heads,
            d_ff=self.ts_d_ff, max_patches=self.max_patches, init_seed=self.tsfm_seed,
        )

    def fusion_config(self, mode: str | None = None, interval=None, H: int | None = None, dataset: str = "synthetic") -> FusionConfig:
        return FusionConfig(
            mode=mode or self.mode,
            steering_interval=interval if interval is not None else self.interval_tuple(),
            m=self.m, H=H or self.H, T=self.T, dataset=dataset, train_proj=self.train_proj,
        )

    def train_config(self, H: int | None = None, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience,
            seed=self.seed if seed is None else seed, few_shot_ratio=self.few_shot_ratio, H=H or self.H,
        )

    def load_series(self) -> RawSeries:
        if self.data:
            return load_csv(self.data)
        params = json.loads(self.synth_params) if self.synth_params else None
        return synth(self.synth_kind, params, self.synth_length, self.synth_channels, self.synth_seed)

    def validate(self) -> "RunConfig":
        try:
            self.backbone_config()
            self.tsfm_config()
            self.fusion_config()
            self.train_config()
            self.horizon_list()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if self.workers < 1 or self.train_stride < 1 or self.eval_stride < 1:
            raise ConfigError("workers and strides must be >= 1")
        return self


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_interval(token: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in token.strip().strip("[]").split("-"))
    except ValueError:
        raise ConfigError(f"bad interval {token!r}; expected x-y") from None
    if not 1 <= x <= y:
        raise ConfigError(f"bad interval {token!r}; need 1 <= x <= y")
    return x, y


def _coerce(key: str, raw, typ: type):
    if not isinstance(raw, str):
        return raw
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off", ""):
                return False
            raise ValueError(raw)
        if typ is str:
            return raw
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None

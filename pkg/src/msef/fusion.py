"""Multi-layer steerable embedding fusion.

Per channel and window: instance-normalise, encode with the frozen series
encoder, project the patch representations into the backbone width, and at
every backbone layer prepend ``[projected patches ; steering rows]`` to the
text states. The final-layer states at the patch positions are flattened and
mapped to the horizon by a linear head, then de-normalised.

Only the steering bank and the head are trainable by default.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import checkpoint
from . import numerics as nx
from .backbone import BackboneConfig, BackboneWeights, embed_text, forward_with_injection, init_backbone, tokenize
from .numerics import Tensor
from .tsfm import TsfmConfig, TsfmWeights, encode, init_tsfm

MODES = ("full", "no_steering", "plain")
NORM_EPS = 1e-5
PLAIN_CONTEXT = 128
PROMPT_MAX_TOKENS = 64


# ---------------------------------------------------------------- instance normalisation


@dataclass(frozen=True)
class InstanceStats:
    mu: float
    sigma: float
    eps: float = NORM_EPS

    @property
    def scale(self) -> float:
        # eps only guards near-constant windows; above it the scale is sigma itself
        return max(self.sigma, self.eps)


def normalize_instance(x, eps: float = NORM_EPS) -> tuple[Tensor, InstanceStats]:
    xd = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if xd.ndim != 1 or xd.shape[0] < 2:
        raise ValueError("normalize_instance expects a 1-D window with at least 2 steps")
    mu = float(xd.mean())
    sigma = float(xd.std())
    stats = InstanceStats(mu, sigma, eps)
    return Tensor((xd - mu) / stats.scale), stats


def denormalize(y_norm, stats: InstanceStats) -> Tensor:
    yd = y_norm.data if isinstance(y_norm, Tensor) else np.asarray(y_norm, dtype=np.float64)
    return Tensor(yd * stats.scale + stats.mu)


def normalize_batch(X: np.ndarray, eps: float = NORM_EPS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise version of :func:`normalize_instance`: returns (Xn, mu, scale)."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=-1)
    scale = np.maximum(X.std(axis=-1), eps)
    return (X - mu[..., None]) / scale[..., None], mu, scale


# ---------------------------------------------------------------- configuration and parameters


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "full"
    steering_interval: tuple[int, int] | None = None  # None -> every layer
    m: int = 4
    H: int = 96
    T: int = 512
    dataset: str = "synthetic"
    text_template: str = "default"
    train_proj: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.m < 0 or self.H <= 0 or self.T < 2:
            raise ValueError("need m >= 0, H > 0, T >= 2")
        if self.steering_interval is not None:
            x, y = self.steering_interval
            if not 1 <= x <= y:
                raise ValueError(f"steering interval [{x}-{y}] requires 1 <= x <= y")
            object.__setattr__(self, "steering_interval", (int(x), int(y)))

    def interval(self, n_layers: int) -> tuple[int, int]:
        if self.steering_interval is None:
            return 1, n_layers
        x, y = self.steering_interval
        if y > n_layers:
            raise ValueError(f"steering interval [{x}-{y}] exceeds {n_layers} layers")
        return x, y

    def to_dict(self) -> dict:
        d = asdict(self)
        d["steering_interval"] = list(self.steering_interval) if self.steering_interval else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        d = dict(d)
        if d.get("steering_interval") is not None:
            d["steering_interval"] = tuple(d["steering_interval"])
        return cls(**d)


@dataclass
class SteeringBank:
    vectors: list[Tensor]  # index l-1 holds the rows injected at layer l

    @classmethod
    def init(cls, n_layers: int, m: int, d_model: int, seed: int) -> "SteeringBank":
        rng = np.random.default_rng([seed, 1])
        return cls([Tensor(rng.normal(0.0, 0.02, size=(m, d_model)), requires_grad=True) for _ in range(n_layers)])

    @property
    def m(self) -> int:
        return self.vectors[0].shape[0]

    def __getitem__(self, layer: int) -> Tensor:
        return self.vectors[layer - 1]

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass
class ModalityProjection:
    W: Tensor
    trainable: bool = False

    TAG = "PROJ"

    @classmethod
    def init(cls, d_ts: int, d_model: int, seed: int, trainable: bool = False) -> "ModalityProjection":
        rng = np.random.default_rng([seed, 2])
        return cls(Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_ts), size=(d_ts, d_model)), requires_grad=trainable), trainable)

    def to_bytes(self) -> bytes:
        return checkpoint.dumps(self.TAG, {"trainable": self.trainable}, {"proj.w": self.W.data})


@dataclass
class ForecastHead:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, in_features: int, H: int, seed: int) -> "ForecastHead":
        rng = np.random.default_rng([seed, 3])
        return cls(
            Tensor(rng.normal(0.0, 0.02, size=(in_features, H)), requires_grad=True),
            Tensor(np.zeros(H), requires_grad=True),
        )

    def __call__(self, feats: Tensor) -> Tensor:
        return feats @ self.W + self.b


# ---------------------------------------------------------------- prefix assembly


def assemble_prefix(l: int, ts_rows: Tensor | None, bank: SteeringBank | None, cfg: FusionConfig, n_layers: int) -> Tensor:
    """Prefix block for layer ``l`` (1-based).

    ``ts_rows`` are the already-projected patch representations, [p, d] or
    [B, p, d]. Layout is ``[patches ; steering]``; steering rows are added only
    inside the configured interval and only in ``full`` mode.
    """
    if not 1 <= l <= n_layers:
        raise ValueError(f"layer {l} outside 1..{n_layers}")
    if cfg.mode == "plain":
        d = ts_rows.shape[-1] if ts_rows is not None else bank.vectors[0].shape[1]
        lead = ts_rows.shape[:-2] if ts_rows is not None else ()
        return Tensor(np.zeros((*lead, 0, d)))
    x, y = cfg.interval(n_layers)
    if cfg.mode == "no_steering" or not x <= l <= y or bank.m == 0:
        return ts_rows
    steer = bank[l]
    if ts_rows.ndim == 3:
        steer = nx.broadcast_to(steer, (ts_rows.shape[0], *steer.shape))
    return nx.concat([ts_rows, steer], axis=-2)


def project(E, proj: ModalityProjection) -> Tensor:
    E = E.E if hasattr(E, "E") else E
    if E.shape[-1] != proj.W.shape[0]:
        raise nx.ShapeError(f"representation width {E.shape[-1]} != projection input {proj.W.shape[0]}")
    return E @ proj.W


# ---------------------------------------------------------------- text side


def prompt_text(cfg: FusionConfig, channel: int) -> str:
    return f"dataset:{cfg.dataset}|task:forecast|T:{cfg.T}|H:{cfg.H}|ch:{channel}"


def prompt_ids(cfg: FusionConfig, channel: int) -> list[int]:
    return tokenize(prompt_text(cfg, channel))[:PROMPT_MAX_TOKENS]


def serialize_values(values, decimals: int = 2) -> str:
    """``[1.0, 2.5] -> "1.00,2.50"``; each character becomes one token."""
    out = []
    for v in np.asarray(values, dtype=np.float64):
        s = f"{v:.{decimals}f}"
        if s.lstrip("-").strip("0.") == "":
            s = s.lstrip("-")
        out.append(s)
    return ",".join(out)


# ---------------------------------------------------------------- the model bundle


class MSEFModel:
    """Frozen backbone + frozen encoder + projection, steering bank and head."""

    def __init__(
        self,
        backbone: BackboneWeights,
        tsfm: TsfmWeights,
        proj: ModalityProjection,
        bank: SteeringBank,
        head: ForecastHead,
        cfg: FusionConfig,
    ):
        self.backbone = backbone
        self.tsfm = tsfm
        self.proj = proj
        self.bank = bank
        self.head = head
        self.cfg = cfg
        if len(bank) != backbone.config.n_layers:
            raise ValueError("steering bank must hold exactly one entry per backbone layer")
        cfg.interval(backbone.config.n_layers)
        p = self.n_patches
        if cfg.mode != "plain" and p + cfg.m > backbone.config.max_prefix:
            raise ValueError(f"prefix of {p}+{cfg.m} rows exceeds max_prefix={backbone.config.max_prefix}")
        if head.W.shape != (p * backbone.config.d_model, cfg.H):
            raise nx.ShapeError(f"head shape {head.W.shape} does not match p*d_model x H")

    @property
    def n_patches(self) -> int:
        return self.tsfm.config.n_patches(self.cfg.T)

    @property
    def n_layers(self) -> int:
        return self.backbone.config.n_layers

    # -- trainable set

    def trainable_parameters(self) -> dict[str, Tensor]:
        return trainable_parameters(self)

    def features_are_frozen(self) -> bool:
        """True when nothing upstream of the head is trainable (features can be cached)."""
        return self.cfg.mode != "full" and not self.proj.trainable

    # -- forward

    def features(self, Xn: np.ndarray, channels: Sequence[int]) -> Tensor:
        """Head input [B, p*d_model] for normalised rows ``Xn`` [B, T]."""
        Xn = np.asarray(Xn, dtype=nx.get_dtype())
        if Xn.ndim != 2 or Xn.shape[1] != self.cfg.T:
            raise nx.ShapeError(f"expected rows of length T={self.cfg.T}, got {Xn.shape}")
        if self.cfg.mode == "plain":
            return self._plain_features(Xn)
        ts_rows = project(encode(Xn, self.tsfm), self.proj)
        groups: dict[int, list[int]] = defaultdict(list)
        for r, c in enumerate(channels):
            groups[int(c)].append(r)
        if len(groups) == 1:
            (c, rows), = groups.items()
            return self._fused_group(ts_rows, c)
        parts, order = [], []
        for c, rows in groups.items():
            parts.append(self._fused_group(nx.take(ts_rows, rows, axis=0), c))
            order.extend(rows)
        return nx.take(nx.concat(parts, axis=0), np.argsort(order), axis=0)

    def _fused_group(self, ts_rows: Tensor, channel: int) -> Tensor:
        B, p, d = ts_rows.shape
        ids = prompt_ids(self.cfg, channel)
        text = embed_text(ids, self.backbone)
        text = Tensor(np.broadcast_to(text.data, (B, *text.shape)))
        L = self.n_layers
        prefix, _ = forward_with_injection(text, lambda l: assemble_prefix(l, ts_rows, self.bank, self.cfg, L), self.backbone)
        return prefix[:, :p].reshape(B, p * d)

    def _plain_features(self, Xn: np.ndarray) -> Tensor:
        p, d = self.n_patches, self.backbone.config.d_model
        K = min(PLAIN_CONTEXT, Xn.shape[1])
        cap = self.backbone.config.max_seq - self.backbone.config.max_prefix
        token_rows = [tokenize(serialize_values(row[-K:])) for row in Xn]
        by_len: dict[int, list[int]] = defaultdict(list)
        for r, ids in enumerate(token_rows):
            if len(ids) > cap:
                raise ValueError(f"serialized series of {len(ids)} tokens exceeds capacity {cap}")
            if len(ids) < p:
                raise ValueError(f"serialized series shorter than the {p} positions read by the head")
            by_len[len(ids)].append(r)
        out = np.empty((len(Xn), p * d), dtype=nx.get_dtype())
        empty = lambda l: Tensor(np.zeros((0, d)))  # noqa: E731
        with nx.no_grad():
            for n, rows in by_len.items():
                emb = embed_text(np.array([token_rows[r] for r in rows]), self.backbone)
                _, seq = forward_with_injection(emb, empty, self.backbone)
                out[rows] = seq.data[:, -p:].reshape(len(rows), p * d)
        return Tensor(out)

    def predict_rows(self, X: np.ndarray, channels: Sequence[int]) -> Tensor:
        """Differentiable de-normalised forecasts [B, H] for raw rows ``X`` [B, T]."""
        Xn, mu, scale = normalize_batch(X)
        y_norm = self.head(self.features(Xn, channels))
        return self.denorm(y_norm, mu, scale)

    @staticmethod
    def denorm(y_norm: Tensor, mu: np.ndarray, scale: np.ndarray) -> Tensor:
        return y_norm * np.asarray(scale)[:, None] + np.asarray(mu)[:, None]

    def forecast(self, x, channels: Sequence[int] | None = None) -> np.ndarray:
        """Channel-independent forecast of ``x`` [N, T] -> [N, H]."""
        X = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if channels is None:
            channels = range(X.shape[0])
        with nx.no_grad():
            y = self.predict_rows(X, list(channels))
        nx.check_finite(y, "forecast")
        return y.data

    # -- serialisation

    def fusion_bytes(self) -> bytes:
        tensors = {f"steer.{l}": self.bank[l].data for l in range(1, len(self.bank) + 1)}
        tensors["head.w"] = self.head.W.data
        tensors["head.b"] = self.head.b.data
        return checkpoint.dumps("FUSION", self.cfg.to_dict(), tensors)

    def component_bytes(self) -> dict[str, bytes]:
        return {
            "backbone": self.backbone.to_bytes(),
            "tsfm": self.tsfm.to_bytes(),
            "proj": self.proj.to_bytes(),
            "fusion": self.fusion_bytes(),
        }

    def save(self, directory, fusion_name: str = "fusion.msef") -> None:
        from pathlib import Path

        d = Path(directory)
        blobs = self.component_bytes()
        for name in ("backbone", "tsfm", "proj"):
            checkpoint.atomic_write(d / f"{name}.msef", blobs[name])
        checkpoint.atomic_write(d / fusion_name, blobs["fusion"])

    @classmethod
    def load(cls, directory, fusion_name: str = "fusion.msef") -> "MSEFModel":
        from pathlib import Path

        d = Path(directory)
        backbone = BackboneWeights.load(d / "backbone.msef")
        tsfm = TsfmWeights.load(d / "tsfm.msef")
        _, pcfg, ptensors = checkpoint.load(d / "proj.msef", ModalityProjection.TAG)
        proj = ModalityProjection(Tensor(ptensors["proj.w"], requires_grad=pcfg["trainable"]), pcfg["trainable"])
        _, fcfg, ftensors = checkpoint.load(d / fusion_name, "FUSION")
        cfg = FusionConfig.from_dict(fcfg)
        L = backbone.config.n_layers
        bank = SteeringBank([Tensor(ftensors[f"steer.{l}"], requires_grad=True) for l in range(1, L + 1)])
        head = ForecastHead(Tensor(ftensors["head.w"], requires_grad=True), Tensor(ftensors["head.b"], requires_grad=True))
        return cls(backbone, tsfm, proj, bank, head, cfg)


def trainable_parameters(model: MSEFModel) -> dict[str, Tensor]:
    """Exactly the tensors training may touch; frozen backbone/encoder never appear."""
    cfg = model.cfg
    params: dict[str, Tensor] = {}
    if cfg.mode == "full" and model.bank.m > 0:
        x, y = cfg.interval(model.n_layers)
        for l in range(x, y + 1):
            params[f"steer.{l}"] = model.bank[l]
    params["head.w"] = model.head.W
    params["head.b"] = model.head.b
    if model.proj.trainable and cfg.mode != "plain":
        params["proj.w"] = model.proj.W
    return params


def build_model(
    cfg: FusionConfig,
    backbone: BackboneWeights | BackboneConfig | None = None,
    tsfm: TsfmWeights | TsfmConfig | None = None,
    seed: int = 0,
) -> MSEFModel:
    """Fresh trainable parts (seeded by ``seed``) around given or default frozen parts."""
    if not isinstance(backbone, BackboneWeights):
        backbone = init_backbone(backbone or BackboneConfig())
    if not isinstance(tsfm, TsfmWeights):
        tsfm = init_tsfm(tsfm or TsfmConfig())
    d = backbone.config.d_model
    p = tsfm.config.n_patches(cfg.T)
    proj = ModalityProjection.init(tsfm.config.d_ts, d, seed, trainable=cfg.train_proj)
    bank = SteeringBank.init(backbone.config.n_layers, cfg.m, d, seed)
    head = ForecastHead.init(p * d, cfg.H, seed)
    return MSEFModel(backbone, tsfm, proj, bank, head, cfg)


def forecast_plain(x, model: MSEFModel) -> np.ndarray:
    if model.cfg.mode != "plain":
        raise ValueError("forecast_plain requires a model configured with mode='plain'")
    return model.forecast(x)

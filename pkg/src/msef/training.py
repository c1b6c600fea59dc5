"""Few-shot training of the trainable set with Adam and early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def mse_loss(pred: Tensor, target) -> Tensor:
    return nx.mse(pred, target)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place, using each tensor's ``.grad``."""
    items = params.items() if isinstance(params, dict) else enumerate(params)
    items = list(items)
    for key, t in items:
        if t.grad is None:
            raise ValueError(f"parameter {key!r} has no gradient")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for key, t in items:
        g = t.grad
        if key not in state.m:
            state.m[key] = np.zeros_like(t.data)
            state.v[key] = np.zeros_like(t.data)
        m, v = state.m[key], state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        t.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(t.data.dtype)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 3
    seed: int = 0
    few_shot_ratio: float = 0.10
    H: int = 96
    eval_chunk: int = 64
    clip_grad: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.few_shot_ratio <= 1.0:
            raise ValueError("few_shot_ratio must lie in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")


@dataclass
class TrainHistory:
    initial_train_loss: float = math.nan
    initial_val_loss: float = math.nan
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_reason: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainHistory":
        return cls(**json.loads(text))


class EarlyStopping:
    """Stop once the validation loss has not improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad = val_loss, epoch, 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


@dataclass
class RowSet:
    """Channel-flattened windows: X [R, T], Y [R, H] and the channel of each row."""

    X: np.ndarray
    Y: np.ndarray
    channels: np.ndarray
    window_of_row: np.ndarray

    @classmethod
    def from_windows(cls, windows: Sequence) -> "RowSet":
        if not windows:
            raise ValueError("empty window set")
        N = windows[0].x.shape[0]
        X = np.concatenate([w.x for w in windows], axis=0)
        Y = np.concatenate([w.y for w in windows], axis=0)
        ch = np.tile(np.arange(N), len(windows))
        win = np.repeat(np.arange(len(windows)), N)
        return cls(X, Y, ch, win)

    def __len__(self) -> int:
        return len(self.X)

    def rows_for_windows(self, idx) -> np.ndarray:
        N = len(self.X) // (self.window_of_row.max() + 1)
        idx = np.asarray(idx)
        return (idx[:, None] * N + np.arange(N)[None, :]).ravel()


class _Predictor:
    """Forecasts for row subsets, reusing cached head inputs when upstream is frozen."""

    def __init__(self, model, rows: RowSet, chunk: int):
        from .fusion import normalize_batch

        self.model = model
        self.rows = rows
        _, self.mu, self.scale = normalize_batch(rows.X)
        self.cache = None
        if model.features_are_frozen():
            Xn = normalize_batch(rows.X)[0]
            parts = []
            with nx.no_grad():
                for s in range(0, len(rows), chunk):
                    parts.append(model.features(Xn[s : s + chunk], rows.channels[s : s + chunk]).data)
            self.cache = np.concatenate(parts, axis=0)

    def __call__(self, idx) -> Tensor:
        if self.cache is not None:
            y_norm = self.model.head(Tensor(self.cache[idx]))
            return self.model.denorm(y_norm, self.mu[idx], self.scale[idx])
        return self.model.predict_rows(self.rows.X[idx], self.rows.channels[idx])

    def loss(self, chunk: int) -> float:
        total = 0.0
        with nx.no_grad():
            for s in range(0, len(self.rows), chunk):
                idx = np.arange(s, min(s + chunk, len(self.rows)))
                pred = self(idx)
                total += float(((pred.data.astype(np.float64) - self.rows.Y[idx]) ** 2).sum())
        return total / self.rows.Y.size


def train(model, train_windows: Sequence, val_windows: Sequence, cfg: TrainConfig):
    """Train ``model.trainable_parameters()`` in place; returns (model, history).

    The model ends holding the parameters from the best validation epoch.
    """
    if not train_windows or not val_windows:
        raise ValueError("training needs non-empty train and validation window sets")
    params = model.trainable_parameters()
    train_rows = RowSet.from_windows(train_windows)
    val_rows = RowSet.from_windows(val_windows)
    f_train = _Predictor(model, train_rows, cfg.eval_chunk)
    f_val = _Predictor(model, val_rows, cfg.eval_chunk)

    hist = TrainHistory()
    hist.initial_train_loss = f_train.loss(cfg.eval_chunk)
    hist.initial_val_loss = f_val.loss(cfg.eval_chunk)
    state = AdamState()
    stopper = EarlyStopping(cfg.patience)
    best = {k: t.data.copy() for k, t in params.items()}
    n_windows = len(train_windows)
    hist.stop_reason = "max_epochs"

    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n_windows)
        for s in range(0, n_windows, cfg.batch_size):
            idx = train_rows.rows_for_windows(order[s : s + cfg.batch_size])
            for t in params.values():
                t.zero_grad()
            with nx.GradTape() as tape:
                loss = mse_loss(f_train(idx), train_rows.Y[idx])
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch starting {s}")
            nx.backward(loss, tape)
            if cfg.clip_grad is not None:
                _clip(params, cfg.clip_grad)
            adam_step(params, state, cfg.lr)
        tr = f_train.loss(cfg.eval_chunk)
        va = f_val.loss(cfg.eval_chunk)
        if not (np.isfinite(tr) and np.isfinite(va)):
            raise TrainingDivergedError(f"non-finite epoch loss at epoch {epoch} (train={tr}, val={va})")
        hist.epochs.append({"epoch": epoch, "train_loss": tr, "val_loss": va})
        log.info("epoch %d train %.6f val %.6f", epoch, tr, va)
        improved, stop = stopper.update(epoch, va)
        if improved:
            best = {k: t.data.copy() for k, t in params.items()}
        if stop:
            hist.stop_reason = "patience"
            break

    for k, t in params.items():
        t.data[...] = best[k]
    if hist.epochs:
        hist.best_epoch = stopper.best_epoch
        hist.best_val_loss = stopper.best
    return model, hist


def _clip(params: dict, max_norm: float) -> None:
    total = math.sqrt(sum(float((t.grad.astype(np.float64) ** 2).sum()) for t in params.values()))
    if total > max_norm:
        for t in params.values():
            t.grad = t.grad * (max_norm / total)

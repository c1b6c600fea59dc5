"""Frozen patch-based time-series encoder (a toy stand-in for a pretrained TSFM)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from . import numerics as nx
from .layers import block_param_count, init_block, transformer_block
from .numerics import Tensor


@dataclass(frozen=True)
class TsfmConfig:
    patch_len: int = 8
    d_ts: int = 32
    n_enc_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_patches: int = 64
    init_seed: int = 0

    def __post_init__(self):
        for f in ("patch_len", "d_ts", "n_enc_layers", "n_heads", "d_ff", "max_patches"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.d_ts % self.n_heads:
            raise ValueError(f"d_ts={self.d_ts} not divisible by n_heads={self.n_heads}")

    def n_patches(self, T: int) -> int:
        return -(-T // self.patch_len)

    def param_count(self) -> int:
        P, d = self.patch_len, self.d_ts
        return P * d + d + self.max_patches * d + self.n_enc_layers * block_param_count(d, self.d_ff)


@dataclass
class PatchRepresentation:
    E: Tensor
    source_window_id: object = None


class TsfmWeights:
    TAG = "TSFM"

    def __init__(self, config: TsfmConfig, params: dict[str, np.ndarray], trainable: bool = False):
        self.config = config
        self.params = {k: Tensor(np.array(v), requires_grad=trainable) for k, v in params.items()}
        if not trainable:
            for t in self.params.values():
                t.data.flags.writeable = False

    def frozen(self) -> "TsfmWeights":
        return TsfmWeights(self.config, {k: t.data for k, t in self.params.items()})

    def to_bytes(self) -> bytes:
        return checkpoint.dumps(self.TAG, asdict(self.config), {k: t.data for k, t in self.params.items()})

    def save(self, path) -> None:
        checkpoint.atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "TsfmWeights":
        _, cfg, tensors = checkpoint.load(path, cls.TAG)
        return cls(TsfmConfig(**cfg), tensors)


def init_tsfm(config: TsfmConfig, trainable: bool = False) -> TsfmWeights:
    rng = np.random.default_rng(config.init_seed)
    P, d = config.patch_len, config.d_ts
    params = {
        "patch.w": rng.normal(0.0, 0.02, size=(P, d)),
        "patch.b": np.zeros(d),
        "pos": rng.normal(0.0, 0.02, size=(config.max_patches, d)),
    }
    for i in range(config.n_enc_layers):
        params.update(init_block(rng, f"enc.{i}.", d, config.d_ff))
    return TsfmWeights(config, params, trainable=trainable)


def pad_to_patches(x: np.ndarray, patch_len: int) -> np.ndarray:
    """Left-pad the last axis by repeating the first value up to a multiple of ``patch_len``."""
    T = x.shape[-1]
    extra = (-T) % patch_len
    if not extra:
        return x
    pad = np.repeat(x[..., :1], extra, axis=-1)
    return np.concatenate([pad, x], axis=-1)


def patchify(x, patch_len: int) -> Tensor:
    """[..., T] -> [..., p, P] non-overlapping patches in temporal order."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=nx.get_dtype())
    if x.shape[-1] == 0:
        raise ValueError("cannot patchify an empty series")
    x = pad_to_patches(x, patch_len)
    return Tensor(x.reshape(*x.shape[:-1], -1, patch_len))


def encode(x_norm, weights: TsfmWeights, mask: np.ndarray | None = None) -> Tensor:
    """Per-patch representations [p, d_ts] for a window (or [B, p, d_ts] for [B, T]).

    ``mask`` (bool [.., p]) zeroes the selected patches before embedding; used
    only by masked pretraining.
    """
    cfg = weights.config
    x = x_norm.data if isinstance(x_norm, Tensor) else np.asarray(x_norm, dtype=nx.get_dtype())
    if not np.all(np.isfinite(x)):
        raise nx.NonFiniteError("encoder input contains NaN/Inf")
    unbatched = x.ndim == 1
    patches = patchify(x[None] if unbatched else x, cfg.patch_len).data
    if mask is not None:
        patches = np.where(np.asarray(mask)[..., None], 0.0, patches)
    B, p, _ = patches.shape
    if p > cfg.max_patches:
        raise ValueError(f"{p} patches exceed max_patches={cfg.max_patches}")
    prm = weights.params
    h = Tensor(patches) @ prm["patch.w"] + prm["patch.b"] + prm["pos"][:p]
    for i in range(cfg.n_enc_layers):
        h = transformer_block(h, prm, f"enc.{i}.", cfg.n_heads, None)
    return h.reshape(p, cfg.d_ts) if unbatched else h


@dataclass
class PretrainResult:
    weights: TsfmWeights
    dec_w: np.ndarray
    dec_b: np.ndarray
    losses: list[float]  # training loss before each epoch's update

    def reconstruction_mse(self, windows, mask: np.ndarray) -> float:
        """Masked-patch MSE of the frozen encoder + kept decoder on ``windows``."""
        from .fusion import normalize_batch

        X = pad_to_patches(np.asarray(windows, dtype=np.float64), self.weights.config.patch_len)
        Xn, _, _ = normalize_batch(X)
        target = patchify(Xn, self.weights.config.patch_len).data
        with nx.no_grad():
            loss = masked_reconstruction_loss(Xn, mask, target, self.weights, Tensor(self.dec_w), Tensor(self.dec_b))
        return loss.item()


def pretrain_masked(
    series: list,
    config: TsfmConfig | None = None,
    mask_ratio: float = 0.3,
    epochs: int = 20,
    seed: int = 0,
    lr: float = 1e-3,
) -> TsfmWeights:
    """Masked-patch reconstruction pretraining; returns frozen encoder weights.

    Each element of ``series`` is one window. Windows are instance-normalised,
    a random ``mask_ratio`` of patches is zeroed, and a throwaway linear
    decoder reconstructs the hidden patches (MSE on masked patches only).
    """
    return pretrain_run(series, config, mask_ratio, epochs, seed, lr).weights


def pretrain_run(series, config=None, mask_ratio=0.3, epochs=20, seed=0, lr=1e-3) -> PretrainResult:
    """Like :func:`pretrain_masked` but also keeps the decoder and the loss trace."""
    from .fusion import normalize_batch
    from .training import AdamState, adam_step

    if not len(series):
        raise ValueError("pretraining corpus is empty")
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in (0, 1)")
    config = config or TsfmConfig()
    weights = init_tsfm(config, trainable=True)
    rng = np.random.default_rng(seed)
    dec_w = Tensor(rng.normal(0.0, 0.02, size=(config.d_ts, config.patch_len)), requires_grad=True)
    dec_b = Tensor(np.zeros(config.patch_len), requires_grad=True)
    if epochs == 0:
        return PretrainResult(weights.frozen(), dec_w.data.copy(), dec_b.data.copy(), [])

    X = np.stack([np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64) for s in series])
    X = pad_to_patches(X, config.patch_len)
    Xn, _, _ = normalize_batch(X)
    target = patchify(Xn, config.patch_len).data
    p = target.shape[1]
    params = list(weights.params.values()) + [dec_w, dec_b]
    state = AdamState()
    n_mask = min(p, max(1, int(round(mask_ratio * p))))
    losses = []
    for _ in range(epochs):
        mask = np.zeros((len(X), p), dtype=bool)
        for r in range(len(X)):
            mask[r, rng.choice(p, size=n_mask, replace=False)] = True
        loss = masked_reconstruction_loss(Xn, mask, target, weights, dec_w, dec_b, record=True)
        losses.append(loss.item())
        adam_step(params, state, lr)
    return PretrainResult(weights.frozen(), dec_w.data.copy(), dec_b.data.copy(), losses)


def masked_reconstruction_loss(Xn, mask, target, weights, dec_w, dec_b, record: bool = False) -> Tensor:
    tape = nx.GradTape()
    with tape:
        h = encode(Xn, weights, mask=mask)
        recon = h @ dec_w + dec_b
        sel = np.nonzero(mask)
        loss = nx.mse(recon[sel], target[sel])
    if record:
        for t in list(weights.params.values()) + [dec_w, dec_b]:
            t.zero_grad()
        nx.backward(loss, tape)
    return loss

"""Frozen decoder-only transformer with a per-layer prefix hook.

At layer ``l`` the input is ``concat(prefix_provider(l), sequence_states)``.
After the layer the prefix rows are dropped; only the sequence rows continue.
The last layer's prefix rows are returned alongside the sequence rows.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import checkpoint
from . import numerics as nx
from .layers import block_param_count, init_block, transformer_block
from .numerics import Tensor

PAD_ID = 256
BOS_ID = 257


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 258
    max_seq: int = 2048
    max_prefix: int = 128
    init_seed: int = 0

    def __post_init__(self):
        for f in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.max_prefix < self.max_seq:
            raise ValueError("max_prefix must lie in [0, max_seq)")

    def param_count(self) -> int:
        d = self.d_model
        per_layer = block_param_count(d, self.d_ff)
        return self.vocab_size * d + self.max_seq * d + self.n_layers * per_layer + 2 * d


@dataclass(frozen=True)
class MaskPolicy:
    n_prefix: int
    n_seq: int

    def allowed(self) -> np.ndarray:
        """Boolean [n, n] matrix; row = query, column = key."""
        m, n = self.n_prefix, self.n_seq
        ok = np.ones((m + n, m + n), dtype=bool)
        ok[m:, m:] = np.tril(np.ones((n, n), dtype=bool))
        return ok

    def additive(self) -> np.ndarray:
        return np.where(self.allowed(), 0.0, -np.inf)


class BackboneWeights:
    """Immutable parameter set; every tensor has ``requires_grad=False``."""

    TAG = "BACKBONE"

    def __init__(self, config: BackboneConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = {k: Tensor(v) for k, v in params.items()}
        for t in self.params.values():
            t.data.flags.writeable = False

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def to_bytes(self) -> bytes:
        return checkpoint.dumps(self.TAG, asdict(self.config), {k: t.data for k, t in self.params.items()})

    def save(self, path) -> None:
        checkpoint.atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "BackboneWeights":
        _, cfg, tensors = checkpoint.load(path, cls.TAG)
        return cls(BackboneConfig(**cfg), tensors)


def init_backbone(config: BackboneConfig) -> BackboneWeights:
    rng = np.random.default_rng(config.init_seed)
    d = config.d_model
    params = {
        "tok_emb": rng.normal(0.0, 0.02, size=(config.vocab_size, d)),
        "pos_emb": rng.normal(0.0, 0.02, size=(config.max_seq, d)),
    }
    for i in range(config.n_layers):
        params.update(init_block(rng, f"layers.{i}.", d, config.d_ff))
    params["ln_f.g"] = np.ones(d)
    params["ln_f.b"] = np.zeros(d)
    return BackboneWeights(config, params)


def tokenize(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def embed_text(token_ids, weights: BackboneWeights) -> Tensor:
    """Token + positional embeddings. ``token_ids`` is [n] or [B, n].

    Sequence positions start at ``max_prefix`` so a token keeps the same
    positional row whatever the prefix length of the current mode.
    """
    cfg = weights.config
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1 and ids.size == 0:
        return Tensor(np.zeros((0, cfg.d_model)))
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        bad = ids[(ids < 0) | (ids >= cfg.vocab_size)].ravel()[0]
        raise ValueError(f"token id {bad} outside vocabulary of size {cfg.vocab_size}")
    n = ids.shape[-1]
    if n > cfg.max_seq - cfg.max_prefix:
        raise ValueError(f"sequence of {n} tokens exceeds capacity {cfg.max_seq - cfg.max_prefix}")
    tok = weights["tok_emb"].data[ids]
    pos = weights["pos_emb"].data[cfg.max_prefix : cfg.max_prefix + n]
    return Tensor(tok + pos)


PrefixProvider = Callable[[int], Tensor]


def forward_with_injection(
    text_emb: Tensor,
    prefix_provider: PrefixProvider,
    weights: BackboneWeights,
) -> tuple[Tensor, Tensor]:
    """Run every layer with a fresh prefix block; layers are numbered from 1.

    ``text_emb`` may be [n, d] or batched [B, n, d]. A 2-D prefix is shared
    across the batch. Returns final-norm ``(prefix_states, seq_states)`` from
    the last layer, with the same leading shape as ``text_emb``.
    """
    cfg = weights.config
    unbatched = text_emb.ndim == 2
    h = text_emb.reshape(1, *text_emb.shape) if unbatched else text_emb
    B, n, d = h.shape
    if d != cfg.d_model:
        raise nx.ShapeError(f"text embedding width {d} != d_model {cfg.d_model}")

    prefix = None
    for l in range(1, cfg.n_layers + 1):
        prefix = prefix_provider(l)
        if prefix.ndim == 2:
            prefix = nx.broadcast_to(prefix, (B, *prefix.shape))
        m = prefix.shape[1]
        if prefix.shape[0] != B or prefix.shape[2] != d:
            raise nx.ShapeError(f"layer {l}: prefix shape {prefix.shape} incompatible with batch {B} x d_model {d}")
        if m + n > cfg.max_seq:
            raise ValueError(f"layer {l}: {m} prefix + {n} sequence rows exceed max_seq={cfg.max_seq}")
        x = nx.concat([prefix, h], axis=1) if m else h
        mask = MaskPolicy(m, n).additive()
        out = transformer_block(x, weights.params, f"layers.{l - 1}.", cfg.n_heads, mask)
        nx.check_finite(out, f"backbone layer {l}")
        prefix, h = out[:, :m], out[:, m:]

    g, b = weights["ln_f.g"], weights["ln_f.b"]
    prefix = nx.layer_norm(prefix, g, b) if prefix.shape[1] else prefix
    h = nx.layer_norm(h, g, b) if n else h
    if unbatched:
        prefix = prefix.reshape(prefix.shape[1:])
        h = h.reshape(h.shape[1:])
    return prefix, h

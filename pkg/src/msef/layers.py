"""Pre-norm transformer block shared by the backbone and the series encoder."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Tensor


def init_block(rng: np.random.Generator, prefix: str, d: int, d_ff: int, std: float = 0.02) -> dict[str, np.ndarray]:
    """Draw one block's parameters in a fixed order (determinism depends on it)."""
    p: dict[str, np.ndarray] = {}
    p[prefix + "ln1.g"] = np.ones(d)
    p[prefix + "ln1.b"] = np.zeros(d)
    for name in ("wq", "wk", "wv", "wo"):
        p[prefix + f"attn.{name}"] = rng.normal(0.0, std, size=(d, d))
        p[prefix + f"attn.b{name[1]}"] = np.zeros(d)
    p[prefix + "ln2.g"] = np.ones(d)
    p[prefix + "ln2.b"] = np.zeros(d)
    p[prefix + "ffn.w1"] = rng.normal(0.0, std, size=(d, d_ff))
    p[prefix + "ffn.b1"] = np.zeros(d_ff)
    p[prefix + "ffn.w2"] = rng.normal(0.0, std, size=(d_ff, d))
    p[prefix + "ffn.b2"] = np.zeros(d)
    return p


def block_param_count(d: int, d_ff: int) -> int:
    return 4 * d * d + 4 * d + 2 * d * d_ff + d_ff + d + 4 * d


def transformer_block(h: Tensor, p: dict[str, Tensor], prefix: str, n_heads: int, mask: np.ndarray | None) -> Tensor:
    """h: [B, n, d]; mask: additive [n, n] (0 or -inf) or None for full attention."""
    B, n, d = h.shape
    dh = d // n_heads

    a = nx.layer_norm(h, p[prefix + "ln1.g"], p[prefix + "ln1.b"])

    def heads(w: str, b: str) -> Tensor:
        t = a @ p[prefix + w] + p[prefix + b]
        return nx.swapaxes(t.reshape(B, n, n_heads, dh), 1, 2)

    q = heads("attn.wq", "attn.bq")
    k = heads("attn.wk", "attn.bk")
    v = heads("attn.wv", "attn.bv")
    scores = (q @ nx.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    att = nx.softmax(scores, axis=-1)
    o = nx.swapaxes(att @ v, 1, 2).reshape(B, n, d)
    h = h + (o @ p[prefix + "attn.wo"] + p[prefix + "attn.bo"])

    f = nx.layer_norm(h, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    f = nx.gelu(f @ p[prefix + "ffn.w1"] + p[prefix + "ffn.b1"])
    return h + (f @ p[prefix + "ffn.w2"] + p[prefix + "ffn.b2"])

import numpy as np
import pytest

from msef import numerics as nx
from msef.backbone import (
    BackboneConfig,
    BackboneWeights,
    MaskPolicy,
    embed_text,
    forward_with_injection,
    init_backbone,
)
from msef.numerics import Tensor

import reference as ref

TINY = BackboneConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, max_seq=96, max_prefix=8, init_seed=3)


def _params(w):
    return {k: t.data.astype(np.float64) for k, t in w.params.items()}


def test_init_is_deterministic_and_seed_dependent():
    a, b = init_backbone(TINY), init_backbone(TINY)
    assert a.to_bytes() == b.to_bytes()
    c = init_backbone(BackboneConfig(**{**TINY.__dict__, "init_seed": 4}))
    assert not np.array_equal(a["layers.0.attn.wq"].data, c["layers.0.attn.wq"].data)


def test_param_count_closed_form():
    cfg = BackboneConfig()
    d, f, L = 64, 256, 4
    per_layer = (2 * d) + 4 * (d * d + d) + (2 * d) + (d * f + f) + (f * d + d)
    expected = 258 * d + 2048 * d + L * per_layer + 2 * d
    w = init_backbone(cfg)
    assert w.n_params() == expected == cfg.param_count()


def test_weights_frozen_and_readonly():
    w = init_backbone(TINY)
    assert all(not t.requires_grad for t in w.params.values())
    with pytest.raises(ValueError):
        w["tok_emb"].data[0, 0] = 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        BackboneConfig(n_layers=0)


def test_checkpoint_roundtrip(tmp_path):
    w = init_backbone(TINY)
    w.save(tmp_path / "b.msef")
    back = BackboneWeights.load(tmp_path / "b.msef")
    assert back.config == TINY
    assert back.to_bytes() == w.to_bytes()


# ---------------------------------------------------------------- embedding


def test_embed_empty():
    assert embed_text([], init_backbone(TINY)).shape == (0, 8)


def test_embed_repeated_id_differs_only_by_position():
    w = init_backbone(TINY)
    e = embed_text([65, 65], w).data
    pos = w["pos_emb"].data
    np.testing.assert_allclose(e[1] - e[0], pos[TINY.max_prefix + 1] - pos[TINY.max_prefix], atol=1e-7)


def test_embed_reads_table_row():
    w = init_backbone(TINY)
    e = embed_text([65], w).data
    np.testing.assert_array_equal(e[0], w["tok_emb"].data[65] + w["pos_emb"].data[TINY.max_prefix])


def test_embed_errors():
    w = init_backbone(TINY)
    with pytest.raises(ValueError, match="vocabulary"):
        embed_text([999], w)
    with pytest.raises(ValueError, match="exceeds"):
        embed_text([1] * (TINY.max_seq - TINY.max_prefix + 1), w)


# ---------------------------------------------------------------- masking


def test_mask_policy():
    ok = MaskPolicy(2, 3).allowed()
    assert ok[:2].all()  # prefix queries see everything
    assert ok[2:, :2].all()  # sequence queries see every prefix row
    np.testing.assert_array_equal(ok[2:, 2:], np.tril(np.ones((3, 3), dtype=bool)))


# ---------------------------------------------------------------- forward


def _no_prefix(d):
    return lambda l: Tensor(np.zeros((0, d)))


def test_single_layer_matches_hand_computation(f64):
    cfg = BackboneConfig(n_layers=1, d_model=4, n_heads=2, d_ff=8, max_seq=32, max_prefix=4, init_seed=11)
    w = init_backbone(cfg)
    P = _params(w)
    rng = np.random.default_rng(0)
    prefix = rng.normal(size=(1, 4))
    ids = [72, 105, 33]
    pre, seq = forward_with_injection(embed_text(ids, w), lambda l: Tensor(prefix), w)
    rp, rs = ref.backbone_forward(P, cfg, ref.embed(P, cfg, ids), [prefix])
    np.testing.assert_allclose(pre.data, rp, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(seq.data, rs, rtol=1e-10, atol=1e-12)


def test_multilayer_with_varying_prefixes_matches_reference(f64):
    w = init_backbone(TINY)
    P = _params(w)
    rng = np.random.default_rng(1)
    prefixes = [rng.normal(size=(3, 8)), rng.normal(size=(1, 8))]
    ids = list(b"abcde")
    pre, seq = forward_with_injection(embed_text(ids, w), lambda l: Tensor(prefixes[l - 1]), w)
    rp, rs = ref.backbone_forward(P, TINY, ref.embed(P, TINY, ids), prefixes)
    np.testing.assert_allclose(pre.data, rp, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(seq.data, rs, rtol=1e-9, atol=1e-12)


def test_empty_prefix_is_plain_causal_transformer(f64):
    w = init_backbone(TINY)
    P = _params(w)
    ids = list(b"hello")
    pre, seq = forward_with_injection(embed_text(ids, w), _no_prefix(8), w)
    assert pre.shape == (0, 8)
    _, rs = ref.backbone_forward(P, TINY, ref.embed(P, TINY, ids), [np.zeros((0, 8))] * 2)
    np.testing.assert_allclose(seq.data, rs, rtol=1e-9, atol=1e-12)


def test_causality_exact(f64):
    w = init_backbone(TINY)
    rng = np.random.default_rng(2)
    ids = list(rng.integers(0, 256, size=12))
    prefix = Tensor(rng.normal(size=(2, 8)))
    _, base = forward_with_injection(embed_text(ids, w), lambda l: prefix, w)
    for t in range(len(ids)):
        changed = list(ids)
        for k in range(t, len(ids)):
            changed[k] = (changed[k] + 17) % 256
        _, out = forward_with_injection(embed_text(changed, w), lambda l: prefix, w)
        assert out.data[:t].tobytes() == base.data[:t].tobytes()
        if t < len(ids):
            assert not np.array_equal(out.data[t], base.data[t])


def test_prefix_visible_at_every_layer(f64):
    w = init_backbone(TINY)
    rng = np.random.default_rng(4)
    ids = list(b"xyz")
    prefixes = [Tensor(rng.normal(size=(2, 8))) for _ in range(2)]
    _, base = forward_with_injection(embed_text(ids, w), lambda l: prefixes[l - 1], w)
    for layer in (1, 2):
        bumped = [p if i + 1 != layer else Tensor(p.data + 1e-3 * rng.normal(size=p.shape)) for i, p in enumerate(prefixes)]
        _, out = forward_with_injection(embed_text(ids, w), lambda l: bumped[l - 1], w)
        assert np.all(np.abs(out.data - base.data).max(axis=1) > 1e-9)


def test_prefix_is_replaced_not_carried(f64, monkeypatch):
    """Zeroing the layer-1 prefix leaves layer 2's prefix input untouched."""
    import msef.backbone as bb

    w = init_backbone(TINY)
    rng = np.random.default_rng(5)
    fresh2 = Tensor(rng.normal(size=(2, 8)))
    inputs = []
    real_block = bb.transformer_block

    def spy(x, *args):
        inputs.append(x.data.copy())
        return real_block(x, *args)

    monkeypatch.setattr(bb, "transformer_block", spy)
    for first in (Tensor(rng.normal(size=(3, 8))), Tensor(np.zeros((3, 8)))):
        forward_with_injection(embed_text(list(b"abc"), w), lambda l: first if l == 1 else fresh2, w)
    layer2_a, layer2_z = inputs[1], inputs[3]
    assert layer2_a.shape == layer2_z.shape == (1, 2 + 3, 8)  # length stays constant, no accumulation
    np.testing.assert_array_equal(layer2_a[0, :2], fresh2.data)
    np.testing.assert_array_equal(layer2_z[0, :2], fresh2.data)
    assert not np.array_equal(layer2_a[0, 2:], layer2_z[0, 2:])  # influence only via sequence rows


def test_batched_matches_unbatched(f64):
    w = init_backbone(TINY)
    rng = np.random.default_rng(6)
    ids = np.array([list(b"abcd"), list(b"wxyz")])
    prefix = Tensor(rng.normal(size=(2, 3, 8)))
    pre, seq = forward_with_injection(embed_text(ids, w), lambda l: prefix, w)
    for b in range(2):
        p1, s1 = forward_with_injection(embed_text(ids[b], w), lambda l: Tensor(prefix.data[b]), w)
        np.testing.assert_allclose(pre.data[b], p1.data, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(seq.data[b], s1.data, rtol=1e-12, atol=1e-14)


def test_length_overflow():
    cfg = BackboneConfig(n_layers=1, d_model=8, n_heads=2, d_ff=8, max_seq=10, max_prefix=4)
    w = init_backbone(cfg)
    with pytest.raises(ValueError, match="exceed"):
        forward_with_injection(embed_text([1, 2, 3], w), lambda l: Tensor(np.zeros((8, 8))), w)


def test_nan_detected():
    w = init_backbone(TINY)
    with pytest.raises(nx.NonFiniteError):
        forward_with_injection(embed_text([1, 2], w), lambda l: Tensor(np.full((1, 8), np.nan)), w)

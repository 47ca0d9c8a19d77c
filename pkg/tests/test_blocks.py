import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridseg import nn
from hybridseg.errors import DimensionError
from hybridseg.params import ParameterStore
from hybridseg.tensor import Rng, Tensor, layer_norm, no_grad


def sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def store_for(init, *args, dtype=np.float64, seed=0):
    s = ParameterStore()
    init(s.scope("blk"), Rng(seed), *args)
    s = s.astype(dtype)
    return s, s.scope("blk")


def arr(p, name):
    return p[name].data.astype(np.float64)


def zero_all(p, names=None):
    for n in p:
        if names is None or any(n.startswith(k) for k in names):
            p[n].data[...] = 0.0


def conv1x1_oracle(x, w, b):
    # x: C,H,W ; w: O,C,1,1
    c, h, wd = x.shape
    out = np.zeros((w.shape[0], h, wd))
    for o in range(w.shape[0]):
        for ci in range(c):
            out[o] += w[o, ci, 0, 0] * x[ci]
        out[o] += b[o]
    return out


# -- SE ----------------------------------------------------------------------

def test_se_zero_weights_halves():
    s, p = store_for(nn.init_se, 32, 16)
    zero_all(p)
    x = Tensor(np.random.default_rng(0).standard_normal((32, 4, 4)), dtype=np.float64)
    assert np.array_equal(nn.se_forward(x, p).data, 0.5 * x.data)
    assert not nn.se_forward(Tensor(np.zeros((32, 4, 4)), dtype=np.float64), p).data.any()


def test_se_matches_scalar_oracle():
    s, p = store_for(nn.init_se, 16, 4, dtype=np.float32)
    x = np.random.default_rng(1).standard_normal((16, 5, 5))
    w1, w2 = arr(p, "w1"), arr(p, "w2")
    z = [x[c].mean() for c in range(16)]
    hid = [max(0.0, sum(w1[j, c] * z[c] for c in range(16))) for j in range(4)]
    sc = [sig(sum(w2[c, j] * hid[j] for j in range(4))) for c in range(16)]
    expected = np.stack([sc[c] * x[c] for c in range(16)])
    np.testing.assert_allclose(nn.se_forward(Tensor(x), p).data, expected, atol=1e-5)


def test_se_channel_mismatch():
    s, p = store_for(nn.init_se, 16, 4)
    with pytest.raises(DimensionError):
        nn.se_forward(Tensor(np.zeros((8, 2, 2))), p)


# -- CBAM ----------------------------------------------------------------------

def test_cbam_zero_weights_quarter():
    s, p = store_for(nn.init_cbam, 16, 4)
    zero_all(p)
    x = Tensor(np.random.default_rng(2).standard_normal((2, 16, 5, 5)), dtype=np.float64)
    np.testing.assert_allclose(nn.cbam_forward(x, p).data, 0.25 * x.data, atol=1e-15)
    assert not nn.cbam_forward(Tensor(np.zeros((16, 3, 3)), dtype=np.float64), p).data.any()


def test_cbam_matches_sequential_oracle():
    s, p = store_for(nn.init_cbam, 8, 4, dtype=np.float32)
    x = np.random.default_rng(3).standard_normal((8, 6, 6))
    w1, w2 = arr(p, "mlp.w1"), arr(p, "mlp.w2")
    ks, kb = arr(p, "spatial.weight"), arr(p, "spatial.bias")

    def mlp(v):
        return w2 @ np.maximum(w1 @ v, 0.0)

    mc = sig(mlp(x.mean(axis=(1, 2))) + mlp(x.max(axis=(1, 2))))
    x1 = x * mc[:, None, None]
    desc = np.stack([x1.mean(axis=0), x1.max(axis=0)])
    pad = np.zeros((2, 12, 12))
    pad[:, 3:9, 3:9] = desc
    ms = np.zeros((6, 6))
    for i in range(6):
        for j in range(6):
            ms[i, j] = (ks[0] * pad[:, i:i + 7, j:j + 7]).sum() + kb[0]
    expected = x1 * sig(ms)[None]
    np.testing.assert_allclose(nn.cbam_forward(Tensor(x), p).data, expected, atol=1e-5)


# -- attention gate ----------------------------------------------------------------

def test_gate_zero_psi_and_zero_skip():
    s, p = store_for(nn.init_attention_gate, 8, 12)
    r = np.random.default_rng(4)
    skip = Tensor(r.standard_normal((8, 4, 4)), dtype=np.float64)
    gate = Tensor(r.standard_normal((12, 4, 4)), dtype=np.float64)
    assert not nn.attention_gate(Tensor(np.zeros((8, 4, 4)), dtype=np.float64), gate, p).data.any()
    zero_all(p, ["psi"])
    assert np.array_equal(nn.attention_gate(skip, gate, p).data, 0.5 * skip.data)


def test_gate_matches_oracle_and_sizes():
    s, p = store_for(nn.init_attention_gate, 8, 12, dtype=np.float32)
    assert p["theta.weight"].shape[0] == 16  # C/2 floored at 16
    r = np.random.default_rng(5)
    skip, gate = r.standard_normal((8, 5, 5)), r.standard_normal((12, 5, 5))
    a = np.maximum(conv1x1_oracle(skip, arr(p, "theta.weight"), arr(p, "theta.bias"))
                   + conv1x1_oracle(gate, arr(p, "phi.weight"), arr(p, "phi.bias")), 0.0)
    psi = sig(conv1x1_oracle(a, arr(p, "psi.weight"), arr(p, "psi.bias")))
    np.testing.assert_allclose(nn.attention_gate(Tensor(skip), Tensor(gate), p).data, skip * psi, atol=1e-5)
    with pytest.raises(DimensionError):
        nn.attention_gate(Tensor(skip), Tensor(np.zeros((12, 4, 4))), p)


# -- attention ------------------------------------------------------------------------

def test_sdpa_single_token_and_uniform():
    r = np.random.default_rng(6)
    v = r.standard_normal((1, 3))
    out = nn.scaled_dot_product_attention(Tensor(r.standard_normal((1, 2))), Tensor(r.standard_normal((1, 2))), Tensor(v))
    np.testing.assert_allclose(out.data, v.astype(np.float32))
    q = Tensor([[1.0, 0.0], [2.0, 0.0]])
    k = Tensor([[0.0, 1.0], [0.0, -3.0], [0.0, 2.0]])
    v3 = r.standard_normal((3, 4))
    out = nn.scaled_dot_product_attention(q, k, Tensor(v3)).data
    np.testing.assert_allclose(out, np.tile(v3.mean(0), (2, 1)), atol=1e-6)


def test_sdpa_hand_case():
    q = np.array([[1.0, 0.5], [-0.3, 2.0], [0.0, -1.0]])
    k = np.array([[0.2, 0.1], [1.5, -0.5], [-1.0, 0.3]])
    v = np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]])
    expected = np.zeros((3, 2))
    for i in range(3):
        logits = [sum(q[i, t] * k[j, t] for t in range(2)) / math.sqrt(2) for j in range(3)]
        m = max(logits)
        e = [math.exp(l - m) for l in logits]
        for j in range(3):
            expected[i] += e[j] / sum(e) * v[j]
    out = nn.scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, expected, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_sdpa_rows_are_convex_combinations(n, d, seed):
    r = np.random.default_rng(seed)
    v = r.standard_normal((n, 3))
    out = nn.scaled_dot_product_attention(Tensor(r.standard_normal((n, d)) * 3), Tensor(r.standard_normal((n, d)) * 3), Tensor(v)).data
    assert np.all(out >= v.min(0) - 1e-5) and np.all(out <= v.max(0) + 1e-5)


def _mhsa_oracle(x, p, heads):
    d = x.shape[-1]
    dk = d // heads

    def lin(v, name):
        return v @ arr(p, f"{name}.weight").T + arr(p, f"{name}.bias")

    q, k, v = lin(x, "q"), lin(x, "k"), lin(x, "v")
    outs = []
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        logits = q[:, sl] @ k[:, sl].T / math.sqrt(dk)
        e = np.exp(logits - logits.max(1, keepdims=True))
        outs.append((e / e.sum(1, keepdims=True)) @ v[:, sl])
    return lin(np.concatenate(outs, axis=1), "o")


def test_mhsa_zero_output_projection():
    s, p = store_for(nn.init_mhsa, 16)
    zero_all(p, ["o"])
    x = Tensor(np.random.default_rng(7).standard_normal((4, 16)), dtype=np.float64)
    assert not nn.mhsa(x, p, heads=8).data.any()


def test_mhsa_single_head_is_projected_sdpa():
    s, p = store_for(nn.init_mhsa, 8)
    x = np.random.default_rng(8).standard_normal((5, 8))
    xt = Tensor(x, dtype=np.float64)

    def lin(v, name):
        return nn.blocks.dense(v, p.scope(name))

    ref = lin(nn.scaled_dot_product_attention(lin(xt, "q"), lin(xt, "k"), lin(xt, "v")), "o")
    np.testing.assert_allclose(nn.mhsa(xt, p, heads=1).data, ref.data, atol=1e-12)


def test_mhsa_eight_heads_matches_per_head_oracle():
    s, p = store_for(nn.init_mhsa, 32, dtype=np.float32)
    x = np.random.default_rng(9).standard_normal((4, 32))
    np.testing.assert_allclose(nn.mhsa(Tensor(x), p, heads=8).data, _mhsa_oracle(x, p, 8), atol=1e-5)
    xb = np.random.default_rng(10).standard_normal((3, 4, 32))
    got = nn.mhsa(Tensor(xb), p, heads=8).data
    for i in range(3):
        np.testing.assert_allclose(got[i], _mhsa_oracle(xb[i], p, 8), atol=1e-5)


# -- transformer block ------------------------------------------------------------

def test_transformer_zero_weights_pass_through():
    s, p = store_for(nn.init_transformer_block, 16, 32)
    for n in p:
        if n.endswith("weight") or n.endswith("bias"):
            p[n].data[...] = 0.0
    x = Tensor(np.random.default_rng(11).standard_normal((5, 16)), dtype=np.float64)
    out = nn.transformer_block(x, p, mode="eval", heads=8)
    ones, zeros = Tensor(np.ones(16), dtype=np.float64), Tensor(np.zeros(16), dtype=np.float64)
    np.testing.assert_allclose(out.data, layer_norm(layer_norm(x, ones, zeros), ones, zeros).data, atol=1e-12)


def test_transformer_matches_composed_oracle():
    s, p = store_for(nn.init_transformer_block, 16, 24, dtype=np.float32)
    x = np.random.default_rng(12).standard_normal((6, 16))

    def ln(v, name):
        mu = v.mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(((v - mu) ** 2).mean(-1, keepdims=True) + 1e-5) * arr(p, f"{name}.gamma") + arr(p, f"{name}.beta")

    attn = _mhsa_oracle(x, p.scope("attn"), 4)
    h = ln(x + attn, "ln1")
    f = np.maximum(h @ arr(p, "ffn1.weight").T + arr(p, "ffn1.bias"), 0) @ arr(p, "ffn2.weight").T + arr(p, "ffn2.bias")
    expected = ln(h + f, "ln2")
    got = nn.transformer_block(Tensor(x), p, mode="eval", heads=4).data
    np.testing.assert_allclose(got, expected, atol=1e-5)


def test_transformer_eval_is_pure_and_train_uses_rng():
    s, p = store_for(nn.init_transformer_block, 16, 16, dtype=np.float32)
    x = Tensor(np.random.default_rng(13).standard_normal((2, 7, 16)))
    e1 = nn.transformer_block(x, p, mode="eval", heads=8).data
    e2 = nn.transformer_block(x, p, rng=Rng(5), mode="eval", heads=8).data
    assert np.array_equal(e1, e2) and e1.shape == x.shape
    t1 = nn.transformer_block(x, p, rng=Rng(5), mode="train", heads=8).data
    t2 = nn.transformer_block(x, p, rng=Rng(5), mode="train", heads=8).data
    assert np.array_equal(t1, t2) and not np.array_equal(t1, e1)


# -- ResNeXt -------------------------------------------------------------------------------

def test_resnext_trivial():
    s, p = store_for(nn.init_resnext, 8)
    x = Tensor(np.random.default_rng(14).standard_normal((8, 5, 5)), dtype=np.float64)
    assert not nn.resnext_block(Tensor(np.zeros((8, 5, 5)), dtype=np.float64), p).data.any()
    zero_all(p, ["expand"])
    assert np.array_equal(nn.resnext_block(x, p).data, np.maximum(x.data, 0))


def test_resnext_stage_oracle():
    s, p = store_for(nn.init_resnext, 8, 12, dtype=np.float32)
    x = np.random.default_rng(15).standard_normal((8, 6, 6))
    red = np.maximum(conv1x1_oracle(x, arr(p, "reduce.weight"), arr(p, "reduce.bias")), 0)
    dw = arr(p, "depthwise.weight")
    pad = np.zeros((4, 8, 8))
    pad[:, 1:7, 1:7] = red
    mid = np.zeros((4, 6, 6))
    for c in range(4):
        for i in range(6):
            for j in range(6):
                mid[c, i, j] = (dw[c, 0] * pad[c, i:i + 3, j:j + 3]).sum()
        mid[c] += arr(p, "depthwise.bias")[c]
    expanded = conv1x1_oracle(mid, arr(p, "expand.weight"), arr(p, "expand.bias"))
    short = conv1x1_oracle(x, arr(p, "shortcut.weight"), arr(p, "shortcut.bias"))
    expected = np.maximum(short + expanded, 0)
    np.testing.assert_allclose(nn.resnext_block(Tensor(x), p).data, expected, atol=1e-5)


# -- conv-norm-act -----------------------------------------------------------------------------

def test_conv_norm_act_trivial():
    s, p = store_for(nn.init_conv_norm_act, 4, 4, 1)
    p["conv.weight"].data[...] = np.eye(4).reshape(4, 4, 1, 1)
    x = Tensor(np.random.default_rng(16).standard_normal((2, 4, 3, 3)), dtype=np.float64)
    np.testing.assert_allclose(nn.conv_norm_act(x, p, "eval").data, np.maximum(x.data, 0) / np.sqrt(1 + 1e-5), atol=1e-12)
    p["conv.weight"].data[...] = 0.0
    p["bn.shift"].data[...] = [-1.0, 0.5, 0.0, 2.0]
    out = nn.conv_norm_act(x, p, "eval").data
    np.testing.assert_allclose(out, np.broadcast_to(np.array([0.0, 0.5, 0.0, 2.0])[None, :, None, None], out.shape))


def test_conv_norm_act_composition_oracle():
    s, p = store_for(nn.init_conv_norm_act, 3, 5, 3, dtype=np.float32)
    x = np.random.default_rng(17).standard_normal((2, 3, 6, 6))
    w = arr(p, "conv.weight")
    pad = np.zeros((2, 3, 8, 8))
    pad[:, :, 1:7, 1:7] = x
    y = np.zeros((2, 5, 6, 6))
    for n in range(2):
        for o in range(5):
            for i in range(6):
                for j in range(6):
                    y[n, o, i, j] = (w[o] * pad[n, :, i:i + 3, j:j + 3]).sum()
    mu = y.mean(axis=(0, 2, 3), keepdims=True)
    var = y.var(axis=(0, 2, 3), keepdims=True)
    expected = np.maximum((y - mu) / np.sqrt(var + 1e-5), 0)
    np.testing.assert_allclose(nn.conv_norm_act(Tensor(x), p, "train").data, expected, atol=1e-5)


# -- properties ------------------------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(st.integers(1, 2), st.sampled_from([8, 16]), st.integers(3, 9), st.integers(3, 9), st.integers(0, 999))
def test_block_shapes_and_gating_bounds(n, c, h, w, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.standard_normal((n, c, h, w)) * 3)
    with no_grad():
        _, se = store_for(nn.init_se, c, 4, dtype=np.float32, seed=seed)
        y = nn.se_forward(x, se).data
        assert y.shape == x.shape and np.all(np.abs(y) <= np.abs(x.data))
        _, cb = store_for(nn.init_cbam, c, 4, dtype=np.float32, seed=seed)
        y = nn.cbam_forward(x, cb).data
        assert y.shape == x.shape and np.all(np.abs(y) <= np.abs(x.data))
        _, g = store_for(nn.init_attention_gate, c, 8, dtype=np.float32, seed=seed)
        gate = Tensor(r.standard_normal((n, 8, h, w)))
        psi = nn.attention_coefficients(x, gate, g).data
        assert psi.shape == (n, 1, h, w) and np.all((psi > 0) & (psi < 1))
        y = nn.attention_gate(x, gate, g).data
        assert np.all(np.abs(y) <= np.abs(x.data))
        _, rx = store_for(nn.init_resnext, c, dtype=np.float32, seed=seed)
        assert nn.resnext_block(x, rx).shape == x.shape
        _, cna = store_for(nn.init_conv_norm_act, c, 4, 3, dtype=np.float32, seed=seed)
        assert nn.conv_norm_act(x, cna, "train").shape == (n, 4, h, w)
        _, tb = store_for(nn.init_transformer_block, 16, 16, dtype=np.float32, seed=seed)
        tok = Tensor(r.standard_normal((n, h, 16)))
        assert nn.transformer_block(tok, tb, mode="eval").shape == tok.shape

"""Reusable network blocks as pure functions over parameter scopes.

Each block has an ``init_*`` that registers its tensors under a scope and a
forward function that reads them back by relative name. Inputs are
NxCxHxW (or CxHxW) feature maps and Nxnxd (or nxd) token sequences.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError
from ..params import Scope, he_uniform
from ..tensor import (
    Rng,
    Tensor,
    add,
    amax,
    batch_norm,
    concat,
    conv2d,
    dropout,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    pool2d,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
)


def _zeros(*shape):
    return np.zeros(shape, dtype=np.float32)


def _ones(*shape):
    return np.ones(shape, dtype=np.float32)


def _channels(x: Tensor) -> int:
    return x.shape[-3]


# -- primitive layers ------------------------------------------------------------

def init_conv(p: Scope, rng: Rng, cin: int, cout: int, k: int, groups: int = 1, bias: bool = True) -> None:
    fan_in = (cin // groups) * k * k
    p.add("weight", he_uniform(rng, (cout, cin // groups, k, k), fan_in))
    if bias:
        p.add("bias", _zeros(cout))


def conv(x: Tensor, p: Scope, stride: int = 1, padding: int | None = None, groups: int = 1) -> Tensor:
    w = p["weight"]
    pad = w.shape[-1] // 2 if padding is None else padding
    return conv2d(x, w, p["bias"] if "bias" in p else None, stride=stride, padding=pad, groups=groups)


def init_linear(p: Scope, rng: Rng, din: int, dout: int, bias: bool = True) -> None:
    p.add("weight", he_uniform(rng, (dout, din), din))
    if bias:
        p.add("bias", _zeros(dout))


def dense(x: Tensor, p: Scope) -> Tensor:
    return linear(x, p["weight"], p["bias"] if "bias" in p else None)


def init_batch_norm(p: Scope, c: int) -> None:
    p.add("scale", _ones(c))
    p.add("shift", _zeros(c))
    p.add("running_mean", _zeros(c), trainable=False)
    p.add("running_var", _ones(c), trainable=False)


def norm(x: Tensor, p: Scope, mode: str) -> Tensor:
    return batch_norm(x, p["scale"], p["shift"], p["running_mean"], p["running_var"], mode=mode)


def _with_batch(fn, x: Tensor, *args, **kwargs) -> Tensor:
    if x.ndim == 3:
        out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
        return reshape(out, out.shape[1:])
    return fn(x, *args, **kwargs)


# -- conv -> batch norm -> relu ----------------------------------------------------

def init_conv_norm_act(p: Scope, rng: Rng, cin: int, cout: int, k: int = 3) -> None:
    init_conv(p.scope("conv"), rng, cin, cout, k, bias=False)
    init_batch_norm(p.scope("bn"), cout)


def conv_norm_act(x: Tensor, p: Scope, mode: str, stride: int = 1, act: bool = True) -> Tensor:
    def run(xb):
        y = norm(conv(xb, p.scope("conv"), stride=stride), p.scope("bn"), mode)
        return relu(y) if act else y

    return _with_batch(run, x)


# -- squeeze-and-excitation ----------------------------------------------------------

def init_se(p: Scope, rng: Rng, c: int, reduction: int = 16) -> None:
    if c % reduction:
        raise DimensionError(f"SE channels {c} not divisible by reduction {reduction}")
    hidden = c // reduction
    p.add("w1", he_uniform(rng, (hidden, c), c))
    p.add("w2", he_uniform(rng, (c, hidden), hidden))


def se_forward(x: Tensor, p: Scope) -> Tensor:
    c = _channels(x)
    w1, w2 = p["w1"], p["w2"]
    if w1.shape[1] != c:
        raise DimensionError(f"SE expects {w1.shape[1]} channels, input has {c}")
    lead = x.shape[:-3]
    z = reshape(pool2d("global_avg", x), lead + (c,))
    s = sigmoid(linear(relu(linear(z, w1)), w2))
    return mul(x, reshape(s, lead + (c, 1, 1)))


# -- CBAM: channel attention then spatial attention ------------------------

def init_cbam(p: Scope, rng: Rng, c: int, reduction: int = 16, spatial_kernel: int = 7) -> None:
    if c % reduction:
        raise DimensionError(f"CBAM channels {c} not divisible by reduction {reduction}")
    hidden = c // reduction
    p.add("mlp.w1", he_uniform(rng, (hidden, c), c))
    p.add("mlp.w2", he_uniform(rng, (c, hidden), hidden))
    init_conv(p.scope("spatial"), rng, 2, 1, spatial_kernel)


def cbam_channel_map(x: Tensor, p: Scope) -> Tensor:
    c = _channels(x)
    if p["mlp.w1"].shape[1] != c:
        raise DimensionError(f"CBAM expects {p['mlp.w1'].shape[1]} channels, input has {c}")
    lead = x.shape[:-3]

    def mlp(v):
        return linear(relu(linear(v, p["mlp.w1"])), p["mlp.w2"])

    avg = reshape(pool2d("global_avg", x), lead + (c,))
    mx = reshape(pool2d("global_max", x), lead + (c,))
    return reshape(sigmoid(add(mlp(avg), mlp(mx))), lead + (c, 1, 1))


def cbam_spatial_map(x: Tensor, p: Scope) -> Tensor:
    desc = concat([mean(x, axis=-3, keepdims=True), amax(x, axis=-3, keepdims=True)], axis=-3)
    return sigmoid(conv(desc, p.scope("spatial")))


def cbam_forward(x: Tensor, p: Scope) -> Tensor:
    x1 = mul(x, cbam_channel_map(x, p))
    return mul(x1, cbam_spatial_map(x1, p))


# -- additive attention gate on skip connections ----------------------------------

def gate_channels(c: int) -> int:
    return max(c // 2, 16)


def init_attention_gate(p: Scope, rng: Rng, c_skip: int, c_gate: int, c_int: int | None = None) -> None:
    c_int = gate_channels(c_skip) if c_int is None else c_int
    init_conv(p.scope("theta"), rng, c_skip, c_int, 1)
    init_conv(p.scope("phi"), rng, c_gate, c_int, 1)
    init_conv(p.scope("psi"), rng, c_int, 1, 1)


def attention_coefficients(skip: Tensor, gate: Tensor, p: Scope) -> Tensor:
    if skip.shape[-2:] != gate.shape[-2:] or skip.shape[:-3] != gate.shape[:-3]:
        raise DimensionError(f"attention gate spatial mismatch: skip {skip.shape}, gate {gate.shape}")
    a = relu(add(conv(skip, p.scope("theta")), conv(gate, p.scope("phi"))))
    return sigmoid(conv(a, p.scope("psi")))


def attention_gate(skip: Tensor, gate: Tensor, p: Scope) -> Tensor:
    return mul(skip, attention_coefficients(skip, gate, p))


# -- attention ----------------------------------------------------------------

def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shape mismatch: Q {q.shape}, K {k.shape}, V {v.shape}")
    scores = mul(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def init_mhsa(p: Scope, rng: Rng, d_model: int) -> None:
    for name in ("q", "k", "v", "o"):
        init_linear(p.scope(name), rng, d_model, d_model)


def mhsa(x: Tensor, p: Scope, heads: int = 8) -> Tensor:
    d = x.shape[-1]
    if p["q.weight"].shape[1] != d:
        raise DimensionError(f"MHSA expects d_model={p['q.weight'].shape[1]}, got {d}")
    if d % heads:
        raise DimensionError(f"d_model {d} not divisible by heads {heads}")
    dk = d // heads
    lead, n = x.shape[:-2], x.shape[-2]
    nl = len(lead)
    to_heads = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split(t):
        return transpose(reshape(t, lead + (n, heads, dk)), to_heads)

    q, k, v = (split(dense(x, p.scope(s))) for s in ("q", "k", "v"))
    att = scaled_dot_product_attention(q, k, v)
    merged = reshape(transpose(att, to_heads), lead + (n, d))
    return dense(merged, p.scope("o"))


# -- transformer block (post-norm) ----------------------------------------------

def init_transformer_block(p: Scope, rng: Rng, d_model: int, ffn: int) -> None:
    init_mhsa(p.scope("attn"), rng, d_model)
    init_linear(p.scope("ffn1"), rng, d_model, ffn)
    init_linear(p.scope("ffn2"), rng, ffn, d_model)
    for ln in ("ln1", "ln2"):
        p.add(f"{ln}.gamma", _ones(d_model))
        p.add(f"{ln}.beta", _zeros(d_model))


def transformer_block(x: Tensor, p: Scope, rng: Rng | None = None, mode: str = "eval",
                      heads: int = 8, drop: float = 0.1) -> Tensor:
    a = dropout(mhsa(x, p.scope("attn"), heads), drop, mode, rng)
    h = layer_norm(add(x, a), p["ln1.gamma"], p["ln1.beta"])
    f = dense(relu(dense(h, p.scope("ffn1"))), p.scope("ffn2"))
    f = dropout(f, drop, mode, rng)
    return layer_norm(add(h, f), p["ln2.gamma"], p["ln2.beta"])


# -- ResNeXt-style decoder block ---------------------------------------------------

def init_resnext(p: Scope, rng: Rng, cin: int, cout: int | None = None) -> None:
    cout = cin if cout is None else cout
    mid = max(cin // 2, 1)
    init_conv(p.scope("reduce"), rng, cin, mid, 1)
    init_conv(p.scope("depthwise"), rng, mid, mid, 3, groups=mid)
    init_conv(p.scope("expand"), rng, mid, cout, 1)
    if cout != cin:
        init_conv(p.scope("shortcut"), rng, cin, cout, 1)


def resnext_block(x: Tensor, p: Scope) -> Tensor:
    if p["reduce.weight"].shape[1] != _channels(x):
        raise DimensionError(f"ResNeXt expects {p['reduce.weight'].shape[1]} channels, got {_channels(x)}")
    mid = p["reduce.weight"].shape[0]
    y = relu(conv(x, p.scope("reduce")))
    y = conv(y, p.scope("depthwise"), padding=1, groups=mid)
    y = conv(y, p.scope("expand"))
    short = conv(x, p.scope("shortcut")) if "shortcut.weight" in p else x
    return relu(add(short, y))


# -- ResNet-50 bottleneck residual block (encoder) ---------------------------------

def init_bottleneck(p: Scope, rng: Rng, cin: int, mid: int, cout: int, stride: int) -> None:
    init_conv_norm_act(p.scope("conv1"), rng, cin, mid, 1)
    init_conv_norm_act(p.scope("conv2"), rng, mid, mid, 3)
    init_conv_norm_act(p.scope("conv3"), rng, mid, cout, 1)
    if stride != 1 or cin != cout:
        init_conv_norm_act(p.scope("down"), rng, cin, cout, 1)


def bottleneck(x: Tensor, p: Scope, mode: str, stride: int) -> Tensor:
    y = conv_norm_act(x, p.scope("conv1"), mode)
    y = conv_norm_act(y, p.scope("conv2"), mode, stride=stride)
    y = conv_norm_act(y, p.scope("conv3"), mode, act=False)
    short = conv_norm_act(x, p.scope("down"), mode, stride=stride, act=False) if "down.conv.weight" in p else x
    return relu(add(y, short))

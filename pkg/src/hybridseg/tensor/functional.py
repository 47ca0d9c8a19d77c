"""Fused numeric kernels with hand-written backward passes.

Convolutions use an explicit im2col/col2im pair whose accumulation loops
run in a fixed kernel-offset order, so results do not depend on thread
count beyond what the BLAS gemm itself does.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DimensionError, UsageError
from .core import Tensor, amax, as_tensor, mean, reshape
from .rng import Rng

BN_EPS = 1e-5
LN_EPS = 1e-5


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ConvSpec.{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ConfigError(f"ConvSpec.padding must be non-negative, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    @property
    def transpose_weight_shape(self) -> tuple[int, int, int, int]:
        return (self.in_channels, self.out_channels // self.groups, self.kernel_h, self.kernel_w)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return (
            _out_size(h, self.kernel_h, self.stride, self.padding),
            _out_size(w, self.kernel_w, self.stride, self.padding),
        )


def _out_size(n: int, k: int, s: int, p: int) -> int:
    if n + 2 * p < k:
        raise ConfigError(f"kernel {k} larger than padded input {n + 2 * p}")
    return (n + 2 * p - k) // s + 1


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected a CxHxW or NxCxHxW tensor, got shape {x.shape}")


def _unbatch(out: Tensor, squeeze: bool) -> Tensor:
    return reshape(out, out.shape[1:]) if squeeze else out


def _pad(a: np.ndarray, p: int, value=0.0) -> np.ndarray:
    if p == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(p, p), (p, p)]
    return np.pad(a, width, constant_values=value)


def _window(i: int, n_out: int, s: int) -> slice:
    return slice(i, i + s * (n_out - 1) + 1, s)


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, _window(i, ho, s), _window(j, wo, s)]
    return cols


def _col2im(cols: np.ndarray, hp: int, wp: int, s: int) -> np.ndarray:
    n, c, kh, kw, ho, wo = cols.shape
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, _window(i, ho, s), _window(j, wo, s)] += cols[:, :, i, j]
    return xp


def _crop(a: np.ndarray, p: int) -> np.ndarray:
    return a if p == 0 else a[:, :, p:-p, p:-p]


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           groups: int = 1, spec: ConvSpec | None = None) -> Tensor:
    """Grouped 2D cross-correlation over CxHxW or NxCxHxW input."""
    if spec is not None:
        stride, padding, groups = spec.stride, spec.padding, spec.groups
        if tuple(w.shape) != spec.weight_shape:
            raise DimensionError(f"weight shape {w.shape} does not match spec {spec.weight_shape}")
    x = as_tensor(x)
    xb, squeeze = _batched(x)
    n, c, h, wd = xb.shape
    o, cg, kh, kw = w.shape
    if cg * groups != c or o % groups:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape}, weight {w.shape}, groups={groups}"
        )
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({o},)")
    ho = _out_size(h, kh, stride, padding)
    wo = _out_size(wd, kw, stride, padding)
    xp = _pad(xb.data, padding)
    wdat = w.data
    og = o // groups

    depthwise = cg == 1 and groups == c and o == c
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0 and groups == 1

    if depthwise:
        out = np.zeros((n, c, ho, wo), dtype=np.result_type(xp, wdat))
        for i in range(kh):
            for j in range(kw):
                out += xp[:, :, _window(i, ho, stride), _window(j, wo, stride)] * wdat[:, 0, i, j][None, :, None, None]
        cols = None
    else:
        if pointwise:
            cols = xp.reshape(n, c, 1, 1, h, wd)
        else:
            cols = _im2col(xp, kh, kw, stride, ho, wo)
        colm = cols.reshape(n, c * kh * kw, ho * wo)
        k_g = cg * kh * kw
        wm = wdat.reshape(o, k_g)
        if groups == 1:
            out = np.matmul(wm, colm)
        else:
            out = np.empty((n, o, ho * wo), dtype=np.result_type(xp, wdat))
            for gi in range(groups):
                out[:, gi * og:(gi + 1) * og] = np.matmul(wm[gi * og:(gi + 1) * og], colm[:, gi * k_g:(gi + 1) * k_g])
        out = out.reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.dtype)
        if depthwise:
            if w.requires_grad:
                gw = np.zeros_like(wdat)
                for i in range(kh):
                    for j in range(kw):
                        win = xp[:, :, _window(i, ho, stride), _window(j, wo, stride)]
                        gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, win)
            if xb.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, _window(i, ho, stride), _window(j, wo, stride)] += g * wdat[:, 0, i, j][None, :, None, None]
                gx = _crop(gxp, padding)
            return gx, gw, gb
        gm = g.reshape(n, o, ho * wo)
        k_g = cg * kh * kw
        wm = wdat.reshape(o, k_g)
        colm = cols.reshape(n, c * kh * kw, ho * wo)
        if w.requires_grad:
            gwm = np.empty_like(wm)
            for gi in range(groups):
                per = np.matmul(gm[:, gi * og:(gi + 1) * og], colm[:, gi * k_g:(gi + 1) * k_g].transpose(0, 2, 1))
                gwm[gi * og:(gi + 1) * og] = per.sum(axis=0)
            gw = gwm.reshape(w.shape)
        if xb.requires_grad:
            if groups == 1:
                gcol = np.matmul(wm.T, gm)
            else:
                gcol = np.empty((n, c * kh * kw, ho * wo), dtype=gm.dtype)
                for gi in range(groups):
                    gcol[:, gi * k_g:(gi + 1) * k_g] = np.matmul(wm[gi * og:(gi + 1) * og].T, gm[:, gi * og:(gi + 1) * og])
            if pointwise:
                gx = gcol.reshape(n, c, h, wd)
            else:
                gxp = _col2im(gcol.reshape(n, c, kh, kw, ho, wo), xp.shape[2], xp.shape[3], stride)
                gx = _crop(gxp, padding)
        return gx, gw, gb

    parents = (xb, w) if bias is None else (xb, w, bias)
    res = Tensor._make(out, parents, bw, "conv2d")
    return _unbatch(res, squeeze)


def transpose_conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, spec: ConvSpec | None = None) -> Tensor:
    """Adjoint of :func:`conv2d`; weight laid out as (C_in, C_out, kh, kw)."""
    if spec is not None:
        stride, padding = spec.stride, spec.padding
        if spec.groups != 1:
            raise ConfigError("transpose_conv2d supports groups=1 only")
        if tuple(w.shape) != spec.transpose_weight_shape:
            raise DimensionError(f"weight shape {w.shape} does not match spec {spec.transpose_weight_shape}")
    x = as_tensor(x)
    xb, squeeze = _batched(x)
    n, ci, h, wd = xb.shape
    if w.ndim != 4 or w.shape[0] != ci:
        raise DimensionError(f"transpose_conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    _, o, kh, kw = w.shape
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"transpose_conv2d bias shape {bias.shape} != ({o},)")
    hp = (h - 1) * stride + kh
    wp = (wd - 1) * stride + kw
    if hp - 2 * padding < 1 or wp - 2 * padding < 1:
        raise ConfigError(f"padding {padding} leaves no output for input {x.shape}")
    xm = xb.data.reshape(n, ci, h * wd)
    wm = w.data.reshape(ci, o * kh * kw)
    cols = np.matmul(wm.T, xm).reshape(n, o, kh, kw, h, wd)
    out = _crop(_col2im(cols, hp, wp, stride), padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.dtype)
        gcols = _im2col(_pad(g, padding), kh, kw, stride, h, wd).reshape(n, o * kh * kw, h * wd)
        if xb.requires_grad:
            gx = np.matmul(wm, gcols).reshape(xb.shape)
        if w.requires_grad:
            gw = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        return gx, gw, gb

    parents = (xb, w) if bias is None else (xb, w, bias)
    res = Tensor._make(out, parents, bw, "transpose_conv2d")
    return _unbatch(res, squeeze)


def pool2d(kind: str, x: Tensor, window: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    """max / avg / global_avg / global_max pooling over the last two axes."""
    if kind == "global_avg":
        return mean(x, axis=(-2, -1), keepdims=True)
    if kind == "global_max":
        lead = x.shape[:-2]
        flat = reshape(x, lead + (x.shape[-2] * x.shape[-1],))
        return reshape(amax(flat, axis=-1, keepdims=True), lead + (1, 1))
    if kind not in ("max", "avg"):
        raise UsageError(f"unknown pool kind {kind!r}")
    stride = stride or window
    h, wd = x.shape[-2:]
    ho = _out_size(h, window, stride, padding)
    wo = _out_size(wd, window, stride, padding)
    xp = _pad(x.data, padding, -np.inf if kind == "max" else 0.0)
    offsets = [(i, j) for i in range(window) for j in range(window)]

    if kind == "avg":
        acc = np.zeros(x.shape[:-2] + (ho, wo), dtype=np.float64)
        for i, j in offsets:
            acc += xp[..., _window(i, ho, stride), _window(j, wo, stride)]
        out = (acc / len(offsets)).astype(x.dtype)

        def bw_avg(g):
            gxp = np.zeros_like(xp)
            share = g / len(offsets)
            for i, j in offsets:
                gxp[..., _window(i, ho, stride), _window(j, wo, stride)] += share
            return (gxp[..., padding:padding + h, padding:padding + wd],)

        return Tensor._make(out, (x,), bw_avg, "pool2d")

    best = None
    arg = np.zeros(x.shape[:-2] + (ho, wo), dtype=np.int16)
    for k, (i, j) in enumerate(offsets):
        v = xp[..., _window(i, ho, stride), _window(j, wo, stride)]
        if best is None:
            best = v.copy()
        else:
            better = v > best
            best[better] = v[better]
            arg[better] = k
    out = best

    def bw_max(g):
        gxp = np.zeros_like(xp)
        for k, (i, j) in enumerate(offsets):
            gxp[..., _window(i, ho, stride), _window(j, wo, stride)] += g * (arg == k)
        return (gxp[..., padding:padding + h, padding:padding + wd],)

    return Tensor._make(out, (x,), bw_max, "pool2d")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    out = (e / total).astype(x.dtype)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (out * (g - dot),)

    return Tensor._make(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the per-feature affine map."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm params {gamma.shape}/{beta.shape} do not match last axis {d}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    dtype = np.result_type(x.data, gamma.data, beta.data)
    out = (xhat * gamma.data + beta.data).astype(dtype)

    def bw(g):
        gd = g.astype(np.float64)
        lead = tuple(range(g.ndim - 1))
        ggamma = (gd * xhat).sum(axis=lead).astype(gamma.dtype) if gamma.requires_grad else None
        gbeta = gd.sum(axis=lead).astype(beta.dtype) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = gd * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            gx = gx.astype(x.dtype)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), bw, "layer_norm")


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: Tensor, running_var: Tensor,
               mode: str = "train", momentum: float = 0.1, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization of an NxCxHxW tensor.

    In train mode the batch statistics (biased variance) normalize the
    input and are blended into the running buffers in place.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects NxCxHxW, got {x.shape}")
    c = x.shape[1]
    for name, t in (("scale", scale), ("shift", shift), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise DimensionError(f"batch_norm {name} shape {t.shape} != ({c},)")
    dtype = np.result_type(x.data, scale.data)
    bshape = (1, c, 1, 1)
    axes = (0, 2, 3)
    if mode == "train":
        xd = x.data.astype(np.float64)
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        count = x.size // c
        running_mean.data = ((1.0 - momentum) * running_mean.data + momentum * mu.reshape(c)).astype(running_mean.dtype)
        running_var.data = ((1.0 - momentum) * running_var.data + momentum * var.reshape(c)).astype(running_var.dtype)
    elif mode == "eval":
        inv = 1.0 / np.sqrt(running_var.data.astype(np.float64).reshape(bshape) + eps)
        xhat = (x.data.astype(np.float64) - running_mean.data.reshape(bshape)) * inv
    else:
        raise UsageError(f"unknown mode {mode!r}")
    sc = scale.data.reshape(bshape)
    out = (xhat * sc + shift.data.reshape(bshape)).astype(dtype)

    def bw(g):
        gd = g.astype(np.float64)
        gscale = (gd * xhat).sum(axis=axes).astype(scale.dtype) if scale.requires_grad else None
        gshift = gd.sum(axis=axes).astype(shift.dtype) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            if mode == "train":
                gsum = gd.sum(axis=axes, keepdims=True)
                gxs = (gd * xhat).sum(axis=axes, keepdims=True)
                gx = (sc * inv / count) * (count * gd - gsum - xhat * gxs)
            else:
                gx = gd * sc * inv
            gx = gx.astype(x.dtype)
        return gx, gscale, gshift

    return Tensor._make(out, (x, scale, shift), bw, "batch_norm")


def dropout(x: Tensor, p: float, mode: str = "train", rng: Rng | None = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise UsageError(f"dropout probability must be in [0, 1), got {p}")
    if mode != "train" or p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in train mode needs an Rng")
    keep = rng.random(x.shape, dtype=np.float32) >= p
    scale = 1.0 / (1.0 - p)
    mask = keep.astype(x.dtype) * x.dtype.type(scale)
    out = x.data * mask
    return Tensor._make(out, (x,), lambda g: (g * mask,), "dropout")

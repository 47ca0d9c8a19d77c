"""Hybrid CNN-transformer segmentation network.

Encoder: ResNet-50 stem and stages 2-4 (bottleneck blocks), each stage
output refined by SE then CBAM and emitted as a skip tap. Bottleneck: the
deepest tap flattened to position tokens and run through transformer
blocks. Decoder: four x2 transpose-conv upsamplings; the first three fuse a
CBAM-refined, attention-gated skip by concatenation, followed by
conv-norm-act, SE and a ResNeXt block. A 1x1 conv and sigmoid give the mask.

Ablation variants switch the attention machinery off feature by feature;
with everything off the decoder falls back to two conv-norm-act layers per
stage, i.e. a plain U-Net on the same ResNet encoder.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import nn
from .errors import ConfigError, DimensionError, LoadError
from .params import ParameterStore, Scope, he_uniform
from .tensor import Rng, Tensor, add, concat, pool2d, reshape, sigmoid, transpose, transpose_conv2d
from .tensor.functional import _out_size


@dataclass(frozen=True)
class ModelConfig:
    name: str = "desk"
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    tap_channels: tuple[int, ...] = (8, 32, 64, 128)
    stage_blocks: tuple[int, ...] = (3, 4, 6)
    heads: int = 8
    ffn: int = 128
    transformer_blocks: int = 4
    dropout: float = 0.1
    decoder_channels: tuple[int, ...] = (64, 64, 64, 64)
    se_reduction: int = 4
    use_se: bool = True
    use_cbam: bool = True
    use_gate: bool = True
    use_resnext: bool = True
    use_transformer: bool = True
    pos_embed: bool = True

    @property
    def d_model(self) -> int:
        return self.tap_channels[-1]

    @property
    def token_grid(self) -> tuple[int, int]:
        return _deepest_grid(self.input_size)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError(f"unknown model config keys: {', '.join(bad)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> "ModelConfig":
        problems = []
        h, w = self.input_size
        if h < 32 or w < 32 or h % 16 or w % 16:
            problems.append(f"input_size {self.input_size} must be multiples of 16, at least 32")
        if len(self.tap_channels) != 4 or len(self.decoder_channels) != 4:
            problems.append("tap_channels and decoder_channels need exactly 4 entries")
        if len(self.stage_blocks) != 3 or min(self.stage_blocks, default=0) < 1:
            problems.append("stage_blocks needs 3 positive entries (stages 2-4)")
        if any(c % 4 for c in self.tap_channels[1:]):
            problems.append("stage tap channels must be divisible by 4 (bottleneck width)")
        r = self.se_reduction
        refined = list(self.tap_channels) + list(self.decoder_channels)
        if (self.use_se or self.use_cbam) and any(c % r for c in refined):
            problems.append(f"se_reduction {r} must divide every tap and decoder width")
        if self.d_model % self.heads:
            problems.append(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout {self.dropout} outside [0, 1)")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self


FULL = ModelConfig(
    name="full", input_size=(512, 512), tap_channels=(64, 256, 512, 1024), ffn=1024,
    decoder_channels=(512, 256, 64, 32), se_reduction=16,
)
DESK = ModelConfig()

PRESETS = {
    "full": FULL,
    "desk": DESK,
    "hybrid": dataclasses.replace(DESK, name="hybrid"),
    "bottleneck_only": dataclasses.replace(
        DESK, name="bottleneck_only", use_se=False, use_cbam=False, use_gate=False, use_resnext=False),
    "baseline": dataclasses.replace(
        DESK, name="baseline", use_se=False, use_cbam=False, use_gate=False, use_resnext=False,
        use_transformer=False, pos_embed=False),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown architecture {name!r}; choose from {', '.join(PRESETS)}")
    return dataclasses.replace(PRESETS[name], **overrides).validate()


# -- closed-form shapes --------------------------------------------------------------

def _stem_size(s: int) -> int:
    return _out_size(s, 7, 2, 3)


def _pool_size(s: int) -> int:
    return _out_size(s, 3, 2, 1)


def _deepest_grid(size) -> tuple[int, int]:
    out = []
    for s in size:
        s = _pool_size(_stem_size(s))
        s = _out_size(s, 3, 2, 1)
        out.append(_out_size(s, 3, 2, 1))
    return tuple(out)


def feature_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Per-sample (C, H, W) shapes of every named stage, from the conv size formula."""
    h, w = config.input_size
    c = config.tap_channels
    sizes = [(_stem_size(h), _stem_size(w))]
    s = (_pool_size(sizes[0][0]), _pool_size(sizes[0][1]))
    sizes.append(s)
    for _ in range(2):
        s = (_out_size(s[0], 3, 2, 1), _out_size(s[1], 3, 2, 1))
        sizes.append(s)
    shapes = {f"tap{i + 1}": (c[i],) + sizes[i] for i in range(4)}
    gh, gw = sizes[3]
    shapes["tokens"] = (gh * gw, config.d_model)
    shapes["bottleneck"] = (config.d_model, gh, gw)
    for i, cd in enumerate(config.decoder_channels):
        gh, gw = (gh - 1) * 2 + 2, (gw - 1) * 2 + 2
        shapes[f"decoder{i + 1}"] = (cd, gh, gw)
    shapes["output"] = (1, gh, gw)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    """Trainable parameter count by config arithmetic (no tensors allocated)."""
    cfg = config
    conv = lambda cin, cout, k, bias=True, g=1: (cin // g) * cout * k * k + (cout if bias else 0)
    cna = lambda cin, cout, k: conv(cin, cout, k, bias=False) + 2 * cout
    se = lambda ch: 2 * ch * (ch // cfg.se_reduction)
    cbam = lambda ch: se(ch) + conv(2, 1, 7)
    refine = lambda ch: (se(ch) if cfg.use_se else 0) + (cbam(ch) if cfg.use_cbam else 0)

    n = cna(cfg.in_channels, cfg.tap_channels[0], 7) + refine(cfg.tap_channels[0])
    cin = cfg.tap_channels[0]
    for blocks, cout in zip(cfg.stage_blocks, cfg.tap_channels[1:]):
        mid = cout // 4
        for b in range(blocks):
            n += cna(cin, mid, 1) + cna(mid, mid, 3) + cna(mid, cout, 1)
            if b == 0:
                n += cna(cin, cout, 1)
            cin = cout
        n += refine(cout)
    d = cfg.d_model
    if cfg.use_transformer:
        blk = 4 * (d * d + d) + (d * cfg.ffn + cfg.ffn) + (cfg.ffn * d + d) + 4 * d
        n += cfg.transformer_blocks * blk
        if cfg.pos_embed:
            gh, gw = cfg.token_grid
            n += gh * gw * d
    cin = d
    skips = list(reversed(cfg.tap_channels[:3])) + [0]
    for cout, cs in zip(cfg.decoder_channels, skips):
        n += conv(cin, cout, 2)
        if cs:
            if cfg.use_cbam:
                n += cbam(cs)
            if cfg.use_gate:
                ci = nn.gate_channels(cs)
                n += conv(cs, ci, 1) + conv(cout, ci, 1) + conv(ci, 1, 1)
        n += cna(cout + cs, cout, 3)
        if cfg.use_se:
            n += se(cout)
        if cfg.use_resnext:
            mid = max(cout // 2, 1)
            n += conv(cout, mid, 1) + conv(mid, mid, 3, g=mid) + conv(mid, cout, 1)
        else:
            n += cna(cout, cout, 3)
        cin = cout
    return n + conv(cin, 1, 1)


# -- construction -------------------------------------------------------------------

def _init_refine(p: Scope, rng: Rng, c: int, cfg: ModelConfig) -> None:
    if cfg.use_se:
        nn.init_se(p.scope("se"), rng, c, cfg.se_reduction)
    if cfg.use_cbam:
        nn.init_cbam(p.scope("cbam"), rng, c, cfg.se_reduction)


def _refine(x: Tensor, p: Scope, cfg: ModelConfig) -> Tensor:
    if cfg.use_se:
        x = nn.se_forward(x, p.scope("se"))
    if cfg.use_cbam:
        x = nn.cbam_forward(x, p.scope("cbam"))
    return x


def build_model(config: ModelConfig, rng: Rng) -> ParameterStore:
    """Create every parameter of ``config`` with a fixed, name-independent draw order."""
    cfg = config.validate()
    store = ParameterStore(cfg)
    enc = store.scope("encoder")
    c0 = cfg.tap_channels[0]
    nn.init_conv_norm_act(enc.scope("stem"), rng, cfg.in_channels, c0, 7)
    _init_refine(enc.scope("stem"), rng, c0, cfg)
    cin = c0
    for s, (blocks, cout) in enumerate(zip(cfg.stage_blocks, cfg.tap_channels[1:]), start=2):
        stage = enc.scope(f"stage{s}")
        for b in range(blocks):
            stride = 2 if (b == 0 and s > 2) else 1
            nn.init_bottleneck(stage.scope(f"block{b + 1}"), rng, cin, cout // 4, cout, stride)
            cin = cout
        _init_refine(stage, rng, cout, cfg)

    if cfg.use_transformer:
        bott = store.scope("bottleneck")
        if cfg.pos_embed:
            gh, gw = cfg.token_grid
            bott.add("pos_embed", np.zeros((gh * gw, cfg.d_model), dtype=np.float32))
        for i in range(cfg.transformer_blocks):
            nn.init_transformer_block(bott.scope(f"block{i + 1}"), rng, cfg.d_model, cfg.ffn)

    dec = store.scope("decoder")
    cin = cfg.d_model
    skips = list(reversed(cfg.tap_channels[:3])) + [0]
    for i, (cout, cs) in enumerate(zip(cfg.decoder_channels, skips), start=1):
        st = dec.scope(f"stage{i}")
        # each output pixel of a k=2,s=2 transpose conv sees exactly cin inputs
        st.add("up.weight", he_uniform(rng, (cin, cout, 2, 2), cin))
        st.add("up.bias", np.zeros(cout, dtype=np.float32))
        if cs:
            if cfg.use_cbam:
                nn.init_cbam(st.scope("skip_cbam"), rng, cs, cfg.se_reduction)
            if cfg.use_gate:
                nn.init_attention_gate(st.scope("gate"), rng, cs, cout)
        nn.init_conv_norm_act(st.scope("fuse"), rng, cout + cs, cout, 3)
        if cfg.use_se:
            nn.init_se(st.scope("se"), rng, cout, cfg.se_reduction)
        if cfg.use_resnext:
            nn.init_resnext(st.scope("resnext"), rng, cout)
        else:
            nn.init_conv_norm_act(st.scope("conv2"), rng, cout, cout, 3)
        cin = cout
    nn.init_conv(store.scope("head"), rng, cin, 1, 1)
    return store


# -- forward ---------------------------------------------------------------------------

def _batched(x, cfg: ModelConfig) -> tuple[Tensor, bool]:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32))
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
        squeeze = True
    elif x.ndim == 4:
        squeeze = False
    else:
        raise DimensionError(f"model input must be CxHxW or NxCxHxW, got {x.shape}")
    want = (cfg.in_channels,) + tuple(cfg.input_size)
    if tuple(x.shape[1:]) != want:
        raise DimensionError(f"model input {tuple(x.shape[1:])} does not match configured {want}")
    return x, squeeze


def encoder_forward(x: Tensor, params: ParameterStore, mode: str) -> list[Tensor]:
    """Four taps at strides 2, 4, 8, 16 (batched NxCxHxW)."""
    cfg = params.config
    enc = params.scope("encoder")
    y = nn.conv_norm_act(x, enc.scope("stem"), mode, stride=2)
    y = _refine(y, enc.scope("stem"), cfg)
    taps = [y]
    y = pool2d("max", y, window=3, stride=2, padding=1)
    for s, blocks in enumerate(cfg.stage_blocks, start=2):
        stage = enc.scope(f"stage{s}")
        for b in range(blocks):
            y = nn.bottleneck(y, stage.scope(f"block{b + 1}"), mode, 2 if (b == 0 and s > 2) else 1)
        y = _refine(y, stage, cfg)
        taps.append(y)
    return taps


def to_tokens(x: Tensor) -> Tensor:
    # position (i, j) becomes token i*w + j
    n, c, h, w = x.shape
    return transpose(reshape(x, (n, c, h * w)), (0, 2, 1))


def from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    n, _, c = t.shape
    return reshape(transpose(t, (0, 2, 1)), (n, c, h, w))


def bottleneck_forward(tap4: Tensor, params: ParameterStore, rng: Rng | None, mode: str) -> Tensor:
    cfg = params.config
    x = tap4 if tap4.ndim == 4 else reshape(tap4, (1,) + tap4.shape)
    if x.shape[1] != cfg.d_model:
        raise DimensionError(f"bottleneck expects {cfg.d_model} channels, got {x.shape[1]}")
    if not cfg.use_transformer:
        return tap4
    _, _, h, w = x.shape
    tokens = to_tokens(x)
    p = params.scope("bottleneck")
    if cfg.pos_embed:
        if p["pos_embed"].shape[0] != h * w:
            raise DimensionError(f"positional table has {p['pos_embed'].shape[0]} rows for {h * w} tokens")
        tokens = add(tokens, p["pos_embed"])
    for i in range(cfg.transformer_blocks):
        tokens = nn.transformer_block(tokens, p.scope(f"block{i + 1}"), rng=rng, mode=mode,
                                      heads=cfg.heads, drop=cfg.dropout)
    out = from_tokens(tokens, h, w)
    return out if tap4.ndim == 4 else reshape(out, out.shape[1:])


def decoder_forward(bottleneck_out: Tensor, taps: list[Tensor], params: ParameterStore,
                    rng: Rng | None, mode: str) -> Tensor:
    cfg = params.config
    dec = params.scope("decoder")
    y = bottleneck_out
    skips = [taps[2], taps[1], taps[0], None]
    for i, skip in enumerate(skips, start=1):
        st = dec.scope(f"stage{i}")
        y = transpose_conv2d(y, st["up.weight"], st["up.bias"], stride=2)
        if skip is not None:
            if skip.shape[-2:] != y.shape[-2:]:
                raise DimensionError(f"decoder stage {i}: skip {skip.shape} vs upsampled {y.shape}")
            if cfg.use_cbam:
                skip = nn.cbam_forward(skip, st.scope("skip_cbam"))
            if cfg.use_gate:
                skip = nn.attention_gate(skip, y, st.scope("gate"))
            y = concat([y, skip], axis=1)
        y = nn.conv_norm_act(y, st.scope("fuse"), mode)
        if cfg.use_se:
            y = nn.se_forward(y, st.scope("se"))
        if cfg.use_resnext:
            y = nn.resnext_block(y, st.scope("resnext"))
        else:
            y = nn.conv_norm_act(y, st.scope("conv2"), mode)
    return sigmoid(nn.conv(y, params.scope("head")))


def model_forward(x: Tensor, params: ParameterStore, rng: Rng | None = None, mode: str = "eval") -> Tensor:
    """Probability map 1xHxW (or Nx1xHxW for batched input)."""
    cfg = params.config
    xb, squeeze = _batched(x, cfg)
    taps = encoder_forward(xb, params, mode)
    b = bottleneck_forward(taps[3], params, rng, mode)
    out = decoder_forward(b, taps, params, rng, mode)
    return reshape(out, out.shape[1:]) if squeeze else out


# -- weight import/export ------------------------------------------------------------

@dataclass
class ImportReport:
    loaded: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    mismatched: list[str] = field(default_factory=list)


def export_weights(params: ParameterStore) -> dict[str, np.ndarray]:
    from .nta import pack_json

    out = {f"model/{n}": params[n].data for n in params}
    if params.config is not None:
        out["meta/model_config"] = pack_json(params.config.to_dict())
    return out


def import_weights(params: ParameterStore, archive: Mapping[str, np.ndarray], policy: str = "strict") -> ImportReport:
    """Copy matching tensors from ``archive`` into ``params`` in place.

    Archive names may carry a ``model/`` prefix; other reserved prefixes
    (``opt/``, ``meta/``) are ignored. Under ``strict`` every parameter must
    be present with the right shape and no unknown tensor may appear;
    nothing is modified if the check fails.
    """
    if policy not in ("strict", "by_name_subset"):
        raise ConfigError(f"unknown import policy {policy!r}")
    incoming = {}
    for name, arr in archive.items():
        if name.startswith(("opt/", "meta/")):
            continue
        incoming[name[len("model/"):] if name.startswith("model/") else name] = np.asarray(arr)

    report = ImportReport()
    plan = []
    for name, arr in incoming.items():
        if name not in params:
            report.skipped.append(name)
            if policy == "strict":
                raise LoadError(f"archive tensor {name!r} has no matching parameter")
        elif params[name].shape != arr.shape:
            report.mismatched.append(name)
            if policy == "strict":
                raise LoadError(f"tensor {name!r}: archive shape {arr.shape} != parameter shape {params[name].shape}")
        else:
            plan.append(name)
    if policy == "strict":
        missing = [n for n in params if n not in incoming]
        if missing:
            raise LoadError(f"archive is missing tensor {missing[0]!r} ({len(missing)} missing in total)")
    for name in plan:
        t = params[name]
        t.data = incoming[name].astype(t.dtype, copy=True)
        report.loaded.append(name)
    return report

"""Central finite-difference gradient checking.

All evaluation happens in float64. The error measure for one coordinate
is ``|analytic - numeric| / (|analytic| + |numeric| + 1e-8)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Rng, Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    coordinates: int
    tolerance: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        # a check that could not sample enough smooth coordinates proves nothing
        return bool(self.max_rel_error < self.tolerance and self.coordinates > self.skipped)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:g}, {self.coordinates} coords, {self.skipped} kinks skipped)")


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-8)


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    rng: Rng,
    samples_per_tensor: int = 6,
    h: float = 1e-3,
    name: str = "fn",
    tolerance: float = 1e-4,
    kink_guard: bool = True,
) -> GradCheckResult:
    """Compare backprop against central differences on sampled coordinates.

    ``fn`` must rebuild the scalar loss from the current contents of
    ``tensors`` on each call, and must be deterministic.

    With ``kink_guard`` each coordinate is also differenced at ``h/10``.
    When the two estimates disagree the interval straddles a ReLU or max
    kink, so the coordinate is skipped and another one drawn.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def central(flat, idx, step):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = float(fn().data.sum())
        flat[idx] = orig - step
        fm = float(fn().data.sum())
        flat[idx] = orig
        return (fp - fm) / (2.0 * step)

    worst = 0.0
    count = skipped = 0
    with no_grad():
        for t, ga in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            want = min(samples_per_tensor, flat.size)
            taken = 0
            for idx in rng.permutation(flat.size):
                if taken == want:
                    break
                numeric = central(flat, idx, h)
                if kink_guard and rel_error(numeric, central(flat, idx, h / 10)) > 1e-3:
                    skipped += 1
                    continue
                worst = max(worst, rel_error(float(gflat[idx]), numeric))
                taken += 1
            count += taken
    return GradCheckResult(name, worst, count, tolerance, skipped)


# -- block-level suite ------------------------------------------------------------

def _block_cases():
    # imported lazily: the suite sits above nn in the dependency order
    from . import nn
    from .params import ParameterStore
    from .tensor import sum_, mul

    def make(init, init_args, fwd, in_shapes, seed, mode="eval"):
        r = np.random.default_rng(seed)
        store = ParameterStore()
        init(store.scope("b"), Rng(seed), *init_args)
        store = store.astype(np.float64)
        for n in store:
            t = store[n]
            if n.endswith("bias") or n.endswith("beta") or n.endswith("shift"):
                # non-zero offsets so their gradients are exercised away from 0
                t.data[...] = r.standard_normal(t.shape) * 0.1
        p = store.scope("b")
        inputs = [Tensor(r.standard_normal(s), requires_grad=True, dtype=np.float64) for s in in_shapes]
        out_shape = fwd(p, *inputs).shape
        proj = Tensor(r.standard_normal(out_shape), dtype=np.float64)

        def loss():
            return sum_(mul(fwd(p, *inputs), proj))

        # the key bias shifts every score in a row equally, so softmax makes its
        # gradient identically zero; sampling it would only measure FD noise
        params = [store[n] for n in store.trainable() if not n.endswith("k.bias")]
        return loss, inputs + params

    def sizes(seed):
        r = np.random.default_rng(1000 + seed)
        return int(r.integers(1, 3)), int(r.integers(4, 7)), int(r.integers(4, 7))

    cases = {}

    def se(seed):
        n, h, w = sizes(seed)
        return make(nn.init_se, (8, 4), lambda p, x: nn.se_forward(x, p), [(n, 8, h, w)], seed)

    def cbam(seed):
        n, h, w = sizes(seed)
        return make(nn.init_cbam, (8, 4), lambda p, x: nn.cbam_forward(x, p), [(n, 8, h, w)], seed)

    def gate(seed):
        n, h, w = sizes(seed)
        return make(nn.init_attention_gate, (6, 10), lambda p, s, g: nn.attention_gate(s, g, p),
                    [(n, 6, h, w), (n, 10, h, w)], seed)

    def sdpa(seed):
        n, h, w = sizes(seed)
        return make(lambda p, rng: None, (), lambda p, q, k, v: nn.scaled_dot_product_attention(q, k, v),
                    [(h, 4), (w, 4), (w, 3)], seed)

    def mhsa(seed):
        n, h, w = sizes(seed)
        return make(nn.init_mhsa, (16,), lambda p, x: nn.mhsa(x, p, heads=4), [(n, h, 16)], seed)

    def transformer(seed):
        n, h, w = sizes(seed)

        def fwd(p, x):
            return nn.transformer_block(x, p, rng=Rng(seed), mode="train", heads=4, drop=0.1)

        return make(nn.init_transformer_block, (16, 24), fwd, [(n, h, 16)], seed)

    def resnext(seed):
        n, h, w = sizes(seed)
        return make(nn.init_resnext, (6, 8), lambda p, x: nn.resnext_block(x, p), [(n, 6, h, w)], seed)

    def cna(seed):
        n, h, w = sizes(seed)
        return make(nn.init_conv_norm_act, (3, 4, 3), lambda p, x: nn.conv_norm_act(x, p, "train"),
                    [(n + 1, 3, h, w)], seed)

    def bottleneck(seed):
        n, h, w = sizes(seed)
        return make(nn.init_bottleneck, (4, 2, 8, 2), lambda p, x: nn.bottleneck(x, p, "train", 2),
                    [(n + 1, 4, h, w)], seed)

    cases.update(se=se, cbam=cbam, attention_gate=gate, scaled_dot_product_attention=sdpa, mhsa=mhsa,
                 transformer_block=transformer, resnext_block=resnext, conv_norm_act=cna,
                 encoder_bottleneck=bottleneck)
    return cases


BLOCK_NAMES = ("se", "cbam", "attention_gate", "scaled_dot_product_attention", "mhsa", "transformer_block",
               "resnext_block", "conv_norm_act", "encoder_bottleneck")


def check_block(name: str, seed: int = 0, samples_per_tensor: int = 4) -> GradCheckResult:
    loss, tensors = _block_cases()[name](seed)
    return check_gradients(loss, tensors, Rng(seed), samples_per_tensor=samples_per_tensor,
                           name=f"{name}[seed={seed}]", tolerance=1e-4)


def run_block_suite(seeds=(0, 1, 2)) -> list[GradCheckResult]:
    """Finite-difference check of every block on three random small shapes each."""
    return [check_block(name, seed) for name in BLOCK_NAMES for seed in seeds]


# -- end-to-end model spot check -------------------------------------------------

def check_model(config=None, seed: int = 0, coordinates: int = 20, input_size: int = 32,
                batch: int = 2, tolerance: float = 1e-3, h: float = 1e-6) -> GradCheckResult:
    """loss = sum(output) of the desk topology on a tiny float64 input.

    Runs in train mode (batch statistics, dropout drawn from a fresh stream
    per call) and probes ``coordinates`` parameter entries, each from a
    tensor drawn uniformly so small tensors are not crowded out.
    """
    import dataclasses

    from .model import build_model, model_forward, preset
    from .tensor import sum_

    cfg = config if config is not None else preset("desk")
    cfg = dataclasses.replace(cfg, input_size=(input_size, input_size)).validate()
    store = build_model(cfg, Rng(seed)).astype(np.float64)
    r = np.random.default_rng(seed)
    for n in store.trainable():
        if n.endswith(("bias", "beta", "shift", "pos_embed")):
            store[n].data[...] = r.standard_normal(store[n].shape) * 0.1
    x = Tensor(r.random((batch, cfg.in_channels) + cfg.input_size), dtype=np.float64)

    def loss():
        return sum_(model_forward(x, store, Rng(seed + 1), "train"))

    names = [n for n in store.trainable() if not n.endswith("k.bias")]
    pick_rng = Rng(seed)
    per: dict[str, int] = {}
    while sum(per.values()) < coordinates:
        n = names[int(pick_rng.integers(0, len(names)))]
        if per.get(n, 0) < store[n].size:
            per[n] = per.get(n, 0) + 1
    # one check per distinct tensor keeps the sample count exact
    results = [check_gradients(loss, [store[n]], pick_rng, samples_per_tensor=per[n], h=h,
                               name=n, tolerance=tolerance) for n in sorted(per)]
    worst = max(res.max_rel_error for res in results)
    return GradCheckResult(f"model[{cfg.name}]", worst, sum(res.coordinates for res in results), tolerance,
                           sum(res.skipped for res in results))

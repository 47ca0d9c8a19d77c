"""Seeded augmentation: exact flips and quarter turns, small rotations, blur, contrast.

Geometric ops move image and mask together; photometric ops touch the
image only. Every augmented output draws its parameters from its own
stream ``Rng.derive(seed, index)``, so a dataset build is a pure function
of (inputs, seed, multiplier) regardless of evaluation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import UsageError
from ..tensor import Rng
from .volume import SliceSample

OPS = ("flip_h", "flip_v", "rot90", "rotate", "blur", "contrast")
GEOMETRIC = ("flip_h", "flip_v", "rot90", "rotate")


@dataclass(frozen=True)
class AugmentPlan:
    seed: int = 0
    multiplier: float = 6.08
    max_rotation: float = 15.0
    blur_sigma: tuple[float, float] = (0.5, 1.5)
    contrast_gain: tuple[float, float] = (0.8, 1.2)
    ops: tuple[str, ...] = OPS

    def __post_init__(self):
        if not self.multiplier >= 1.0:
            raise UsageError(f"multiplier must be >= 1, got {self.multiplier}")
        bad = [o for o in self.ops if o not in OPS]
        if bad or not self.ops:
            raise UsageError(f"unknown augmentation ops {bad}; choose from {OPS}")


def output_count(n: int, multiplier: float) -> int:
    """ceil(multiplier * n), robust to binary float error (6.08 * 1000 is 6080.000000000001)."""
    return max(n, math.ceil(round(multiplier * n, 9)))


def draw_params(op: str, rng: Rng, plan: AugmentPlan) -> dict:
    if op == "rot90":
        return {"k": int(rng.integers(1, 4))}
    if op == "rotate":
        return {"angle": float(rng.uniform(-plan.max_rotation, plan.max_rotation))}
    if op == "blur":
        return {"sigma": float(rng.uniform(*plan.blur_sigma))}
    if op == "contrast":
        return {"gain": float(rng.uniform(*plan.contrast_gain))}
    return {}


def _geometric(a: np.ndarray, op: str, params: dict, order: int) -> np.ndarray:
    if op == "flip_h":
        return np.ascontiguousarray(a[..., ::-1])
    if op == "flip_v":
        return np.ascontiguousarray(a[..., ::-1, :])
    if op == "rot90":
        return np.ascontiguousarray(np.rot90(a, params["k"], axes=(-2, -1)))
    # rotate: same affine map for both, reflect at the borders so no fill value leaks in
    return ndimage.rotate(a, params["angle"], axes=(-1, -2), reshape=False, order=order,
                          mode="reflect")


def apply_image(image: np.ndarray, op: str, params: dict) -> np.ndarray:
    if op in GEOMETRIC:
        out = _geometric(image, op, params, order=1)
    elif op == "blur":
        s = params["sigma"]
        out = ndimage.gaussian_filter(image.astype(np.float64), sigma=(0, s, s), mode="reflect")
    elif op == "contrast":
        m = image.mean(dtype=np.float64)
        out = (image.astype(np.float64) - m) * params["gain"] + m
    else:
        raise UsageError(f"unknown augmentation op {op!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_mask(mask: np.ndarray, op: str, params: dict) -> np.ndarray:
    if op in GEOMETRIC:
        return _geometric(mask, op, params, order=0).astype(np.uint8)
    return mask.copy()


def augment(sample: SliceSample, op: str, params: dict | None = None, rng: Rng | None = None,
            plan: AugmentPlan = AugmentPlan()) -> SliceSample:
    """Apply one op; parameters are drawn from ``rng`` when not supplied."""
    if op not in OPS:
        raise UsageError(f"unknown augmentation op {op!r}; choose from {OPS}")
    if params is None:
        if rng is None:
            raise UsageError(f"augment({op!r}) needs params or an rng to draw them")
        params = draw_params(op, rng, plan)
    meta = dict(sample.meta, op=op, params=dict(params))
    return SliceSample(apply_image(sample.image, op, params), apply_mask(sample.mask, op, params), meta)


def expand(samples: list[SliceSample], plan: AugmentPlan) -> list[SliceSample]:
    """Originals first, then ceil(m*N) - N augmented copies, sources taken round-robin."""
    if not samples:
        raise UsageError("cannot augment an empty dataset")
    n = len(samples)
    out = [SliceSample(s.image, s.mask, dict(s.meta)) for s in samples]
    for j in range(output_count(n, plan.multiplier) - n):
        src = samples[j % n]
        rng = Rng.derive(plan.seed, j)
        op = plan.ops[int(rng.integers(0, len(plan.ops)))]
        aug = augment(src, op, draw_params(op, rng, plan))
        aug.meta["source"] = src.meta.get("id", str(j % n))
        aug.meta["id"] = f"{src.meta.get('id', j % n)}~aug{j:06d}"
        out.append(aug)
    return out

"""Procedural stand-in for MRI slices with one tumor-like blob each."""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from ..errors import UsageError
from ..tensor import Rng
from .volume import SliceSample, make_sample


def _smooth_field(rng: Rng, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells), dtype=np.float64)
    f = ndimage.zoom(coarse, size / cells, order=3, mode="reflect", grid_mode=True)
    f -= f.min()
    return f / max(f.max(), 1e-12)


def _blob(rng: Rng, size: int, area: tuple[float, float]) -> np.ndarray:
    frac = rng.uniform(*area)
    ratio = rng.uniform(0.6, 1.0)
    a = math.sqrt(frac * size * size / (math.pi * ratio))
    b = ratio * a
    margin = a * 1.25 + 1
    cy, cx = rng.uniform(margin, size - margin), rng.uniform(margin, size - margin)
    theta = rng.uniform(0.0, math.pi)
    # irregular boundary: low-order harmonics on the normalized radius
    harmonics = [(k, rng.uniform(0.0, 0.08), rng.uniform(0.0, 2 * math.pi)) for k in (2, 3, 4, 5)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    r = np.hypot(u / a, v / b)
    phi = np.arctan2(v / b, u / a)
    edge = 1.0 + sum(amp * np.cos(k * phi + ph) for k, amp, ph in harmonics)
    return (r <= edge).astype(np.uint8)


def generate_one(rng: Rng, size: int, tumor_prob: float = 1.0,
                 area: tuple[float, float] = (0.02, 0.20)) -> tuple[np.ndarray, np.ndarray]:
    bg = 0.2 + 0.45 * _smooth_field(rng, size, 5)
    bg = bg + 0.08 * (_smooth_field(rng, size, 12) - 0.5)
    if rng.random() < tumor_prob:
        mask = _blob(rng, size, area)
    else:
        mask = np.zeros((size, size), dtype=np.uint8)
    contrast = rng.uniform(0.12, 0.30)
    texture = 0.8 + 0.4 * _smooth_field(rng, size, 8)
    img = bg + contrast * texture * mask
    img = img + 0.04 * rng.normal((size, size), dtype=np.float64)
    return np.clip(img, 0.0, 1.0), mask


def generate_synthetic(count: int, size: int = 64, seed: int = 0, tumor_prob: float = 1.0,
                       area: tuple[float, float] = (0.02, 0.20)) -> list[SliceSample]:
    """``count`` samples; sample i depends only on (seed, i)."""
    if size < 32:
        raise UsageError(f"synthetic size must be at least 32, got {size}")
    if count < 0:
        raise UsageError(f"count must be non-negative, got {count}")
    out = []
    for i in range(count):
        img, mask = generate_one(Rng.derive(seed, i), size, tumor_prob, area)
        s = make_sample(img, mask, {"id": f"syn{i:05d}", "patient": f"syn{i:05d}", "slice": 0,
                                    "modality": "T1", "op": "none", "params": {}})
        s.meta["source"] = s.source_hash()
        out.append(s)
    return out

"""Volumes to training slices: normalization, resizing and mask pairing."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import DimensionError, ParseError, UsageError

MODALITIES = ("T1", "T2")


@dataclass
class SliceSample:
    """image: float32 3xHxW in [0, 1]; mask: uint8 1xHxW in {0, 1}."""

    image: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DimensionError(f"image must be 3xHxW, got {self.image.shape}")
        if self.mask.shape != (1,) + self.image.shape[1:]:
            raise DimensionError(f"mask {self.mask.shape} does not match image {self.image.shape}")
        if self.mask.dtype != np.uint8 or self.mask.max(initial=0) > 1:
            raise UsageError("mask must be uint8 with values in {0, 1}")
        if self.image.dtype != np.float32:
            raise UsageError(f"image must be float32, got {self.image.dtype}")

    @property
    def id(self) -> str:
        return self.meta["id"]

    def source_hash(self) -> str:
        h = hashlib.sha256(self.image.tobytes())
        h.update(self.mask.tobytes())
        return h.hexdigest()[:16]


def normalize_volume(volume: np.ndarray) -> np.ndarray:
    """Clip to the volume's 1st/99th percentiles and rescale to [0, 1].

    A volume with no spread between those percentiles maps to 0.5.
    """
    v = np.asarray(volume, dtype=np.float64)
    lo, hi = np.percentile(v, [1.0, 99.0])
    if hi <= lo:
        return np.full(v.shape, 0.5)
    return (np.clip(v, lo, hi) - lo) / (hi - lo)


def resize(img: np.ndarray, size: tuple[int, int], order: int) -> np.ndarray:
    """Resize the last two axes; order 1 is bilinear, order 0 nearest."""
    h, w = img.shape[-2:]
    if (h, w) == tuple(size):
        return img.copy()
    factors = (1.0,) * (img.ndim - 2) + (size[0] / h, size[1] / w)
    return ndimage.zoom(img, factors, order=order, mode="nearest", grid_mode=True)


def make_sample(gray: np.ndarray, mask: np.ndarray, meta: dict) -> SliceSample:
    image = np.repeat(np.clip(gray, 0.0, 1.0).astype(np.float32)[None], 3, axis=0)
    return SliceSample(image, (mask > 0).astype(np.uint8)[None], dict(meta))


def slice_and_pair(volume: np.ndarray, mask_volume: np.ndarray, meta: dict,
                   size: tuple[int, int] | None = None) -> list[SliceSample]:
    """One sample per axial slice of a normalized volume (Z x H x W).

    Grayscale is replicated to three channels; masks are thresholded at >0.
    Empty-mask slices are kept.
    """
    volume, mask_volume = np.asarray(volume), np.asarray(mask_volume)
    if volume.shape != mask_volume.shape or volume.ndim != 3:
        raise DimensionError(f"volume {volume.shape} and mask {mask_volume.shape} must be equal ZxHxW")
    modality = meta.get("modality", "T1")
    if modality not in MODALITIES:
        raise UsageError(f"modality must be one of {MODALITIES}, got {modality!r}")
    patient = meta.get("patient", "unknown")
    out = []
    for z in range(volume.shape[0]):
        img, msk = volume[z], (mask_volume[z] > 0).astype(np.uint8)
        if size is not None:
            img = resize(img, size, order=1)
            msk = resize(msk, size, order=0)
        s = make_sample(img, msk, {"patient": patient, "slice": z, "modality": modality,
                                   "op": "none", "params": {}})
        s.meta["source"] = s.source_hash()
        s.meta["id"] = f"{patient}_{modality}_{z:04d}"
        out.append(s)
    return out


# -- 8-bit binary PGM (P5) --------------------------------------------------------------

def write_pgm(path, img: np.ndarray) -> None:
    a = np.asarray(img)
    if a.ndim != 2 or a.dtype != np.uint8:
        raise UsageError("PGM output needs a 2-D uint8 array")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ParseError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    if len(data) - pos < w * h:
        raise ParseError(f"{path}: PGM payload truncated")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()

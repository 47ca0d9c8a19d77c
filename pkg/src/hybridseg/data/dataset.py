"""Dataset archives: ``img/<id>``, ``msk/<id>`` and a JSON ``manifest`` in one .nta file."""
from __future__ import annotations

import hashlib

import numpy as np

from .. import nta
from ..errors import IntegrityError, UsageError
from ..tensor import Rng
from .augment import AugmentPlan, expand
from .volume import SliceSample

MANIFEST_KEYS = ("id", "patient", "modality", "source", "op", "params")


def encode_dataset(samples: list[SliceSample]) -> bytes:
    entries: dict[str, np.ndarray] = {}
    manifest = []
    for s in samples:
        sid = s.meta["id"]
        if f"img/{sid}" in entries:
            raise UsageError(f"duplicate sample id {sid!r}")
        entries[f"img/{sid}"] = s.image
        entries[f"msk/{sid}"] = s.mask
        manifest.append({k: s.meta.get(k) for k in MANIFEST_KEYS} | {"slice": s.meta.get("slice", 0)})
    entries["manifest"] = nta.pack_json(manifest)
    return nta.encode(entries)


def save_dataset(path, samples: list[SliceSample]) -> str:
    """Write the archive atomically; returns its sha256."""
    data = encode_dataset(samples)
    try:
        nta.write_bytes(path, data)
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc.strerror or exc}") from exc
    return hashlib.sha256(data).hexdigest()


def load_dataset(path) -> list[SliceSample]:
    entries = nta.read(path)
    if "manifest" not in entries:
        raise IntegrityError(f"{path}: dataset archive has no manifest")
    out = []
    for rec in nta.unpack_json(entries["manifest"]):
        sid = rec["id"]
        try:
            img, msk = entries[f"img/{sid}"], entries[f"msk/{sid}"]
        except KeyError:
            raise IntegrityError(f"{path}: manifest lists {sid!r} but its tensors are missing") from None
        out.append(SliceSample(img, msk, dict(rec)))
    return out


def build_augmented_dataset(samples: list[SliceSample], plan: AugmentPlan, path=None):
    """Expand ``samples`` by ``plan``; optionally write the archive. Returns (samples, sha256)."""
    out = expand(samples, plan)
    digest = save_dataset(path, out) if path is not None else hashlib.sha256(encode_dataset(out)).hexdigest()
    return out, digest


def as_arrays(samples: list[SliceSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stacked float32 images (N,3,H,W) and float32 masks (N,1,H,W)."""
    if not samples:
        raise UsageError("dataset is empty")
    x = np.stack([s.image for s in samples]).astype(np.float32)
    y = np.stack([s.mask for s in samples]).astype(np.float32)
    return x, y


def split(samples: list[SliceSample], val_fraction: float, seed: int):
    """Seeded split by patient (samples of one patient never straddle the split)."""
    patients = sorted({s.meta.get("patient", s.meta["id"]) for s in samples})
    order = Rng(seed).permutation(len(patients))
    n_val = max(1, int(round(val_fraction * len(patients)))) if len(patients) > 1 else 0
    val_ids = {patients[i] for i in order[:n_val]}
    train = [s for s in samples if s.meta.get("patient", s.meta["id"]) not in val_ids]
    val = [s for s in samples if s.meta.get("patient", s.meta["id"]) in val_ids]
    return train, val

"""Command-line entry point: ``hybridseg <subcommand> ...``.

Exit status is 0 on success, 2 on usage or configuration errors and 1 on
runtime failures. Diagnostics go to stderr; results go to files.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import os
import sys

import numpy as np

from . import nta
from .data import (
    AugmentPlan, as_arrays, build_augmented_dataset, generate_synthetic, load_dataset, normalize_volume,
    read_dicom_series, read_pgm, save_dataset, series_volume, slice_and_pair, split, write_pgm,
)
from .errors import (
    ConfigError, DimensionError, HybridSegError, LoadError, UsageError,
)
from .losses import binarize
from .model import ModelConfig, build_model, import_weights, model_forward, preset
from .tensor import Rng, Tensor, inject_sign_flip, no_grad
from .trainer import CSV_COLUMNS, TrainConfig, evaluate, fit, per_sample_metrics, read_csv

USAGE_ERRORS = (ConfigError, UsageError, DimensionError, LoadError)
METRIC_NAMES = ("dice", "iou", "precision", "recall")


def _need_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{what} {path!r} does not exist")
    return path


def _need_dir(path: str, what: str) -> str:
    if not os.path.isdir(path):
        raise UsageError(f"{what} {path!r} is not a directory")
    return path


def _write_text(path: str, text: str) -> None:
    nta.write_bytes(path, text.encode("utf-8"))


# -- config files ------------------------------------------------------------

def _as_bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# key -> (parser, TrainConfig field or None for run-level keys)
TRAIN_KEYS = {
    "epochs": int, "batch_size": int, "learning_rate": float, "lr": float, "lambda": float,
    "seed": int, "checkpoint_every": int, "shuffle": _as_bool, "beta1": float, "beta2": float,
    "adam_eps": float, "arch": str, "val_fraction": float,
}
_ALIASES = {"lr": "learning_rate", "lambda": "lam"}


def parse_config_file(path: str, keys=TRAIN_KEYS) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys fail with their line number."""
    out = {}
    with open(_need_file(path, "config file")) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in keys:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r} (known: {', '.join(sorted(keys))})")
            try:
                out[_ALIASES.get(key, key)] = keys[key](value)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None
    return out


# -- subcommands -------------------------------------------------------------

def _read_mask_volume(directory: str) -> np.ndarray:
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".pgm"))
    if names:
        return np.stack([read_pgm(os.path.join(directory, n)) for n in names])
    return series_volume(read_dicom_series(directory))


def cmd_ingest(a) -> int:
    _need_dir(a.dicom_dir, "--dicom-dir")
    _need_dir(a.mask_dir, "--mask-dir")
    volume = series_volume(read_dicom_series(a.dicom_dir))
    masks = _read_mask_volume(a.mask_dir)
    if masks.shape != volume.shape:
        raise DimensionError(f"mask volume {masks.shape} does not match image volume {volume.shape}")
    patient = a.patient or os.path.basename(os.path.normpath(a.dicom_dir))
    size = (a.size, a.size) if a.size else None
    samples = slice_and_pair(normalize_volume(volume), masks, {"patient": patient, "modality": a.modality}, size)
    digest = save_dataset(a.out, samples)
    print(f"wrote {len(samples)} slices to {a.out} (sha256 {digest[:16]})")
    return 0


def cmd_synth(a) -> int:
    samples = generate_synthetic(a.count, a.size, seed=a.seed)
    digest = save_dataset(a.out, samples)
    print(f"wrote {len(samples)} samples to {a.out} (sha256 {digest[:16]})")
    return 0


def cmd_augment(a) -> int:
    src = load_dataset(_need_file(a.inp, "--in"))
    out, digest = build_augmented_dataset(src, AugmentPlan(seed=a.seed, multiplier=a.multiplier), a.out)
    print(f"expanded {len(src)} -> {len(out)} samples into {a.out} (sha256 {digest[:16]})")
    return 0


def _train_settings(a) -> dict:
    settings = parse_config_file(a.config) if a.config else {}
    flags = {"epochs": a.epochs, "batch_size": a.batch_size, "learning_rate": a.lr, "lam": a.lam,
             "arch": a.arch, "seed": a.seed}
    settings.update({k: v for k, v in flags.items() if v is not None})
    return settings


def cmd_train(a) -> int:
    settings = _train_settings(a)
    arch = settings.pop("arch", "desk")
    val_fraction = settings.pop("val_fraction", 0.2)
    cfg = TrainConfig(**settings)
    samples = load_dataset(_need_file(a.data, "--data"))
    if a.val:
        train_s, val_s = samples, load_dataset(_need_file(a.val, "--val"))
    else:
        train_s, val_s = split(samples, val_fraction, cfg.seed)
        if not val_s:
            raise UsageError("validation split is empty; pass --val or use more patients")
    train, val = as_arrays(train_s), as_arrays(val_s)
    model_cfg = preset(arch, input_size=tuple(train[0].shape[-2:]))
    fit(model_cfg, train, val, cfg, a.checkpoint_dir, resume=a.resume,
        log=None if a.quiet else (lambda s: print(s, flush=True)))
    return 0


def load_weights(path: str):
    entries = nta.read(_need_file(path, "weights file"))
    if "meta/model_config" not in entries:
        raise LoadError(f"{path}: no meta/model_config entry; not a weights archive")
    cfg = ModelConfig.from_dict(nta.unpack_json(entries["meta/model_config"]))
    params = build_model(cfg, Rng(0))
    import_weights(params, entries, policy="strict")
    return params, cfg


def _check_size(cfg: ModelConfig, shape, what: str) -> None:
    if tuple(shape[-2:]) != tuple(cfg.input_size):
        raise DimensionError(
            f"{what} is {shape[-2]}x{shape[-1]} but the weights expect {cfg.input_size[0]}x{cfg.input_size[1]}")


def cmd_eval(a) -> int:
    params, cfg = load_weights(a.weights)
    samples = load_dataset(_need_file(a.data, "--data"))
    x, y = as_arrays(samples)
    _check_size(cfg, x.shape, "data")
    summary = evaluate(params, x, y, a.batch_size)
    rows = per_sample_metrics(params, x, y, a.batch_size)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_NAMES)
    w.writerow([repr(summary[k]) for k in METRIC_NAMES])
    _write_text(a.out, buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("id",) + METRIC_NAMES)
    for s, r in zip(samples, rows):
        w.writerow([s.id] + [repr(float(r[k])) for k in METRIC_NAMES])
    per_sample = a.per_sample or os.path.splitext(a.out)[0] + "_per_sample.csv"
    _write_text(per_sample, buf.getvalue())
    print(" ".join(f"{k} {summary[k]:.4f}" for k in METRIC_NAMES))
    return 0


def _load_image(path: str) -> np.ndarray:
    if path.lower().endswith(".npy"):
        img = np.load(path).astype(np.float32)
    else:
        img = read_pgm(path).astype(np.float32) / 255.0
    if img.ndim == 2:
        img = np.repeat(img[None], 3, axis=0)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"{path}: expected a HxW grayscale or 3xHxW image, got {img.shape}")
    return img


def cmd_predict(a) -> int:
    params, cfg = load_weights(a.weights)
    img = _load_image(_need_file(a.image, "--image"))
    _check_size(cfg, img.shape, "image")
    with no_grad():
        prob = model_forward(Tensor(img[None]), params, None, "eval").data[0, 0]
    write_pgm(a.out, binarize(prob) * np.uint8(255))
    return 0


# -- SVG charts ----------------------------------------------------------------

PANELS = (
    ("loss.svg", "Training loss", ("loss", "bce", "dice_loss")),
    ("dice_iou.svg", "Validation Dice and IoU", ("dice", "iou")),
    ("precision_recall.svg", "Validation precision and recall", ("precision", "recall")),
)
COLORS = ("#1f77b4", "#d62728", "#2ca02c")


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def line_chart_svg(title: str, epochs: list[int], series: dict[str, list[float]],
                   width: int = 640, height: int = 400) -> str:
    """A static line chart whose axes span exactly the observed data ranges."""
    left, right, top, bottom = 70, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    x0, x1 = min(epochs), max(epochs)
    vals = [v for s in series.values() for v in s]
    y0, y1 = min(vals), max(vals)
    xs = (lambda e: left + pw * (e - x0) / (x1 - x0)) if x1 > x0 else (lambda e: left + pw / 2)
    ys = (lambda v: top + ph * (1 - (v - y0) / (y1 - y0))) if y1 > y0 else (lambda v: top + ph / 2)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for k in range(5):
        ev = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        px, py = xs(ev), ys(yv)
        out.append(f'<line x1="{px:.2f}" y1="{top + ph}" x2="{px:.2f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px:.2f}" y="{top + ph + 18}" text-anchor="middle">{_fmt(ev)}</text>')
        out.append(f'<line x1="{left - 5}" y1="{py:.2f}" x2="{left}" y2="{py:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py + 4:.2f}" text-anchor="end">{_fmt(yv)}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">epoch</text>')
    for i, (name, values) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{xs(e):.2f},{ys(v):.2f}" for e, v in zip(epochs, values))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = top + 14 + 16 * i
        out.append(f'<line x1="{left + pw - 120}" y1="{ly}" x2="{left + pw - 100}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 95}" y="{ly + 4}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(a) -> int:
    history = read_csv(_need_file(a.csv, "--csv"))
    if not history:
        raise UsageError(f"{a.csv}: no epoch rows to plot")
    os.makedirs(a.out, exist_ok=True)
    epochs = [r.epoch for r in history]
    for fname, title, keys in PANELS:
        svg = line_chart_svg(title, epochs, {k: [getattr(r, k) for r in history] for k in keys})
        _write_text(os.path.join(a.out, fname), svg)
    return 0


def cmd_gradcheck(a) -> int:
    from .gradcheck import check_model, run_block_suite

    def run():
        results = run_block_suite(seeds=tuple(range(a.seeds)))
        if a.model:
            results.append(check_model(seed=0))
        return results

    if a.inject_sign_flip:
        with inject_sign_flip(a.inject_sign_flip):
            results = run()
    else:
        results = run()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(dict.fromkeys(failed))}", file=sys.stderr)
        return 1
    print(f"all {len(results)} gradient checks passed")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridseg", description="Hybrid U-Net/Transformer segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="DICOM series + masks -> dataset archive")
    s.add_argument("--dicom-dir", required=True)
    s.add_argument("--mask-dir", required=True, help="DICOM series or directory of PGM slices")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, help="resize slices to SIZE x SIZE")
    s.add_argument("--modality", choices=("T1", "T2"), default="T1")
    s.add_argument("--patient", help="patient id (default: name of --dicom-dir)")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="generate a synthetic dataset archive")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("augment", help="expand a dataset archive by augmentation")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--multiplier", type=float, default=6.08)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser(
        "train", help="train a model",
        description="Train with Adam. Settings come from --config (key = value lines) and "
                    "command-line flags; flags win over the config file.",
        epilog="config keys: " + ", ".join(sorted(TRAIN_KEYS)))
    s.add_argument("--data", required=True)
    s.add_argument("--val", help="validation archive (default: seeded split of --data by patient)")
    s.add_argument("--config")
    s.add_argument("--checkpoint-dir", required=True)
    s.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--arch", choices=("full", "desk", "baseline", "bottleneck_only", "hybrid"))
    s.add_argument("--seed", type=int)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate weights on a dataset archive")
    s.add_argument("--data", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--out", required=True, help="summary CSV")
    s.add_argument("--per-sample", help="per-sample CSV (default: <out>_per_sample.csv)")
    s.add_argument("--batch-size", type=int, default=8)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="predict a binary mask for one image")
    s.add_argument("--image", required=True, help="8-bit PGM or .npy array")
    s.add_argument("--weights", required=True)
    s.add_argument("--out", required=True, help="output PGM, values 0/255")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("plot", help="SVG charts from a metrics CSV")
    s.add_argument("--csv", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--model", action="store_true", help="also spot-check the full desk model")
    s.add_argument("--inject-sign-flip", metavar="OP", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (HybridSegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

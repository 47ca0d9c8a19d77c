"""Adam training loop, evaluation, and bit-exact checkpoint/resume."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nta
from .errors import ConfigError, NonFiniteLossError, ResumeError, UsageError
from .losses import LossConfig, all_metrics, binarize, confusion, hybrid_loss
from .model import ModelConfig, build_model, export_weights, model_forward
from .params import ParameterStore
from .tensor import Rng, Tensor, backward, no_grad

CSV_COLUMNS = ("epoch", "loss", "bce", "dice_loss", "dice", "iou", "precision", "recall")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 29
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 1.0
    seed: int = 0
    checkpoint_every: int = 1
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(lam=self.lam)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    bce: float
    dice_loss: float
    dice: float = 0.0
    iou: float = 0.0
    precision: float = 0.0
    recall: float = 0.0

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in CSV_COLUMNS[1:]]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainState:
    params: ParameterStore
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    rng: Rng
    step: int = 0
    epoch: int = 0
    history: list[EpochRecord] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ParameterStore, seed: int) -> "TrainState":
        names = params.trainable()
        zeros = {n: np.zeros_like(params[n].data) for n in names}
        return cls(params, zeros, {n: z.copy() for n, z in zeros.items()}, Rng(seed))


# -- optimizer ---------------------------------------------------------------

def adam_step(params: ParameterStore, m: dict, v: dict, t: int, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update at step ``t`` (1-based), in sorted name order."""
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name in params.trainable():
        p = params[name]
        g = p.grad
        if g is None:
            raise UsageError(f"parameter {name!r} has no gradient")
        g = g.astype(p.dtype, copy=False)
        m[name] = b1 * m[name] + (1.0 - b1) * g
        v[name] = b2 * v[name] + (1.0 - b2) * (g * g)
        step = cfg.learning_rate * (m[name] / c1) / (np.sqrt(v[name] / c2) + cfg.adam_eps)
        p.data = (p.data - step).astype(p.dtype, copy=False)


# -- epochs ----------------------------------------------------------------------

def _batches(n: int, size: int, order: np.ndarray):
    for lo in range(0, n, size):
        yield order[lo:lo + size]


def train_epoch(state: TrainState, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> EpochRecord:
    """Shuffle, then forward/backward/Adam per batch; the last partial batch is kept."""
    n = len(x)
    if n == 0:
        raise UsageError("training set is empty")
    order = state.rng.permutation(n) if cfg.shuffle else np.arange(n)
    params = state.params
    sums = np.zeros(3)
    lcfg = cfg.loss
    for b, idx in enumerate(_batches(n, cfg.batch_size, order)):
        params.zero_grad()
        pred = model_forward(Tensor(x[idx]), params, state.rng, "train")
        total, bce, dice = hybrid_loss(pred, Tensor(y[idx]), lcfg)
        vals = (total.item(), bce.item(), dice.item())
        if not all(math.isfinite(v) for v in vals):
            raise NonFiniteLossError(
                f"non-finite loss at epoch {state.epoch + 1}, batch {b}: total={vals[0]}, bce={vals[1]}, dice={vals[2]}")
        backward(total)
        state.step += 1
        adam_step(params, state.m, state.v, state.step, cfg)
        sums += np.array(vals) * len(idx)
    sums /= n
    return EpochRecord(state.epoch + 1, float(sums[0]), float(sums[1]), float(sums[2]))


def predict_proba(params: ParameterStore, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
    outs = []
    with no_grad():
        for lo in range(0, len(x), batch_size):
            outs.append(model_forward(Tensor(x[lo:lo + batch_size]), params, None, "eval").data)
    return np.concatenate(outs)


def per_sample_metrics(params: ParameterStore, x: np.ndarray, y: np.ndarray, batch_size: int = 8) -> list[dict]:
    prob = predict_proba(params, x, batch_size)
    return [all_metrics(confusion(binarize(p), t)) for p, t in zip(prob, y.astype(np.uint8))]


def evaluate(params: ParameterStore, x: np.ndarray, y: np.ndarray, batch_size: int = 8) -> dict[str, float]:
    """Eval-mode hard-mask metrics, computed per slice then averaged."""
    if len(x) == 0:
        raise UsageError("evaluation set is empty")
    rows = per_sample_metrics(params, x, y, batch_size)
    return {k: float(np.mean([r[k] for r in rows])) for k in ("dice", "iou", "precision", "recall")}


# -- checkpoints -------------------------------------------------------------

def config_hash(model_cfg: ModelConfig, cfg: TrainConfig, data_digest: str = "") -> str:
    """Identity of a run; the epoch budget is excluded so a resumed run may extend it."""
    train = {k: v for k, v in cfg.to_dict().items() if k != "epochs"}
    blob = json.dumps({"model": model_cfg.to_dict(), "train": train, "data": data_digest}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def data_digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(str(a.shape).encode())
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(state: TrainState, path, run_hash: str, train_cfg: TrainConfig | None = None) -> None:
    entries = export_weights(state.params)
    for n in sorted(state.m):
        entries[f"opt/m/{n}"] = state.m[n]
        entries[f"opt/v/{n}"] = state.v[n]
    entries["meta/step"] = np.array([state.step], dtype=np.int64)
    entries["meta/epoch"] = np.array([state.epoch], dtype=np.int64)
    entries["meta/rng"] = state.rng.get_state()
    entries["meta/config_hash"] = nta.pack_json(run_hash)
    entries["meta/history"] = nta.pack_json([r.to_dict() for r in state.history])
    if train_cfg is not None:
        entries["meta/train_config"] = nta.pack_json(train_cfg.to_dict())
    nta.write(path, entries)


@dataclass
class Checkpoint:
    state: TrainState
    config_hash: str
    model_config: ModelConfig
    train_config: dict | None


def load_checkpoint(path) -> Checkpoint:
    e = nta.read(path)
    try:
        mcfg = ModelConfig.from_dict(nta.unpack_json(e["meta/model_config"]))
        params = build_model(mcfg, Rng(0))
        for n in params:
            params[n].data = e[f"model/{n}"].copy()
        names = params.trainable()
        m = {n: e[f"opt/m/{n}"].copy() for n in names}
        v = {n: e[f"opt/v/{n}"].copy() for n in names}
        state = TrainState(params, m, v, Rng.from_state(e["meta/rng"]), int(e["meta/step"][0]),
                           int(e["meta/epoch"][0]),
                           [EpochRecord(**r) for r in nta.unpack_json(e["meta/history"])])
        run_hash = nta.unpack_json(e["meta/config_hash"])
    except KeyError as exc:
        raise ResumeError(f"{path}: checkpoint lacks entry {exc.args[0]!r}") from None
    tcfg = nta.unpack_json(e["meta/train_config"]) if "meta/train_config" in e else None
    return Checkpoint(state, run_hash, mcfg, tcfg)


def write_csv(path, history: list[EpochRecord]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in history:
        w.writerow(r.row())
    nta.write_bytes(path, buf.getvalue().encode())


def read_csv(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise UsageError(f"{path}: expected header {','.join(CSV_COLUMNS)}")
    return [EpochRecord(int(r[0]), *map(float, r[1:])) for r in rows[1:] if r]


def _latest(checkpoint_dir) -> str | None:
    marker = os.path.join(checkpoint_dir, "latest")
    if not os.path.exists(marker):
        return None
    with open(marker) as fh:
        name = fh.read().strip()
    return os.path.join(checkpoint_dir, name)


def fit(model_cfg: ModelConfig, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
        cfg: TrainConfig, checkpoint_dir, resume: bool = False,
        log: Callable[[str], None] | None = None) -> TrainState:
    """Train for ``cfg.epochs`` epochs, logging and checkpointing each one.

    Writes ``metrics.csv``, ``ckpt_<epoch>.nta`` plus a ``latest`` marker, and
    ``best.nta`` (weights with the highest validation Dice so far).
    """
    os.makedirs(checkpoint_dir, exist_ok=True)
    xt, yt = train
    xv, yv = val
    run_hash = config_hash(model_cfg, cfg, data_digest(xt, yt, xv, yv))
    state = None
    if resume:
        path = _latest(checkpoint_dir)
        if path is None:
            raise ResumeError(f"{checkpoint_dir}: nothing to resume (no 'latest' marker)")
        ck = load_checkpoint(path)
        if ck.config_hash != run_hash:
            raise ResumeError(f"{path}: checkpoint was written by a different configuration or dataset")
        state = ck.state
        if log:
            log(f"resumed from {os.path.basename(path)} at epoch {state.epoch}")
    if state is None:
        state = TrainState.fresh(build_model(model_cfg, Rng(cfg.seed)), cfg.seed + 1)

    csv_path = os.path.join(checkpoint_dir, "metrics.csv")
    write_csv(csv_path, state.history)
    best = max((r.dice for r in state.history), default=-1.0)
    while state.epoch < cfg.epochs:
        rec = train_epoch(state, xt, yt, cfg)
        for k, val_ in evaluate(state.params, xv, yv, cfg.batch_size).items():
            setattr(rec, k, val_)
        state.epoch += 1
        state.history.append(rec)
        write_csv(csv_path, state.history)
        if rec.dice > best:
            best = rec.dice
            nta.write(os.path.join(checkpoint_dir, "best.nta"), export_weights(state.params))
        if state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs:
            name = f"ckpt_{state.epoch}.nta"
            save_checkpoint(state, os.path.join(checkpoint_dir, name), run_hash, cfg)
            nta.write_bytes(os.path.join(checkpoint_dir, "latest"), (name + "\n").encode())
        if log:
            log("epoch {epoch:3d}  loss {loss:.4f}  bce {bce:.4f}  dice_loss {dice_loss:.4f}  "
                "val dice {dice:.4f}  iou {iou:.4f}  prec {precision:.4f}  rec {recall:.4f}".format(**rec.to_dict()))
    return state

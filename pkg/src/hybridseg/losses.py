"""Composite BCE + soft Dice training loss and hard-mask overlap metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .tensor import Tensor, add, as_tensor, clip, div, log, mean, mul, sub, sum_


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    eps: float = 1e-6
    bce_clamp: float = 1e-7

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.eps <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.eps}")
        if not 0 < self.bce_clamp < 0.5:
            raise ConfigError(f"bce_clamp must lie in (0, 0.5), got {self.bce_clamp}")


def _pair(pred, target) -> tuple[Tensor, Tensor]:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    return pred, target


def bce_loss(pred, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [c, 1 - c]."""
    pred, target = _pair(pred, target)
    p = clip(pred, cfg.bce_clamp, 1.0 - cfg.bce_clamp)
    pos = mul(target, log(p))
    neg = mul(sub(1.0, target), log(sub(1.0, p)))
    return mul(mean(add(pos, neg)), -1.0)


def dice_loss(pred, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """1 - (2 sum(p y) + eps) / (sum p + sum y + eps), summed over the whole batch."""
    pred, target = _pair(pred, target)
    inter = sum_(mul(pred, target))
    num = add(mul(inter, 2.0), cfg.eps)
    den = add(add(sum_(pred), sum_(target)), cfg.eps)
    return sub(1.0, div(num, den))


def hybrid_loss(pred, target, cfg: LossConfig = LossConfig()) -> tuple[Tensor, Tensor, Tensor]:
    """(BCE + lambda * Dice, BCE, Dice)."""
    b = bce_loss(pred, target, cfg)
    d = dice_loss(pred, target, cfg)
    total = b if cfg.lam == 0 else add(b, mul(d, cfg.lam))
    return total, b, d


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    data = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    return (data > threshold).astype(np.uint8)


# -- hard-mask metrics -----------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _binary(name: str, m) -> np.ndarray:
    a = m.data if isinstance(m, Tensor) else np.asarray(m)
    if a.size and not np.all((a == 0) | (a == 1)):
        raise UsageError(f"{name} mask must be binary (0/1)")
    return a.astype(bool)


def confusion(pred_bin, target) -> ConfusionCounts:
    p, t = _binary("prediction", pred_bin), _binary("target", target)
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} and target {t.shape} differ in shape")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def _counts(x) -> ConfusionCounts:
    if isinstance(x, ConfusionCounts):
        return x
    pred, target = x
    return confusion(pred, target)


def _degenerate(c: ConfusionCounts) -> float:
    # both masks empty -> perfect agreement; otherwise the metric is undefined -> 0
    return 1.0 if c.tp + c.fp + c.fn == 0 else 0.0


def dice_score(x) -> float:
    c = _counts(x)
    den = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / den if den else _degenerate(c)


def iou(x) -> float:
    c = _counts(x)
    den = c.tp + c.fp + c.fn
    return c.tp / den if den else _degenerate(c)


def precision(x) -> float:
    c = _counts(x)
    den = c.tp + c.fp
    return c.tp / den if den else _degenerate(c)


def recall(x) -> float:
    c = _counts(x)
    den = c.tp + c.fn
    return c.tp / den if den else _degenerate(c)


METRICS = {"dice": dice_score, "iou": iou, "precision": precision, "recall": recall}


def all_metrics(x) -> dict[str, float]:
    c = _counts(x)
    return {k: f(c) for k, f in METRICS.items()}

"""Segmentation losses (BCE, soft Dice, their equal-weight mix) and pixel metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import Tensor, make_result

PROB_CLAMP = 1e-7
DICE_SMOOTH = 1.0
METRIC_COLUMNS = ("Accuracy", "Precision", "Recall", "DSC")


def _target(y, p: Tensor) -> np.ndarray:
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    if y.shape != p.shape:
        raise DimensionError(f"prediction {p.shape} and target {y.shape} differ")
    return y.astype(np.float64)


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy; p is clamped to [1e-7, 1 - 1e-7] (no gradient where clamped)."""
    yd = _target(y, p)
    raw = p.data.astype(np.float64)
    pc = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (raw >= PROB_CLAMP) & (raw <= 1.0 - PROB_CLAMP)
    n = pc.size
    value = -np.mean(yd * np.log(pc) + (1.0 - yd) * np.log(1.0 - pc))

    def backward_fn(g):
        grad = (pc - yd) / (pc * (1.0 - pc)) / n * inside
        return ((float(g) * grad).astype(p.dtype),)

    return make_result(np.asarray(value, dtype=p.dtype), (p,), backward_fn)


def dice_loss(p: Tensor, y) -> Tensor:
    """1 - (2 sum(p y) + s) / (sum(p) + sum(y) + s) with s = 1."""
    yd = _target(y, p)
    pd = p.data.astype(np.float64)
    inter = 2.0 * np.sum(pd * yd) + DICE_SMOOTH
    union = np.sum(pd) + np.sum(yd) + DICE_SMOOTH
    value = 1.0 - inter / union

    def backward_fn(g):
        grad = -(2.0 * yd * union - inter) / (union * union)
        return ((float(g) * grad).astype(p.dtype),)

    return make_result(np.asarray(value, dtype=p.dtype), (p,), backward_fn)


@dataclass
class LossValue:
    total: Tensor
    bce: Tensor
    dice: Tensor

    def floats(self) -> dict:
        return {"total": self.total.item(), "bce": self.bce.item(), "dice": self.dice.item()}


def combined_loss(p: Tensor, y) -> LossValue:
    bce = bce_loss(p, y)
    dice = dice_loss(p, y)
    return LossValue(ops.add(ops.scale(bce, 0.5), ops.scale(dice, 0.5)), bce, dice)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ConfigError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    dsc: float
    counts: ConfusionCounts
    aggregation: str = "micro"

    def row(self) -> tuple:
        return (self.accuracy, self.precision, self.recall, self.dsc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = asdict(self.counts)
        return d

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["accuracy"], d["precision"], d["recall"], d["dsc"], ConfusionCounts(**d["counts"]), d["aggregation"])

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def _ratio(num: int, den: int, empty_ok: bool) -> float:
    if den == 0:
        return 1.0 if empty_ok else 0.0
    return num / den


def metrics(counts: ConfusionCounts, aggregation: str = "micro") -> MetricsReport:
    """Accuracy, precision, recall and DSC from confusion counts.

    A 0/0 ratio is 1.0 when the empty set it refers to is matched by the
    other side (nothing predicted and nothing there), else 0.0.
    """
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    return MetricsReport(
        accuracy=_ratio(tp + tn, counts.total, True),
        precision=_ratio(tp, tp + fp, fn == 0),
        recall=_ratio(tp, tp + fn, fp == 0),
        dsc=_ratio(2 * tp, 2 * tp + fp + fn, True),
        counts=counts,
        aggregation=aggregation,
    )


def aggregate(per_image: Sequence[ConfusionCounts], aggregation: str = "micro") -> MetricsReport:
    """Pool counts (``micro``) or average per-image metrics (``per_image_mean``)."""
    if not per_image:
        raise ConfigError("no images to aggregate")
    pooled = sum(per_image, ConfusionCounts())
    if aggregation == "micro":
        return metrics(pooled, "micro")
    if aggregation == "per_image_mean":
        rows = np.array([metrics(c).row() for c in per_image], dtype=np.float64)
        acc, prec, rec, dsc = (float(v) for v in rows.mean(axis=0))
        return MetricsReport(acc, prec, rec, dsc, pooled, "per_image_mean")
    raise ConfigError(f"unknown aggregation {aggregation!r}")


def format_row(values: Iterable[float], digits: int = 4) -> str:
    """Tab-separated metric cells in Accuracy/Precision/Recall/DSC order."""
    return "\t".join(f"{v:.{digits}f}" for v in values)


def parse_row(text: str) -> tuple:
    cells = text.split()
    if len(cells) != len(METRIC_COLUMNS):
        raise ConfigError(f"expected {len(METRIC_COLUMNS)} metric cells, got {len(cells)}")
    return tuple(float(c) for c in cells)

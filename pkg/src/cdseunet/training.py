"""Training loop, evaluation and ablation driver."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .data_io import EdgeParams, Manifest, Sample, checkpoint_bytes, load_samples, model_from_checkpoint_bytes
from .errors import ConfigError
from .losses import METRIC_COLUMNS, ConfusionCounts, MetricsReport, aggregate, combined_loss, confusion, format_row
from .model import CdseUnet, ModelConfig, build
from .optim import OptimizerState, adam_step, lr_schedule
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Raised when a training loss stops being finite."""


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 2
    learning_rate: float = 1e-3
    decay_factor: float = 0.9
    decay_interval_epochs: int = 30
    eval_every: int = 1
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    edges: EdgeParams = field(default_factory=EdgeParams)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        self.model.validate()
        self.optimizer_state()
        return self

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(
            learning_rate=self.learning_rate,
            decay_factor=self.decay_factor,
            decay_interval_epochs=self.decay_interval_epochs,
        )


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_bce: float
    loss_dice: float
    test: Optional[MetricsReport]
    best_dsc_so_far: float
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "epoch": self.epoch,
            "lr": self.lr,
            "loss": {"total": self.loss_total, "bce": self.loss_bce, "dice": self.loss_dice},
            "test": self.test.to_dict() if self.test else None,
            "best_dsc_so_far": self.best_dsc_so_far,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)

    def to_jsonl(self, include_timing: bool = False) -> str:
        """One JSON object per epoch. Wall time is left out unless asked for,
        so logs of identical runs are byte-identical."""
        return "".join(json.dumps(r.to_dict(include_timing), sort_keys=True) + "\n" for r in self.records)

    def best_dsc(self) -> float:
        return self.records[-1].best_dsc_so_far if self.records else 0.0


def _stack(samples: Sequence[Sample]) -> Tuple[Tensor, Tensor, np.ndarray]:
    image = np.stack([s.image for s in samples])[:, None]
    edge = np.stack([s.edge for s in samples])[:, None]
    mask = np.stack([s.mask for s in samples])[:, None]
    return Tensor(image.astype(np.float32)), Tensor(edge.astype(np.float32)), mask


def _check_shapes(samples: Sequence[Sample], cfg: ModelConfig, which: str) -> None:
    if not samples:
        raise ConfigError(f"{which} set is empty")
    want = (cfg.input_size, cfg.input_size)
    for s in samples:
        if s.image.shape != want or s.mask.shape != want or s.edge.shape != want:
            raise ConfigError(f"{which} sample {s.name or '?'} has shape {s.image.shape}, model expects {want}")


def evaluate_counts(model: CdseUnet, samples: Sequence[Sample], batch_size: int = 4, threshold: float = 0.5) -> List[ConfusionCounts]:
    counts = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        image, edge, mask = _stack(chunk)
        pred = model.predict(image, edge, threshold)
        counts.extend(confusion(pred[i], mask[i]) for i in range(len(chunk)))
    return counts


def evaluate(model: CdseUnet, samples: Sequence[Sample], aggregation: str = "micro") -> MetricsReport:
    """Eval-mode predictions at threshold 0.5, scored against the masks."""
    _check_shapes(samples, model.config, "evaluation")
    return aggregate(evaluate_counts(model, samples), aggregation)


def train(
    train_set: Sequence[Sample],
    test_set: Sequence[Sample],
    cfg: TrainConfig,
    progress: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[bytes, TrainLog]:
    """Train from a seeded initialization; return the best-test-DSC checkpoint and the log.

    The checkpoint is replaced only when test DSC strictly improves, so the
    returned bytes belong to the first epoch reaching the best score.
    """
    cfg.validate()
    _check_shapes(train_set, cfg.model, "training")
    _check_shapes(test_set, cfg.model, "test")
    model = build(cfg.model, seed=cfg.seed)
    params = model.parameters()
    state = cfg.optimizer_state()
    logbook = TrainLog()
    best_dsc, best_ckpt = -1.0, checkpoint_bytes(model)
    n = len(train_set)

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = lr_schedule(epoch, state)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        model.set_training(True)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            image, edge, mask = _stack([train_set[i] for i in order[start:start + cfg.batch_size]])
            model.zero_grad()
            loss = combined_loss(model(image, edge), mask)
            values = loss.floats()
            if not all(math.isfinite(v) for v in values.values()):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}: {values}")
            loss.total.backward()
            adam_step(params, state, lr)
            sums += [values["total"] * len(image.data), values["bce"] * len(image.data), values["dice"] * len(image.data)]

        report = None
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            report = evaluate(model, test_set)
            if report.dsc > best_dsc:
                best_dsc, best_ckpt = report.dsc, checkpoint_bytes(model)
        mean = sums / n
        record = EpochRecord(epoch, lr, float(mean[0]), float(mean[1]), float(mean[2]), report,
                             max(best_dsc, 0.0), time.perf_counter() - started)
        logbook.records.append(record)
        if progress:
            progress(record)
    return best_ckpt, logbook


# ---------------------------------------------------------------- ablation

FUSION_LABELS = {
    "simple": "Simple Concatenation",
    "single": "Single SENet Concatenation",
    "double": "Double SENet Concatenation",
}
OPERATOR_LABELS = {
    "sobel": "Sobel&CDSE-UNet",
    "roberts": "Roberts&CDSE-UNet",
    "prewitt": "Prewitt&CDSE-UNet",
    "canny": "Canny&CDSE-UNet",
}


def fusion_grid() -> list:
    return [(FUSION_LABELS[v], {"model.fusion_variant": v}) for v in ("simple", "single", "double")]


def operator_grid() -> list:
    return [(OPERATOR_LABELS[op], {"edges.operator": op}) for op in ("sobel", "roberts", "prewitt", "canny")]


def apply_delta(cfg, delta: dict):
    """Return a copy of a (nested) dataclass with dotted-path fields replaced."""
    nested: dict = {}
    direct = {}
    for key, value in delta.items():
        head, _, rest = key.partition(".")
        if head not in {f.name for f in fields(cfg)}:
            raise ConfigError(f"unknown config field {head!r} in delta {delta}")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            direct[head] = value
    for head, sub in nested.items():
        direct[head] = apply_delta(getattr(cfg, head), sub)
    return replace(cfg, **direct)


@dataclass
class AblationRow:
    label: str
    report: Optional[MetricsReport]
    error: Optional[str] = None


@dataclass
class AblationTable:
    title: str
    first_column: str
    rows: List[AblationRow]

    def header(self) -> tuple:
        return (self.first_column,) + METRIC_COLUMNS

    def to_text(self) -> str:
        width = max(len(self.first_column), *(len(r.label) for r in self.rows))
        lines = [self.title, "  ".join([self.first_column.ljust(width)] + [c.rjust(9) for c in METRIC_COLUMNS])]
        for r in self.rows:
            cells = [f"{v:.4f}".rjust(9) for v in r.report.row()] if r.report else [f"FAILED: {r.error}"]
            lines.append("  ".join([r.label.ljust(width)] + cells))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "columns": list(self.header()),
            "rows": [
                {"label": r.label, "metrics": r.report.to_dict() if r.report else None,
                 "cells": format_row(r.report.row()).split("\t") if r.report else None, "error": r.error}
                for r in self.rows
            ],
        }


def ablate(
    grid: Sequence[Tuple[str, dict]],
    base: TrainConfig,
    manifest: Manifest,
    train_entries: Sequence,
    test_entries: Sequence,
    title: str = "Ablation",
    first_column: str = "Method",
) -> AblationTable:
    """Train and evaluate one cell per grid delta with identical seed and data.

    Each cell's row holds the test metrics of its best checkpoint. A failing
    cell is recorded and the remaining cells still run.
    """
    if not grid:
        raise ConfigError("ablation grid is empty")
    cache: dict = {}
    rows = []
    for label, delta in grid:
        try:
            cfg = apply_delta(base, delta).validate()
            if cfg.edges not in cache:
                cache[cfg.edges] = (load_samples(manifest, cfg.edges, train_entries),
                                    load_samples(manifest, cfg.edges, test_entries))
            train_set, test_set = cache[cfg.edges]
            ckpt, _ = train(train_set, test_set, cfg)
            report = evaluate(model_from_checkpoint_bytes(ckpt), test_set)
            rows.append(AblationRow(label, report))
        except Exception as exc:  # noqa: BLE001 - one failing cell must not stop the grid
            log.exception("ablation cell %s failed", label)
            rows.append(AblationRow(label, None, f"{type(exc).__name__}: {exc}"))
    return AblationTable(title, first_column, rows)

"""Adam with bias correction and an epoch-wise step-decay learning rate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import Param


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    step_count: int = 0
    decay_factor: float = 0.9
    decay_interval_epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_interval_epochs < 1:
            raise ConfigError("decay_interval_epochs must be >= 1")


def lr_schedule(epoch: int, state: OptimizerState) -> float:
    """Learning rate for ``epoch``: base rate times decay_factor per completed interval."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return state.learning_rate * state.decay_factor ** (epoch // state.decay_interval_epochs)


def adam_step(params: Iterable[Param], state: OptimizerState, lr: float | None = None) -> None:
    """One Adam update of every param in place, then clear the gradients.

    ``lr`` overrides ``state.learning_rate`` (the training loop passes the
    scheduled rate here).
    """
    params = list(params)
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise UsageError(f"adam_step: no gradient for {', '.join(missing[:5])}")
    lr = state.learning_rate if lr is None else lr
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = p.grad
        p.adam_m *= b1
        p.adam_m += (1.0 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1.0 - b2) * (g * g)
        m_hat = p.adam_m / c1
        v_hat = p.adam_v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)
        p.grad = None

"""SGD with momentum, L2 decay, a step-halving schedule and optional weight EMA."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.00017
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be nonnegative, got {self.weight_decay}")


def sgd_step(params: Dict[str, Tensor], state: OptimizerState,
             no_decay: Optional[set] = None) -> None:
    """One momentum update, in place.

    ``v <- mu * v + grad + decay * p`` then ``p <- p - lr * v``. Names listed
    in ``no_decay`` (normalization scales and shifts) skip the decay term.
    Gradients are cleared afterwards.
    """
    no_decay = no_decay or set()
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; run backward first")
    for name, p in params.items():
        g = p.grad
        if state.weight_decay and name not in no_decay:
            g = g + state.weight_decay * p.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g
        state.velocity[name] = v
        p.data = p.data - state.learning_rate * v
        p.grad = None


def halving_schedule(base_lr: float, total_steps: int, halvings: int = 3) -> List[int]:
    """Evenly spaced milestone steps at which the learning rate is halved."""
    if total_steps < 1:
        return []
    return [int(round(total_steps * (i + 1) / (halvings + 1))) for i in range(halvings)]


def lr_at(step: int, base_lr: float, milestones: List[int]) -> float:
    return base_lr * 0.5 ** sum(step >= m for m in milestones)


class WeightEMA:
    """Exponential moving average of parameter values.

    Off by default; BN statistics already carry their own EMA.
    """

    def __init__(self, params: Dict[str, Tensor], decay: float = 0.9):
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in params.items()}

    def update(self, params: Dict[str, Tensor]) -> None:
        d = self.decay
        for k, p in params.items():
            self.shadow[k] = d * self.shadow[k] + (1 - d) * p.data

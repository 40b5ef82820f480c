"""AdamW with decoupled weight decay, plus the cosine learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class AdamWState:
    """Moment buffers for one parameter collection, keyed like the parameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Decay multiplies the parameter by (1 - lr * weight_decay) directly; it is
    never routed through the gradient, so a zero-gradient zero-decay step is
    the identity.
    """

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.params = params
        self.state = AdamWState(beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self, lr: float) -> None:
        if lr <= 0:
            raise ContractError(f"learning rate must be > 0, got {lr}")
        s = self.state
        s.step_count += 1
        bc1 = 1.0 - s.beta1 ** s.step_count
        bc2 = 1.0 - s.beta2 ** s.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter '{name}' has no gradient")
            g = p.grad
            if s.weight_decay != 0.0:
                p.data *= 1.0 - lr * s.weight_decay
            m = s.m[name]
            v = s.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine annealing from base_lr down to min_lr over total_steps."""

    base_lr: float = 5e-4
    min_lr: float = 0.0
    total_steps: int = 1

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ContractError(f"total_steps must be positive, got {self.total_steps}")
        if self.min_lr > self.base_lr:
            raise ContractError("min_lr must not exceed base_lr")

    def lr(self, t: int) -> float:
        if not (0 <= t <= self.total_steps):
            raise ContractError(f"step {t} outside [0, {self.total_steps}]")
        cos = np.cos(np.pi * t / self.total_steps)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + cos)


def cosine_lr(schedule: CosineSchedule, t: int) -> float:
    return schedule.lr(t)

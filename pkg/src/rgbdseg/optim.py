"""Adam with decoupled weight decay, plus a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


class DivergenceError(ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass
class OptimState:
    lr: float = 6e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimState) -> None:
    """One in-place update of ``params``; missing gradients count as zero."""
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter expected")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if m.shape != p.shape or (g is not None and g.shape != p.shape):
            raise ValueError(f"shape mismatch for parameter {p.shape}")
        if g is not None and not np.isfinite(g).all():
            raise DivergenceError("non-finite gradient", state.step + 1)

    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    new = []
    with np.errstate(over="ignore", invalid="ignore"):
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = np.zeros(p.shape)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + state.eps)
            data = p.data - state.lr * (update + state.weight_decay * p.data)
            # an overflowing second moment would silently zero the step
            if not (np.isfinite(v).all() and np.isfinite(data).all()):
                raise DivergenceError("optimizer state or parameters overflowed", state.step)
            new.append(data)
    for p, data in zip(params, new):
        p.data = data


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 6e-4, weight_decay: float = 0.01):
        self.params = list(params)
        self.state = OptimState(lr=lr, weight_decay=weight_decay)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(base: float, step: int, total: int) -> float:
    """Decay from ``base`` at step 0 to zero at ``total``."""
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))

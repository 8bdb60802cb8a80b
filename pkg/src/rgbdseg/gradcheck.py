"""Central finite-difference checks for taped gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

STEP = 1e-4
FLOOR = 1e-8


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(analytic) + FLOOR)


def check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    *,
    step: float = STEP,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
    name: str = "",
) -> GradReport:
    """Compare ``backward`` against central differences of the scalar ``fn()``.

    ``coords`` limits the check to that many randomly chosen entries per
    parameter; ``None`` checks every entry.
    """
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    checked = 0
    with no_grad():
        for p, ga in zip(params, analytic):
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            if coords is None or coords >= flat.size:
                idx = np.arange(flat.size)
            else:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, size=coords, replace=False)
            gflat = ga.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = fn().item()
                flat[i] = orig - step
                fm = fn().item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * step)
                worst = max(worst, float(relative_error(gflat[i], numeric)))
                checked += 1
    for p in params:
        p.grad = None
    return GradReport(name, worst, checked)


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar probe ``sum(out * weights)``; random weights keep gradients O(1)."""
    return (out * Tensor(weights)).sum()

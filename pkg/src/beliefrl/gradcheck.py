from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    coords: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    failing: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failing


def finite_diff_check(
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    tolerance: float = 1e-4,
    n_coords: int = 64,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    floor: float = 1e-7,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    `loss_and_grad` maps a flat parameter vector to (loss, flat gradient) and
    must be deterministic. The relative error of one coordinate is
    |a - n| / max(|a|, |n|, floor); the floor keeps coordinates whose true
    gradient is ~0 from reporting roundoff as relative error.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    theta = np.array(params, dtype=np.float64, copy=True)
    _, grad = loss_and_grad(theta.copy())
    n = theta.size
    coords = np.arange(n) if n <= n_coords else np.sort(rng.choice(n, size=n_coords, replace=False))
    numeric = np.empty(coords.size)
    for j, i in enumerate(coords):
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        numeric[j] = (loss_and_grad(tp)[0] - loss_and_grad(tm)[0]) / (2.0 * h)
    analytic = grad[coords]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    failing = [int(coords[j]) for j in np.flatnonzero(rel > tolerance)]
    return GradCheckReport(float(rel.max(initial=0.0)), tolerance, coords, analytic, numeric, failing)

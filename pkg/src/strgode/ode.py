"""Fixed-step integrators that stay differentiable through diffcore.

Step sizes may be scalars or per-sample arrays of shape (B,), which lets a
batch of windows with different time gaps share one integration call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffcore import NonFiniteError, Tensor, add, mul

Dynamics = Callable[[Tensor, float], Tensor]

METHODS = ("euler", "rk4")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    n_intermediate: int = 3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.n_intermediate < 1:
            raise ValueError("n_intermediate must be >= 1")


@dataclass(frozen=True)
class TimeGrid:
    t_start: float | np.ndarray
    t_end: float | np.ndarray
    n_intermediate: int = 3

    def __post_init__(self):
        if self.n_intermediate < 1:
            raise ValueError("n_intermediate must be >= 1")

    def step(self, z_ndim: int):
        h = (np.asarray(self.t_end, dtype=np.float64) - np.asarray(self.t_start, dtype=np.float64))
        h = h / self.n_intermediate
        if h.ndim == 0:
            return float(h)
        # per-sample steps broadcast over the trailing (N, d) axes
        return h.reshape(h.shape + (1,) * (z_ndim - h.ndim))


def _checked(f: Dynamics, z: Tensor, t) -> Tensor:
    out = f(z, t)
    if out.shape != z.shape:
        raise ValueError(f"dynamics returned shape {out.shape}, state has {z.shape}")
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("dynamics produced non-finite values")
    return out


def _shift(t, h, frac: float):
    h = np.asarray(h)
    if h.ndim and np.ndim(t) and h.size == np.size(t):
        h = h.reshape(np.shape(t))
    return t + frac * h


def euler_step(f: Dynamics, z: Tensor, t, h) -> Tensor:
    return add(z, mul(h, _checked(f, z, t)))


def rk4_step(f: Dynamics, z: Tensor, t, h) -> Tensor:
    half = np.multiply(h, 0.5)
    k1 = _checked(f, z, t)
    k2 = _checked(f, add(z, mul(half, k1)), _shift(t, h, 0.5))
    k3 = _checked(f, add(z, mul(half, k2)), _shift(t, h, 0.5))
    k4 = _checked(f, add(z, mul(h, k3)), _shift(t, h, 1.0))
    incr = add(add(k1, mul(2.0, add(k2, k3))), k4)
    return add(z, mul(np.divide(h, 6.0), incr))


_STEPPERS = {"euler": euler_step, "rk4": rk4_step}


def integrate(f: Dynamics, z0: Tensor, grid: TimeGrid, method: str = "rk4") -> Tensor:
    """State at ``grid.t_end`` starting from ``z0`` at ``grid.t_start``."""
    if method not in _STEPPERS:
        raise ValueError(f"unknown solver method {method!r}")
    if np.all(np.asarray(grid.t_start) == np.asarray(grid.t_end)):
        return z0
    stepper = _STEPPERS[method]
    h = grid.step(z0.ndim)
    t = np.asarray(grid.t_start, dtype=np.float64)
    z = z0
    for _ in range(grid.n_intermediate):
        z = stepper(f, z, t, h)
        t = _shift(t, h, 1.0)
    return z

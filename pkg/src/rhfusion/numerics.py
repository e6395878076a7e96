"""Fixed-step RK4 propagation of means and covariances.

All propagators hold the system matrices at their value at the start of each
step (zero-order hold on the grid), so that every estimator sees the same
matrices regardless of which RK4 stage is being evaluated.  Covariances are
symmetrized after every step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "PropagationError",
    "TimeGrid",
    "MatrixTrajectory",
    "LyapunovTrajectory",
    "EstimatorState",
    "rk4_step",
    "step_count",
    "propagate_lyapunov",
    "propagate_prediction",
    "propagate_mean",
    "propagate_covariance",
    "propagate_cross_prediction",
    "symmetrize",
]


class PropagationError(ArithmeticError):
    """A derivative evaluated to a non-finite value."""

    def __init__(self, t: float, what: str = "derivative"):
        self.t = t
        super().__init__(f"non-finite {what} at t={t:.12g}")


@dataclass(frozen=True)
class TimeGrid:
    """Grid points ``t0 + k*h`` for ``k = 0..count``."""

    t0: float
    h: float
    count: int

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("grid step must be positive")
        if self.count < 0:
            raise ValueError("grid count must be nonnegative")

    def time(self, k: int) -> float:
        # multiplication, not accumulation, so grid points never drift
        return self.t0 + k * self.h

    @property
    def t_end(self) -> float:
        return self.time(self.count)

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.count + 1) * self.h

    def index(self, t: float) -> int:
        q = (t - self.t0) / self.h
        k = round(q)
        if abs(q - k) > 1e-6:
            raise ValueError(f"t={t!r} is not on the grid (t0={self.t0}, h={self.h})")
        return int(k)

    def __len__(self) -> int:
        return self.count + 1


@dataclass(frozen=True)
class MatrixTrajectory:
    grid: TimeGrid
    values: np.ndarray  # (count + 1, n, n)

    def __post_init__(self):
        if len(self.values) != self.grid.count + 1:
            raise ValueError("trajectory length does not match its grid")

    def at(self, t: float) -> np.ndarray:
        return self.values[self.grid.index(t)]

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, k):
        return self.values[k]


@dataclass(frozen=True)
class LyapunovTrajectory:
    """Mean and covariance trajectories on a shared grid."""

    grid: TimeGrid
    means: np.ndarray  # (count + 1, n)
    covs: MatrixTrajectory

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        k = self.grid.index(t)
        return self.means[k], self.covs.values[k]


@dataclass(frozen=True)
class EstimatorState:
    """Mean, covariance and timestamp of a filter or predictor.

    ``mean`` may carry leading batch dimensions (one row per Monte-Carlo run);
    the covariance is shared.
    """

    t: float
    mean: np.ndarray
    cov: np.ndarray


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.swapaxes(-1, -2))


def rk4_step(f: Callable[[float, np.ndarray], np.ndarray], t: float, x: np.ndarray, h: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``x' = f(t, x)`` from ``t`` to ``t + h``."""
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + (0.5 * h) * k1)
    k3 = f(t + 0.5 * h, x + (0.5 * h) * k2)
    k4 = f(t + h, x + h * k3)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        for s, k in ((t, k1), (t + 0.5 * h, k2), (t + 0.5 * h, k3), (t + h, k4)):
            if not np.all(np.isfinite(k)):
                raise PropagationError(s)
        raise PropagationError(t + h, "state")
    return out


def step_count(t_from: float, t_to: float, h: float) -> int:
    q = (t_to - t_from) / h
    k = round(q)
    if k < 0:
        raise ValueError(f"cannot propagate backwards from {t_from} to {t_to}")
    if abs(q - k) > 1e-6:
        raise ValueError(f"interval [{t_from}, {t_to}] is not a whole number of steps of {h}")
    return int(k)


def _mean_step(F, t, mean, h):
    FT = F.T
    return rk4_step(lambda s, x: x @ FT, t, mean, h)


def _cov_step(F, Qt, t, cov, h):
    FT = F.T
    return symmetrize(rk4_step(lambda s, P: F @ P + P @ FT + Qt, t, cov, h))


def _lyapunov_step(F, Qt, t, mean, cov, h):
    return _mean_step(F, t, mean, h), _cov_step(F, Qt, t, cov, h)


def propagate_lyapunov(system, t_from: float, t_to: float, mean0, cov0, h: float) -> LyapunovTrajectory:
    """Unconditional mean and covariance, ``x' = F x`` and ``P' = F P + P F' + G Q G'``.

    Returns the trajectory at every grid point from ``t_from`` to ``t_to``.
    """
    steps = step_count(t_from, t_to, h)
    grid = TimeGrid(t_from, h, steps)
    mean = np.array(mean0, dtype=float)
    cov = np.array(cov0, dtype=float)
    means = np.empty((steps + 1,) + mean.shape)
    covs = np.empty((steps + 1,) + cov.shape)
    means[0], covs[0] = mean, cov
    for k in range(steps):
        t = grid.time(k)
        mean, cov = _lyapunov_step(system.F(t), system.Qtilde(t), t, mean, cov, h)
        means[k + 1], covs[k + 1] = mean, cov
    return LyapunovTrajectory(grid, means, MatrixTrajectory(grid, covs))


def propagate_prediction(system, t_from: float, t_to: float, state: EstimatorState, h: float) -> EstimatorState:
    """Open-loop predictor: the same ODEs as :func:`propagate_lyapunov`.

    With ``t_from == t_to`` the input state is returned unchanged.
    """
    steps = step_count(t_from, t_to, h)
    if steps == 0:
        return state
    mean, cov = state.mean, state.cov
    for k in range(steps):
        t = t_from + k * h
        mean, cov = _lyapunov_step(system.F(t), system.Qtilde(t), t, mean, cov, h)
    return EstimatorState(t_to, mean, cov)


def propagate_mean(system, t_from: float, t_to: float, mean: np.ndarray, h: float) -> np.ndarray:
    """Mean part of :func:`propagate_prediction` alone, bitwise identical to it."""
    for k in range(step_count(t_from, t_to, h)):
        t = t_from + k * h
        mean = _mean_step(system.F(t), t, mean, h)
    return mean


def propagate_covariance(system, t_from: float, t_to: float, cov: np.ndarray, h: float) -> np.ndarray:
    """Covariance part of :func:`propagate_prediction` alone."""
    for k in range(step_count(t_from, t_to, h)):
        t = t_from + k * h
        cov = _cov_step(system.F(t), system.Qtilde(t), t, cov, h)
    return cov


def propagate_cross_prediction(
    system, t_from: float, t_to: float, P_ij: np.ndarray, h: float, include_process_noise: bool = False
) -> np.ndarray:
    """Cross-covariance of two open-loop prediction errors.

    By default integrates the homogeneous equation ``P' = F P + P F'``.  With
    ``include_process_noise`` the ``G Q G'`` term is added; both prediction
    errors are driven by the same process noise, and Monte-Carlo runs agree
    with that variant (see ``simulation.cross_cov_oracle``).
    """
    steps = step_count(t_from, t_to, h)
    P = np.array(P_ij, dtype=float)
    for k in range(steps):
        t = t_from + k * h
        F = system.F(t)
        FT = F.T
        if include_process_noise:
            Qt = system.Qtilde(t)
            P = rk4_step(lambda s, X: F @ X + X @ FT + Qt, t, P, h)
        else:
            P = rk4_step(lambda s, X: F @ X + X @ FT, t, P, h)
    return P

"""Receding-horizon filters and predictors.

Every estimate at time ``t`` is produced by a fresh pass over the horizon
``[t - T, t]`` (truncated at ``t0`` early on), started from the unconditional
mean and covariance at the horizon start.  Measurements outside the horizon
are never read.

A pass has two halves.  :func:`riccati_pass` integrates the covariance and
records the gain at every RK4 stage; it depends only on the model, so the
result can be computed once and reused across Monte-Carlo runs.
:func:`replay_mean` then integrates the mean with those stage gains, so both
halves see identical intermediate times.  Measurements are held constant
over each step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import Scenario, stack_sensors
from .numerics import EstimatorState, PropagationError, TimeGrid, propagate_prediction, symmetrize

__all__ = [
    "EstimatorState",
    "EstimatorUnavailable",
    "GainTrajectory",
    "HorizonMeasurements",
    "horizon_initial_conditions",
    "riccati_pass",
    "replay_mean",
    "run_crhf",
    "run_local_rhf",
    "run_crhp",
    "run_local_rhp",
]


class EstimatorUnavailable(RuntimeError):
    """An estimator lacks measurements somewhere on its horizon."""

    def __init__(self, message: str, sensors: Sequence[int] = ()):
        self.sensors = tuple(sensors)
        super().__init__(message)


@dataclass(frozen=True)
class GainTrajectory:
    """Covariances and gains of one horizon pass.

    ``covs[k]`` and ``gains[k]`` are at grid point ``k`` of ``grid``.
    ``stage_gains[k, s]`` is the gain used at RK4 stage ``s`` of step ``k``;
    ``H[k]`` is the stacked observation matrix held over step ``k``.
    """

    grid: TimeGrid
    sensors: tuple[int, ...]
    covs: np.ndarray  # (count + 1, n, n)
    gains: np.ndarray  # (count + 1, n, m)
    stage_gains: np.ndarray  # (count, 4, n, m)
    H: np.ndarray  # (count, m, n)

    def __len__(self) -> int:
        return len(self.gains)

    @property
    def final_cov(self) -> np.ndarray:
        return self.covs[-1]


@dataclass(frozen=True)
class HorizonMeasurements:
    """Measurements of each sensor on a horizon grid.

    ``values[i]`` has shape ``(grid.count + 1, m_i)``, or
    ``(grid.count + 1, batch, m_i)`` for a batch of Monte-Carlo runs, and is
    ``None`` when sensor ``i`` is missing any sample of the horizon.
    """

    grid: TimeGrid
    values: Mapping[int, np.ndarray | None] = field(default_factory=dict)

    def get(self, i: int) -> np.ndarray | None:
        return self.values.get(i)

    def available(self) -> tuple[int, ...]:
        return tuple(sorted(i for i, v in self.values.items() if v is not None))


def horizon_initial_conditions(scenario: Scenario, t: float, T: float | None = None) -> EstimatorState:
    """Unconditional mean and covariance at the start of the horizon ending at ``t``.

    Looked up in the scenario's precomputed unconditional trajectory.  For
    ``t - T < t0`` the horizon is truncated and the initial statistics at
    ``t0`` are returned.
    """
    k = scenario.index(t)
    steps = scenario.horizon_steps if T is None else round(T / scenario.h)
    k0 = max(0, k - steps)
    unc = scenario.unconditional
    return EstimatorState(scenario.time(k0), unc.means[k0], unc.covs.values[k0])


def riccati_pass(scenario: Scenario, sensors: Sequence[int], k_start: int, k_end: int,
                 P_start: np.ndarray | None = None) -> GainTrajectory:
    """Integrate ``P' = F P + P F' + G Q G' - P H' R^-1 H P`` over grid steps ``k_start..k_end``.

    ``H`` and ``R`` are the stack of ``sensors``.  The covariance starts from
    the unconditional covariance at ``k_start`` unless ``P_start`` is given.
    """
    sensors = tuple(sorted(set(sensors)))
    system = scenario.system
    h = scenario.h
    if P_start is None:
        P_start = scenario.unconditional.covs.values[k_start]
    steps = k_end - k_start
    t0 = scenario.time(k_start)
    grid = TimeGrid(t0, h, steps)

    P = np.array(P_start, dtype=float)
    n = P.shape[0]
    H0, _ = stack_sensors(scenario.suite, sensors, t0)
    m = H0.shape[0]
    covs = np.empty((steps + 1, n, n))
    gains = np.empty((steps + 1, n, m))
    stage_gains = np.empty((max(steps, 0), 4, n, m))
    Hs = np.empty((max(steps, 0), m, n))
    covs[0] = P
    _, R0 = stack_sensors(scenario.suite, sensors, t0)
    gains[0] = P @ np.linalg.solve(R0, H0).T

    for k in range(steps):
        t = scenario.time(k_start + k)
        F = system.F(t)
        FT = F.T
        Qt = system.Qtilde(t)
        H, R = stack_sensors(scenario.suite, sensors, t)
        HtRinv = np.linalg.solve(R, H).T  # H' R^-1 (R symmetric)
        HtRinvH = HtRinv @ H
        Hs[k] = H

        def deriv(X):
            return F @ X + X @ FT + Qt - X @ HtRinvH @ X

        # explicit RK4 so the stage covariances, and hence gains, can be kept
        P1 = P
        with np.errstate(over="ignore", invalid="ignore"):
            K1 = deriv(P1)
            P2 = P + (0.5 * h) * K1
            K2 = deriv(P2)
            P3 = P + (0.5 * h) * K2
            K3 = deriv(P3)
            P4 = P + h * K3
            K4 = deriv(P4)
        for s, Ps in enumerate((P1, P2, P3, P4)):
            stage_gains[k, s] = Ps @ HtRinv
        with np.errstate(over="ignore", invalid="ignore"):
            P = symmetrize(P + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4))
        if not np.all(np.isfinite(P)):
            raise PropagationError(t + h, "Riccati covariance")
        covs[k + 1] = P
        gains[k + 1] = P @ HtRinv
    return GainTrajectory(grid, sensors, covs, gains, stage_gains, Hs)


def replay_mean(scenario: Scenario, gains: GainTrajectory, x_start: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Integrate ``x' = F x + L (y - H x)`` with the stage gains of ``gains``.

    ``Y`` holds the stacked measurements at each horizon grid point (leading
    axis), optionally with a batch axis; step ``k`` holds ``Y[k]`` constant.
    ``x_start`` broadcasts against the batch.
    """
    system = scenario.system
    h = gains.grid.h
    steps = gains.grid.count
    x = np.array(x_start, dtype=float)
    if Y.ndim == 3:
        x = np.broadcast_to(x, Y.shape[1:2] + x.shape[-1:]).copy()
    for k in range(steps):
        t = gains.grid.time(k)
        FT = system.F(t).T
        HT = gains.H[k].T
        y = Y[k]
        L1, L2, L3, L4 = (L.T for L in gains.stage_gains[k])
        k1 = x @ FT + (y - x @ HT) @ L1
        x2 = x + (0.5 * h) * k1
        k2 = x2 @ FT + (y - x2 @ HT) @ L2
        x3 = x + (0.5 * h) * k2
        k3 = x3 @ FT + (y - x3 @ HT) @ L3
        x4 = x + h * k3
        k4 = x4 @ FT + (y - x4 @ HT) @ L4
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def _horizon_indices(scenario: Scenario, t: float) -> tuple[int, int]:
    k = scenario.index(t)
    return scenario.horizon_start(k), k


def _stacked_horizon(meas: HorizonMeasurements, sensors: Sequence[int], k_start: int, k_end: int,
                     scenario: Scenario) -> np.ndarray:
    """Concatenate sensor measurements on ``[k_start, k_end]`` along the last axis."""
    missing = [i for i in sensors if meas.get(i) is None]
    if missing:
        names = ", ".join(str(i + 1) for i in missing)
        raise EstimatorUnavailable(f"sensor(s) {names} missing horizon samples at t={scenario.time(k_end):g}",
                                   missing)
    g = meas.grid
    lo = k_start - round((g.t0 - scenario.config.t0) / scenario.h)
    hi = lo + (k_end - k_start)
    if lo < 0 or hi > g.count:
        raise EstimatorUnavailable(f"measurements do not cover the horizon ending at t={scenario.time(k_end):g}",
                                   sensors)
    parts = [np.asarray(meas.get(i))[lo : hi + 1] for i in sensors]
    for i, p in zip(sensors, parts):
        if np.isnan(p).any():
            raise EstimatorUnavailable(f"sensor {i + 1} has missing samples in the horizon", [i])
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=-1)


def _run_filter(scenario, sensors, t, meas, gains):
    k_start, k_end = _horizon_indices(scenario, t)
    Y = _stacked_horizon(meas, sensors, k_start, k_end, scenario)
    if gains is None:
        gains = riccati_pass(scenario, sensors, k_start, k_end)
    elif (gains.grid.count != k_end - k_start or gains.sensors != tuple(sensors)
          or abs(gains.grid.t0 - scenario.time(k_start)) > 1e-9 * scenario.h):
        raise ValueError("precomputed gains do not match this horizon or sensor set")
    x0 = scenario.unconditional.means[k_start]
    mean = replay_mean(scenario, gains, x0, Y)
    return EstimatorState(scenario.time(k_end), mean, gains.final_cov), gains


def run_crhf(scenario: Scenario, t: float, meas: HorizonMeasurements, active: Sequence[int] | None = None,
             gains: GainTrajectory | None = None) -> tuple[EstimatorState, GainTrajectory]:
    """Centralized receding-horizon filter over all ``active`` sensors (default: all).

    Raises
    ------
    EstimatorUnavailable
        If any active sensor is missing a sample on the horizon.
    """
    active = tuple(sorted(set(range(scenario.N) if active is None else active)))
    if not active:
        raise ValueError("active sensor set is empty")
    return _run_filter(scenario, active, t, meas, gains)


def run_local_rhf(scenario: Scenario, i: int, t: float, meas: HorizonMeasurements,
                  gains: GainTrajectory | None = None) -> tuple[EstimatorState, GainTrajectory]:
    """Local receding-horizon filter using sensor ``i`` only."""
    if not 0 <= i < scenario.N:
        raise IndexError(f"sensor index {i} out of range")
    return _run_filter(scenario, (i,), t, meas, gains)


def _predict(scenario: Scenario, state: EstimatorState) -> EstimatorState:
    t_to = state.t + scenario.config.Delta
    return propagate_prediction(scenario.system, state.t, t_to, state, scenario.h)


def run_crhp(scenario: Scenario, t: float, meas: HorizonMeasurements, active: Sequence[int] | None = None,
             gains: GainTrajectory | None = None) -> EstimatorState:
    """Centralized predictor: :func:`run_crhf` followed by open-loop prediction over ``Delta``."""
    state, _ = run_crhf(scenario, t, meas, active, gains)
    return _predict(scenario, state)


def run_local_rhp(scenario: Scenario, i: int, t: float, meas: HorizonMeasurements,
                  gains: GainTrajectory | None = None) -> EstimatorState:
    state, _ = run_local_rhf(scenario, i, t, meas, gains)
    return _predict(scenario, state)

"""Truth and measurement simulation, Monte-Carlo MSE and the cross-covariance oracle.

Truth uses Euler-Maruyama on the scenario grid,
``x[k+1] = x[k] + h (F + dF) x[k] + G eta[k]`` with ``eta ~ N(0, Q h)``, where
``dF`` is the truth-only perturbation schedule.  A continuous-time
measurement with noise intensity ``R`` is sampled at each grid point as
``y[k] = H x[k] + zeta[k]``, ``zeta ~ N(0, R / h)``.

Run ``k`` draws from its own generator seeded with
``SeedSequence(rng_seed, spawn_key=(k,))``.  Runs are processed in chunks of
fixed size and chunk results are merged in chunk order, so reported values
do not depend on the number of worker threads.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .estimators import HorizonMeasurements, riccati_pass, run_crhf, run_local_rhf
from .fusion import (
    CrossCovState,
    FusionSchedule,
    cross_cov_horizon,
    cross_cov_predict,
    fuse,
    precompute_schedule,
)
from .model import LtvSystem, Scenario, SensorSuite
from .numerics import EstimatorState, TimeGrid, propagate_mean

__all__ = [
    "TruthTrajectory",
    "MeasurementSet",
    "MseReport",
    "OracleResult",
    "run_rng",
    "simulate_truth",
    "generate_measurements",
    "run_monte_carlo",
    "cross_cov_oracle",
    "default_workers",
]

log = logging.getLogger(__name__)

CHUNK_SIZE = 250


@dataclass(frozen=True)
class TruthTrajectory:
    """True states on ``grid``; ``states`` is ``(count + 1, n)`` or ``(count + 1, batch, n)``."""

    grid: TimeGrid
    states: np.ndarray

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class MeasurementSet:
    """Sampled measurements of every sensor on ``grid``.

    ``values[i]`` is ``(count + 1, m_i)`` (or with a batch axis after the
    time axis) and holds NaN where sensor ``i`` is unavailable;
    ``available[i]`` flags the grid points that carry data.
    """

    grid: TimeGrid
    values: tuple[np.ndarray, ...]
    available: tuple[np.ndarray, ...]

    def horizon(self, k_start: int, k_end: int) -> HorizonMeasurements:
        """The window ``[k_start, k_end]``; sensors with any gap there are absent."""
        vals = {}
        sub = TimeGrid(self.grid.time(k_start), self.grid.h, k_end - k_start)
        for i, (v, a) in enumerate(zip(self.values, self.available)):
            vals[i] = v[k_start : k_end + 1] if a[k_start : k_end + 1].all() else None
        return HorizonMeasurements(sub, vals)

    def all(self) -> HorizonMeasurements:
        """Every sample on the grid; estimators slice out their own horizon."""
        return HorizonMeasurements(self.grid, dict(enumerate(self.values)))


def run_rng(seed: int, k: int) -> np.random.Generator:
    """Generator for Monte-Carlo run ``k`` of a scenario seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))


def _psd_sqrt(P: np.ndarray) -> np.ndarray:
    """A factor ``S`` with ``S S' = P`` for symmetric PSD ``P`` (possibly singular)."""
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def _simulate_truth_batch(system: LtvSystem, grid: TimeGrid, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    n, r, K, h = system.n, system.r, grid.count, grid.h
    b = len(rngs)
    z0 = np.empty((b, n))
    zv = np.empty((K, b, r))
    for a, rng in enumerate(rngs):
        z0[a] = rng.standard_normal(n)
        zv[:, a, :] = rng.standard_normal((K, r))
    x = np.empty((K + 1, b, n))
    x[0] = system.x0_mean + z0 @ _psd_sqrt(system.P0).T
    sqrt_h = np.sqrt(h)
    maps = {}  # the piecewise matrices return shared objects, so factor each pair once
    for k in range(K):
        t = grid.time(k)
        A = system.F_true(t)
        G, Q = system.G(t), system.Q(t)
        key = (id(G), id(Q))
        if key not in maps:
            maps[key] = (G @ _psd_sqrt(Q) * sqrt_h).T
        x[k + 1] = x[k] + (h * (x[k] @ A.T) + zv[k] @ maps[key])
    return x


def _measure_batch(states: np.ndarray, grid: TimeGrid, suite: SensorSuite,
                   rngs: Sequence[np.random.Generator]) -> MeasurementSet:
    K1, b, _ = states.shape
    values, available = [], []
    for sensor in suite:
        m = sensor.m
        z = np.empty((K1, b, m))
        for a, rng in enumerate(rngs):
            z[:, a, :] = rng.standard_normal((K1, m))
        y = np.empty((K1, b, m))
        avail = np.zeros(K1, dtype=bool)
        for k in range(K1):
            t = grid.time(k)
            avail[k] = sensor.is_available(t)
            if avail[k]:
                S = np.linalg.cholesky(sensor.R(t) / grid.h)
                y[k] = states[k] @ sensor.H(t).T + z[k] @ S.T
            else:
                y[k] = np.nan
        values.append(y)
        available.append(avail)
    return MeasurementSet(grid, tuple(values), tuple(available))


def simulate_truth(system: LtvSystem, grid: TimeGrid, rng: np.random.Generator) -> TruthTrajectory:
    """One Euler-Maruyama sample path, including the truth-only perturbations."""
    return TruthTrajectory(grid, _simulate_truth_batch(system, grid, [rng])[:, 0, :])


def generate_measurements(truth: TruthTrajectory, suite: SensorSuite, rng: np.random.Generator) -> MeasurementSet:
    """Sample every sensor along ``truth``; samples exist only inside availability intervals."""
    ms = _measure_batch(truth.states[:, None, :], truth.grid, suite, [rng])
    return MeasurementSet(ms.grid, tuple(v[:, 0, :] for v in ms.values), ms.available)


def default_workers() -> int:
    env = os.environ.get("RH_FUSION_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer RH_FUSION_THREADS=%r", env)
    return min(8, os.cpu_count() or 1)


# --------------------------------------------------------------------------
# Monte-Carlo MSE


@dataclass
class MseReport:
    """Empirical and theoretical mean-square errors at each output time.

    Arrays are indexed ``[output, component]``; entries where an estimator is
    unavailable are NaN.  ``sample`` holds the estimates of run 0 and its
    truth at each prediction target time.
    """

    times: np.ndarray
    pred_times: np.ndarray
    estimators: tuple[str, ...]
    runs: int
    mse: dict[str, np.ndarray]
    mean_error: dict[str, np.ndarray]
    mean_error_se: dict[str, np.ndarray]
    theory: dict[str, np.ndarray]
    available: dict[str, np.ndarray]
    warmup: np.ndarray
    active: tuple[tuple[int, ...], ...]
    sample: dict[str, np.ndarray] = field(default_factory=dict)

    def trace_theory(self, est: str) -> np.ndarray:
        return self.theory[est].sum(axis=1)


def _estimator_names(N: int) -> tuple[str, ...]:
    return ("crhp", "drhp") + tuple(f"lrhp{i + 1}" for i in range(N))


def _predict_mean(scenario: Scenario, t: float, x: np.ndarray) -> np.ndarray:
    cfg = scenario.config
    return propagate_mean(scenario.system, t, t + cfg.Delta, x, cfg.h)


def estimate_batch(scenario: Scenario, schedule: FusionSchedule, meas: MeasurementSet) -> dict[str, np.ndarray]:
    """Predictions of every estimator at every output instant for a batch of runs.

    Returns arrays of shape ``(outputs, batch, n)``, NaN where unavailable.
    """
    names = _estimator_names(scenario.N)
    b = meas.values[0].shape[1]
    n = scenario.n
    out = {name: np.full((len(schedule), b, n), np.nan) for name in names}
    hm = meas.all()
    for o, inst in enumerate(schedule):
        t = inst.t
        preds = []
        for i in inst.active:
            state, _ = run_local_rhf(scenario, i, t, hm, gains=inst.local_gains[i])
            p = _predict_mean(scenario, t, state.mean)
            out[f"lrhp{i + 1}"][o] = p
            preds.append(EstimatorState(inst.t_pred, p, inst.local_pred_cov[i]))
        if preds:
            out["drhp"][o] = fuse(preds, inst.cross_pred, weights=inst.weights).mean
        if inst.central_available:
            state, _ = run_crhf(scenario, t, hm, inst.active, gains=inst.central_gains)
            out["crhp"][o] = _predict_mean(scenario, t, state.mean)
    return out


def _mc_chunk(scenario: Scenario, schedule: FusionSchedule, runs: range):
    rngs = [run_rng(scenario.config.rng_seed, k) for k in runs]
    grid = scenario.grid
    x = _simulate_truth_batch(scenario.system, grid, rngs)
    meas = _measure_batch(x, grid, scenario.suite, rngs)
    est = estimate_batch(scenario, schedule, meas)
    target = np.array([inst.k + scenario.delta_steps for inst in schedule])
    truth_pred = x[target]  # (outputs, b, n)
    sums, sqs = {}, {}
    for name, v in est.items():
        e = truth_pred - v
        sums[name] = e.sum(axis=1)
        sqs[name] = (e * e).sum(axis=1)
    sample = None
    if runs.start == 0:
        sample = {name: v[:, 0, :] for name, v in est.items()}
        sample["truth"] = truth_pred[:, 0, :]
    return sums, sqs, sample


def run_monte_carlo(scenario: Scenario, schedule: FusionSchedule | None = None, workers: int | None = None,
                    chunk_size: int = CHUNK_SIZE) -> MseReport:
    """Empirical MSE of every estimator over ``scenario.config.mc_runs`` runs.

    Each run draws fresh truth and measurements; errors are taken against the
    truth at the prediction target time ``t + Delta``.
    """
    if schedule is None:
        schedule = precompute_schedule(scenario, cross_prediction_noise=True)
    runs = scenario.config.mc_runs
    chunks = [range(s, min(s + chunk_size, runs)) for s in range(0, runs, chunk_size)]
    workers = default_workers() if workers is None else max(1, workers)
    if workers == 1 or len(chunks) == 1:
        results = [_mc_chunk(scenario, schedule, c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _mc_chunk(scenario, schedule, c), chunks))

    names = _estimator_names(scenario.N)
    n = scenario.n
    mse, bias, bias_se, theory, avail = {}, {}, {}, {}, {}
    for name in names:
        s = np.sum(np.stack([r[0][name] for r in results]), axis=0) / runs
        q = np.sum(np.stack([r[1][name] for r in results]), axis=0) / runs
        mse[name] = q
        bias[name] = s
        var = np.clip(q - s * s, 0.0, None) * runs / max(runs - 1, 1)
        bias_se[name] = np.sqrt(var / runs)
        theory[name] = np.full((len(schedule), n), np.nan)
        avail[name] = np.zeros(len(schedule), dtype=bool)
    for o, inst in enumerate(schedule):
        if inst.central_available:
            theory["crhp"][o] = np.diag(inst.P_crhp)
            avail["crhp"][o] = True
        if inst.active:
            theory["drhp"][o] = np.diag(inst.P_drhp)
            avail["drhp"][o] = True
        for i in inst.active:
            theory[f"lrhp{i + 1}"][o] = np.diag(inst.local_pred_cov[i])
            avail[f"lrhp{i + 1}"][o] = True

    return MseReport(
        times=np.array([inst.t for inst in schedule]),
        pred_times=np.array([inst.t_pred for inst in schedule]),
        estimators=names,
        runs=runs,
        mse=mse,
        mean_error=bias,
        mean_error_se=bias_se,
        theory=theory,
        available=avail,
        warmup=np.array([inst.warmup for inst in schedule]),
        active=tuple(inst.active for inst in schedule),
        sample=results[0][2],
    )


# --------------------------------------------------------------------------
# Cross-covariance oracle


@dataclass(frozen=True)
class OracleResult:
    """Empirical versus integrated error cross-covariance of local estimators ``i`` and ``j``.

    ``integrated_pred`` carries the cross-covariance over the prediction
    interval without process noise; ``integrated_pred_noise`` with it.
    """

    i: int
    j: int
    t: float
    t_pred: float
    runs: int
    empirical: np.ndarray
    stderr: np.ndarray
    empirical_pred: np.ndarray
    stderr_pred: np.ndarray
    integrated: np.ndarray
    integrated_pred: np.ndarray
    integrated_pred_noise: np.ndarray
    local_cov: np.ndarray  # P_ii at t

    def z_scores(self, which: str = "filter") -> np.ndarray:
        if which == "filter":
            return (self.empirical - self.integrated) / self.stderr
        if which == "pred":
            return (self.empirical_pred - self.integrated_pred) / self.stderr_pred
        if which == "pred_noise":
            return (self.empirical_pred - self.integrated_pred_noise) / self.stderr_pred
        raise ValueError(which)

    def passes(self, which: str = "filter", k: float = 3.0) -> bool:
        return bool(np.all(np.abs(self.z_scores(which)) <= k))


def cross_cov_oracle(scenario: Scenario, i: int, j: int, runs: int, t: float | None = None,
                     chunk_size: int = 2000, workers: int | None = None) -> OracleResult:
    """Monte-Carlo estimate of ``E[(x - x_i)(x - x_j)']`` at ``t`` and ``t + Delta``.

    Both local filters consume the same simulated truth, each with its own
    measurement noise, exactly as they do in operation.  ``t`` defaults to
    ``t_end``.
    """
    if i == j:
        raise ValueError("the oracle needs two distinct sensors")
    for s in (i, j):
        if not 0 <= s < scenario.N:
            raise IndexError(f"sensor index {s} out of range")
    if runs < 1000:
        warnings.warn(f"only {runs} oracle runs; standard errors will be large", stacklevel=2)
    cfg = scenario.config
    t = cfg.t_end if t is None else t
    k = scenario.index(t)
    k_pred = k + scenario.delta_steps
    k0 = scenario.horizon_start(k)
    if not (scenario.sensor_active(i, k) and scenario.sensor_active(j, k)):
        raise ValueError(f"sensors {i + 1} and {j + 1} are not both available at t={t}")
    t_pred = scenario.time(k_pred)

    gi = riccati_pass(scenario, (i,), k0, k)
    gj = riccati_pass(scenario, (j,), k0, k)
    P_ij = cross_cov_horizon(scenario, i, j, t, gi, gj)
    P_ij_pred = cross_cov_predict(scenario, P_ij, t)
    P_ij_pred_noise = cross_cov_predict(scenario, P_ij, t, include_process_noise=True)

    grid = TimeGrid(cfg.t0, cfg.h, k_pred)
    sub = SensorSuite((scenario.suite[i], scenario.suite[j]))

    def chunk(rr: range):
        rngs = [run_rng(cfg.rng_seed, r) for r in rr]
        x = _simulate_truth_batch(scenario.system, grid, rngs)
        meas = _measure_batch(x, grid, sub, rngs)
        hm = HorizonMeasurements(grid, {i: meas.values[0], j: meas.values[1]})
        si, _ = run_local_rhf(scenario, i, t, hm, gains=gi)
        sj, _ = run_local_rhf(scenario, j, t, hm, gains=gj)
        ei = x[k] - si.mean
        ej = x[k] - sj.mean
        ei_p = x[k_pred] - _predict_mean(scenario, t, si.mean)
        ej_p = x[k_pred] - _predict_mean(scenario, t, sj.mean)
        prod = ei[:, :, None] * ej[:, None, :]
        prod_p = ei_p[:, :, None] * ej_p[:, None, :]
        return prod.sum(0), (prod * prod).sum(0), prod_p.sum(0), (prod_p * prod_p).sum(0)

    chunks = [range(s, min(s + chunk_size, runs)) for s in range(0, runs, chunk_size)]
    workers = default_workers() if workers is None else max(1, workers)
    if workers == 1 or len(chunks) == 1:
        parts = [chunk(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(chunk, chunks))
    s1, s2, p1, p2 = (np.sum(np.stack([p[a] for p in parts]), axis=0) for a in range(4))

    def mean_se(s, q):
        mean = s / runs
        var = np.clip(q / runs - mean * mean, 0.0, None) * runs / max(runs - 1, 1)
        return mean, np.sqrt(var / runs)

    emp, se = mean_se(s1, s2)
    emp_p, se_p = mean_se(p1, p2)
    return OracleResult(i, j, t, t_pred, runs, emp, se, emp_p, se_p, P_ij, P_ij_pred, P_ij_pred_noise,
                        gi.final_cov)

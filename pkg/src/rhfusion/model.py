"""Plant, sensor suite and scenario configuration.

Time-varying matrices are piecewise constant: a :class:`PiecewiseMatrix`
holds a sorted list of ``(t_start, matrix)`` breakpoints and returns the
matrix of the last breakpoint at or before the query time.  Estimators only
ever evaluate them on the integration grid.

A scenario document is a JSON object with three sections::

    {
      "system":  {"F": ..., "G": ..., "Q": ..., "x0_mean": [...], "P0": [[...]],
                  "delta_schedule": [{"interval": [a, b], "matrix": [[...]]}]},
      "sensors": [{"name": "s1", "H": ..., "R": ..., "availability": [[a, b]]}],
      "config":  {"t0": 0, "t_end": 5, "T": 0.8, "Delta": 0.5, "h": 0.01,
                  "eval_stride": 5, "mc_runs": 1000, "rng_seed": 1}
    }

Every matrix entry is either a row-major nested list, a bare number (1x1),
or ``{"breakpoints": [[t_start, matrix], ...]}``.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .numerics import LyapunovTrajectory, TimeGrid, propagate_lyapunov

__all__ = [
    "PiecewiseMatrix",
    "LtvSystem",
    "SensorModel",
    "SensorSuite",
    "ScenarioConfig",
    "Scenario",
    "ScenarioError",
    "ValidationError",
    "validate",
    "stack_sensors",
    "scenario_from_dict",
    "load_scenario",
    "scenario_to_dict",
]

# Grid-alignment tolerance, as a fraction of the step size.
_GRID_RTOL = 1e-9


class ScenarioError(ValueError):
    """Raised when a scenario document cannot be parsed."""


class ValidationError(ValueError):
    """Raised by :func:`validate`; ``violations`` lists every problem found."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class PiecewiseMatrix:
    """A matrix-valued function of time, constant between breakpoints."""

    def __init__(self, breakpoints: Sequence[tuple[float, Any]]):
        if not breakpoints:
            raise ScenarioError("a piecewise matrix needs at least one breakpoint")
        pts = sorted(((float(t), _as_matrix(m)) for t, m in breakpoints), key=lambda p: p[0])
        self._times = [t for t, _ in pts]
        self._values = [m for _, m in pts]
        for m in self._values:
            m.setflags(write=False)

    @classmethod
    def constant(cls, value) -> "PiecewiseMatrix":
        return cls([(-math.inf, value)])

    def __call__(self, t: float) -> np.ndarray:
        k = bisect.bisect_right(self._times, t + 1e-12 * max(1.0, abs(t))) - 1
        return self._values[max(k, 0)]

    @property
    def values(self) -> list[np.ndarray]:
        return list(self._values)

    @property
    def breakpoints(self) -> list[tuple[float, np.ndarray]]:
        return list(zip(self._times, self._values))

    @property
    def is_constant(self) -> bool:
        return len(self._values) == 1

    @property
    def shape(self) -> tuple[int, int]:
        return self._values[0].shape

    def __repr__(self) -> str:
        if self.is_constant:
            return f"PiecewiseMatrix.constant({self._values[0].tolist()!r})"
        return f"PiecewiseMatrix({len(self._values)} breakpoints)"


def _as_matrix(value) -> np.ndarray:
    m = np.array(value, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ScenarioError(f"expected a matrix, got array of shape {m.shape}")
    return m


def _as_piecewise(value) -> PiecewiseMatrix:
    if isinstance(value, PiecewiseMatrix):
        return value
    if callable(value):
        raise ScenarioError("time-varying matrices must be given as breakpoints, not callables")
    return PiecewiseMatrix.constant(value)


@dataclass(frozen=True)
class LtvSystem:
    """Linear time-varying plant ``dx = F x dt + G dv`` with ``E[dv dv'] = Q dt``.

    ``delta_schedule`` holds ``((a, b), dF)`` pairs added to ``F`` on the closed
    interval ``[a, b]``.  Only the truth simulator applies them; estimators
    always use the nominal ``F``.
    """

    F: PiecewiseMatrix
    G: PiecewiseMatrix
    Q: PiecewiseMatrix
    x0_mean: np.ndarray
    P0: np.ndarray
    delta_schedule: tuple[tuple[tuple[float, float], np.ndarray], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "F", _as_piecewise(self.F))
        object.__setattr__(self, "G", _as_piecewise(self.G))
        object.__setattr__(self, "Q", _as_piecewise(self.Q))
        object.__setattr__(self, "x0_mean", np.array(self.x0_mean, dtype=float).reshape(-1))
        object.__setattr__(self, "P0", _as_matrix(self.P0))
        sched = tuple(((float(a), float(b)), _as_matrix(m)) for (a, b), m in self.delta_schedule)
        object.__setattr__(self, "delta_schedule", sched)

    @property
    def n(self) -> int:
        return self.x0_mean.shape[0]

    @property
    def r(self) -> int:
        return self.G.shape[1]

    def Qtilde(self, t: float) -> np.ndarray:
        """Process noise intensity mapped to state space, ``G Q G'``."""
        G = self.G(t)
        return G @ self.Q(t) @ G.T

    def delta(self, t: float) -> np.ndarray:
        """Sum of the truth-only dynamics perturbations active at ``t``."""
        out = np.zeros((self.n, self.n))
        for (a, b), m in self.delta_schedule:
            if _in_interval(t, a, b):
                out = out + m
        return out

    def F_true(self, t: float) -> np.ndarray:
        if not self.delta_schedule:
            return self.F(t)
        return self.F(t) + self.delta(t)


@dataclass(frozen=True)
class SensorModel:
    """One sensor ``y = H x + w`` with white-noise intensity ``R``."""

    H: PiecewiseMatrix
    R: PiecewiseMatrix
    availability: tuple[tuple[float, float], ...] | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "H", _as_piecewise(self.H))
        object.__setattr__(self, "R", _as_piecewise(self.R))
        if self.availability is not None:
            avail = tuple((float(a), float(b)) for a, b in self.availability)
            object.__setattr__(self, "availability", avail)

    @property
    def m(self) -> int:
        return self.H.shape[0]

    def is_available(self, t: float) -> bool:
        if self.availability is None:
            return True
        return any(_in_interval(t, a, b) for a, b in self.availability)


@dataclass(frozen=True)
class SensorSuite:
    sensors: tuple[SensorModel, ...]

    def __post_init__(self):
        object.__setattr__(self, "sensors", tuple(self.sensors))

    def __len__(self) -> int:
        return len(self.sensors)

    def __getitem__(self, i: int) -> SensorModel:
        return self.sensors[i]

    def __iter__(self):
        return iter(self.sensors)


@dataclass(frozen=True)
class ScenarioConfig:
    t0: float = 0.0
    t_end: float = 1.0
    T: float = 1.0
    Delta: float = 0.0
    h: float = 0.01
    eval_stride: int = 1
    mc_runs: int = 1
    rng_seed: int = 0


def _in_interval(t: float, a: float, b: float) -> bool:
    eps = 1e-9 * max(1.0, abs(t))
    return a - eps <= t <= b + eps


def _steps(duration: float, h: float) -> int | None:
    """Number of grid steps in ``duration``, or None if not a multiple of ``h``."""
    q = duration / h
    k = round(q)
    if abs(q - k) > _GRID_RTOL * max(1.0, abs(q)) + 1e-9:
        return None
    return int(k)


@dataclass(frozen=True)
class Scenario:
    """A validated system, sensor suite and configuration.

    Built by :func:`validate`; do not construct directly.  All grid indices
    count steps of ``h`` from ``t0``.  The grid extends to ``t_end + Delta`` so
    that predictions made at ``t_end`` have a truth value to compare against.
    """

    system: LtvSystem
    suite: SensorSuite
    config: ScenarioConfig

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def N(self) -> int:
        return len(self.suite)

    @property
    def h(self) -> float:
        return self.config.h

    @property
    def horizon_steps(self) -> int:
        return _steps(self.config.T, self.config.h)

    @property
    def delta_steps(self) -> int:
        return _steps(self.config.Delta, self.config.h)

    @property
    def end_index(self) -> int:
        return _steps(self.config.t_end - self.config.t0, self.config.h)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.config.t0, self.config.h, self.end_index + self.delta_steps)

    def time(self, k: int) -> float:
        return self.grid.time(k)

    def index(self, t: float) -> int:
        return self.grid.index(t)

    def output_indices(self) -> list[int]:
        return list(range(0, self.end_index + 1, self.config.eval_stride))

    def horizon_start(self, k: int) -> int:
        """Start of the horizon ending at grid index ``k`` (truncated at ``t0``)."""
        return max(0, k - self.horizon_steps)

    def sensor_active(self, i: int, k: int) -> bool:
        """Whether sensor ``i`` delivers every sample of the horizon ending at ``k``."""
        sensor = self.suite[i]
        if sensor.availability is None:
            return True
        return all(sensor.is_available(self.time(s)) for s in range(self.horizon_start(k), k + 1))

    def active_set(self, k: int) -> tuple[int, ...]:
        return tuple(i for i in range(self.N) if self.sensor_active(i, k))

    @cached_property
    def unconditional(self) -> LyapunovTrajectory:
        """Unconditional mean and covariance over ``[t0, t_end]``, computed once."""
        cfg = self.config
        return propagate_lyapunov(
            self.system, cfg.t0, cfg.t_end, self.system.x0_mean, self.system.P0, cfg.h
        )

    def with_config(self, **changes) -> "Scenario":
        from dataclasses import replace

        return validate(self.system, self.suite, replace(self.config, **changes))


def _check_psd(name: str, M: np.ndarray, errors: list[str], strict: bool = False) -> None:
    if not np.all(np.isfinite(M)):
        errors.append(f"{name} has non-finite entries")
        return
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-14):
        errors.append(f"{name} is not symmetric")
        return
    eig = np.linalg.eigvalsh(0.5 * (M + M.T))
    scale = max(1.0, float(np.max(np.abs(eig))))
    if strict:
        if eig.min() <= 1e-14 * scale:
            errors.append(f"{name} is singular or not positive definite (min eigenvalue {eig.min():.3g})")
    elif eig.min() < -1e-12 * scale:
        errors.append(f"{name} is not positive semidefinite (min eigenvalue {eig.min():.3g})")


def validate(system: LtvSystem, suite: SensorSuite | Sequence[SensorModel], cfg: ScenarioConfig) -> Scenario:
    """Check every invariant on the full time grid and return a :class:`Scenario`.

    Raises
    ------
    ValidationError
        Listing all violations found, not just the first.
    """
    if not isinstance(suite, SensorSuite):
        suite = SensorSuite(tuple(suite))
    errors: list[str] = []

    if not cfg.h > 0:
        errors.append("h must be positive")
    if not cfg.T > 0:
        errors.append("T must be positive")
    if not cfg.Delta >= 0:
        errors.append("Delta must be nonnegative")
    if int(cfg.eval_stride) != cfg.eval_stride or cfg.eval_stride < 1:
        errors.append("eval_stride must be an integer >= 1")
    if int(cfg.mc_runs) != cfg.mc_runs or cfg.mc_runs < 1:
        errors.append("mc_runs must be an integer >= 1")
    if int(cfg.rng_seed) != cfg.rng_seed or not 0 <= cfg.rng_seed < 2**64:
        errors.append("rng_seed must be an unsigned 64-bit integer")
    if cfg.t_end - cfg.t0 < cfg.T:
        errors.append("t_end - t0 must be at least T")
    if len(suite) < 1:
        errors.append("at least one sensor is required")
    if errors:
        raise ValidationError(errors)

    if _steps(cfg.T, cfg.h) is None:
        errors.append("T not a multiple of h")
    if _steps(cfg.Delta, cfg.h) is None:
        errors.append("Delta not a multiple of h")
    if _steps(cfg.t_end - cfg.t0, cfg.h) is None:
        errors.append("t_end - t0 not a multiple of h")
    if errors:
        raise ValidationError(errors)

    n = system.n
    if system.P0.shape != (n, n):
        errors.append(f"P0 has shape {system.P0.shape}, expected {(n, n)}")
    else:
        _check_psd("P0", system.P0, errors)

    grid = TimeGrid(cfg.t0, cfg.h, _steps(cfg.t_end - cfg.t0, cfg.h) + _steps(cfg.Delta, cfg.h))
    times = [grid.time(k) for k in range(grid.count + 1)]

    def each_value(pm: PiecewiseMatrix):
        # distinct matrices reachable on the grid
        seen = {}
        for t in times:
            M = pm(t)
            seen.setdefault(id(M), (t, M))
        return seen.values()

    r = system.r
    for t, F in each_value(system.F):
        if F.shape != (n, n):
            errors.append(f"F({t:g}) has shape {F.shape}, expected {(n, n)}")
    for t, G in each_value(system.G):
        if G.shape != (n, r):
            errors.append(f"G({t:g}) has shape {G.shape}, expected {(n, r)}")
    for t, Q in each_value(system.Q):
        if Q.shape != (r, r):
            errors.append(f"Q({t:g}) has shape {Q.shape}, expected {(r, r)}")
        else:
            _check_psd(f"Q({t:g})", Q, errors)
    for (a, b), dF in system.delta_schedule:
        if dF.shape != (n, n):
            errors.append(f"delta perturbation on [{a:g}, {b:g}] has shape {dF.shape}, expected {(n, n)}")

    for i, sensor in enumerate(suite):
        label = sensor.name or f"sensor {i + 1}"
        m = sensor.m
        for t, H in each_value(sensor.H):
            if H.shape[1] != n:
                errors.append(f"{label}: dimension mismatch, H({t:g}) has {H.shape[1]} columns, expected {n}")
            if H.shape[0] != m:
                errors.append(f"{label}: H({t:g}) changes row count over time")
        for t, R in each_value(sensor.R):
            if R.shape != (m, m):
                errors.append(f"{label}: R({t:g}) has shape {R.shape}, expected {(m, m)}")
            else:
                before = len(errors)
                _check_psd(f"{label}: R({t:g})", R, errors, strict=True)
                if len(errors) > before and "singular" in errors[-1]:
                    errors[-1] = f"{label}: singular R({t:g}) (measurement noise intensity must be positive definite)"
        if sensor.availability is not None:
            prev_end = -math.inf
            for a, b in sensor.availability:
                if b < a:
                    errors.append(f"{label}: availability interval [{a:g}, {b:g}] is reversed")
                if a <= prev_end:
                    errors.append(f"{label}: availability intervals overlap or are unsorted")
                prev_end = b

    if errors:
        raise ValidationError(errors)
    return Scenario(system, suite, cfg)


def stack_sensors(suite: SensorSuite, active: Sequence[int], t: float) -> tuple[np.ndarray, np.ndarray]:
    """Stacked observation matrix and block-diagonal noise intensity.

    Rows and blocks follow ascending sensor index; only ``active`` sensors
    contribute.
    """
    idx = sorted(set(active))
    if not idx:
        raise ValueError("active sensor set is empty")
    Hs = [suite[i].H(t) for i in idx]
    Rs = [suite[i].R(t) for i in idx]
    if len(idx) == 1:
        return Hs[0], Rs[0]
    H = np.vstack(Hs)
    mtot = H.shape[0]
    R = np.zeros((mtot, mtot))
    row = 0
    for Ri in Rs:
        k = Ri.shape[0]
        R[row : row + k, row : row + k] = Ri
        row += k
    return H, R


# --------------------------------------------------------------------------
# JSON scenario documents


def _parse_matrix_spec(value, what: str) -> PiecewiseMatrix:
    try:
        if isinstance(value, dict):
            if "breakpoints" not in value:
                raise ScenarioError(f"{what}: object form needs a 'breakpoints' list")
            return PiecewiseMatrix([(t, m) for t, m in value["breakpoints"]])
        return PiecewiseMatrix.constant(value)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"{what}: {exc}") from exc


def _matrix_spec(pm: PiecewiseMatrix):
    if pm.is_constant:
        return pm.values[0].tolist()
    return {"breakpoints": [[t, m.tolist()] for t, m in pm.breakpoints]}


def scenario_from_dict(doc: dict) -> Scenario:
    """Build and validate a scenario from a parsed JSON document."""
    try:
        sysd = doc["system"]
        sensd = doc["sensors"]
        cfgd = doc.get("config", {})
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"scenario document is missing section {exc}") from exc
    try:
        delta = [((iv["interval"][0], iv["interval"][1]), _as_matrix(iv["matrix"]))
                 for iv in sysd.get("delta_schedule", [])]
        system = LtvSystem(
            F=_parse_matrix_spec(sysd["F"], "system.F"),
            G=_parse_matrix_spec(sysd["G"], "system.G"),
            Q=_parse_matrix_spec(sysd["Q"], "system.Q"),
            x0_mean=sysd["x0_mean"],
            P0=sysd["P0"],
            delta_schedule=tuple(delta),
        )
        sensors = []
        for k, s in enumerate(sensd):
            avail = s.get("availability")
            sensors.append(SensorModel(
                H=_parse_matrix_spec(s["H"], f"sensors[{k}].H"),
                R=_parse_matrix_spec(s["R"], f"sensors[{k}].R"),
                availability=None if avail is None else tuple((a, b) for a, b in avail),
                name=s.get("name", f"s{k + 1}"),
            ))
    except KeyError as exc:
        raise ScenarioError(f"scenario document is missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from exc

    known = set(ScenarioConfig.__dataclass_fields__)
    unknown = set(cfgd) - known
    if unknown:
        raise ScenarioError(f"unknown config keys: {sorted(unknown)}")
    ints = {"eval_stride", "mc_runs", "rng_seed"}
    cfg_kwargs = {}
    for key, val in cfgd.items():
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise ScenarioError(f"config.{key} must be a number")
        if key in ints and float(val) != int(val):
            raise ScenarioError(f"config.{key} must be an integer")
        cfg_kwargs[key] = int(val) if key in ints else float(val)
    return validate(system, SensorSuite(tuple(sensors)), ScenarioConfig(**cfg_kwargs))


def load_scenario(path: str | Path) -> Scenario:
    """Read a JSON scenario file.  Parse errors raise :class:`ScenarioError`."""
    return scenario_from_dict(load_document(path))


def load_document(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: top level must be an object")
    return doc


def scenario_to_dict(scenario: Scenario) -> dict:
    sys_ = scenario.system
    cfg = scenario.config
    return {
        "system": {
            "F": _matrix_spec(sys_.F),
            "G": _matrix_spec(sys_.G),
            "Q": _matrix_spec(sys_.Q),
            "x0_mean": sys_.x0_mean.tolist(),
            "P0": sys_.P0.tolist(),
            "delta_schedule": [{"interval": [a, b], "matrix": m.tolist()} for (a, b), m in sys_.delta_schedule],
        },
        "sensors": [
            {
                "name": s.name,
                "H": _matrix_spec(s.H),
                "R": _matrix_spec(s.R),
                **({} if s.availability is None else {"availability": [list(iv) for iv in s.availability]}),
            }
            for s in scenario.suite
        ],
        "config": {k: getattr(cfg, k) for k in ScenarioConfig.__dataclass_fields__},
    }


def watertank_path() -> Path:
    """Path of the shipped water-tank scenario file."""
    return Path(__file__).with_name("data") / "watertank.json"

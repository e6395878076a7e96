"""Cross-covariances of local estimators and optimal matrix-weight fusion.

The fused predictor is ``x = sum_i W_i x_i`` with ``sum_i W_i = I``.  The
weights minimizing the trace of the fused error covariance solve

    sum_i W_i (P_ij - P_iN) = 0,   j = 1..N-1,      sum_i W_i = I,

where ``P_ij`` are the error cross-covariances of the local predictors.
Over the horizon the cross-covariances obey

    P_ij' = (F - L_i H_i) P_ij + P_ij (F - L_j H_j)' + G Q G',   i != j,

started from the unconditional covariance shared by all local filters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .estimators import GainTrajectory, riccati_pass
from .model import Scenario
from .numerics import EstimatorState, propagate_covariance, propagate_cross_prediction, symmetrize

__all__ = [
    "DegenerateFusionError",
    "CrossCovState",
    "FusionResult",
    "JointErrorSystem",
    "cross_cov_horizon",
    "cross_cov_predict",
    "fusion_weights",
    "fusion_weights_block_inverse",
    "fuse",
    "FusionInstant",
    "FusionSchedule",
    "precompute_schedule",
]

log = logging.getLogger(__name__)

# Weight solves with a worse condition number fall back or raise.
MAX_CONDITION = 1e12


class DegenerateFusionError(np.linalg.LinAlgError):
    def __init__(self, condition: float):
        self.condition = condition
        super().__init__(f"fusion weight system is ill-conditioned (condition number {condition:.3g})")


@dataclass(frozen=True)
class CrossCovState:
    """All pairwise error covariances of a set of local estimators at time ``t``.

    ``blocks[a, b]`` is the cross-covariance between the estimators of
    ``sensors[a]`` and ``sensors[b]``; the diagonal holds local covariances.
    """

    t: float
    sensors: tuple[int, ...]
    blocks: np.ndarray  # (N, N, n, n)

    @property
    def N(self) -> int:
        return len(self.sensors)

    @property
    def n(self) -> int:
        return self.blocks.shape[-1]

    def block_matrix(self) -> np.ndarray:
        N, n = self.N, self.n
        return self.blocks.transpose(0, 2, 1, 3).reshape(N * n, N * n)

    def subset(self, sensors: Sequence[int]) -> "CrossCovState":
        """Restrict to ``sensors``, dropping rows and columns of the others."""
        pos = [self.sensors.index(i) for i in sensors]
        return CrossCovState(self.t, tuple(sensors), self.blocks[np.ix_(pos, pos)])

    def __getitem__(self, ij: tuple[int, int]) -> np.ndarray:
        i, j = ij
        return self.blocks[self.sensors.index(i), self.sensors.index(j)]


@dataclass(frozen=True)
class FusionResult:
    t: float
    mean: np.ndarray
    cov: np.ndarray
    weights: tuple[np.ndarray, ...]
    active: tuple[int, ...]


@dataclass(frozen=True)
class JointErrorSystem:
    """Noise structure driving the horizon errors of local filters ``i`` and ``j``.

    The composite noise is ``[w_i; w_j; v]`` with intensity
    ``diag(R_i, R_j, Q)``; filter ``i``'s error is driven through
    ``B_i = [-L_i, 0, G]`` and filter ``j``'s through ``B_j = [0, -L_j, G]``.
    """

    B_i: np.ndarray
    B_j: np.ndarray
    Q_xi: np.ndarray

    @classmethod
    def build(cls, L_i, L_j, G, R_i, R_j, Q) -> "JointErrorSystem":
        n, mi = L_i.shape
        mj = L_j.shape[1]
        r = G.shape[1]
        B_i = np.hstack([-L_i, np.zeros((n, mj)), G])
        B_j = np.hstack([np.zeros((n, mi)), -L_j, G])
        Q_xi = np.zeros((mi + mj + r,) * 2)
        Q_xi[:mi, :mi] = R_i
        Q_xi[mi : mi + mj, mi : mi + mj] = R_j
        Q_xi[mi + mj :, mi + mj :] = Q
        return cls(B_i, B_j, Q_xi)

    @property
    def noise_dim(self) -> int:
        return self.Q_xi.shape[0]

    def cross_intensity(self) -> np.ndarray:
        """``B_i Q_xi B_j'``; equal to ``G Q G'`` since the noise blocks are uncorrelated."""
        return self.B_i @ self.Q_xi @ self.B_j.T


def cross_cov_horizon(scenario: Scenario, i: int, j: int, t: float,
                      gains_i: GainTrajectory, gains_j: GainTrajectory) -> np.ndarray:
    """Cross-covariance of local filter errors ``i`` and ``j`` at the horizon end ``t``.

    Integrated with RK4 using the stage gains recorded by each filter's
    Riccati pass.  Valid for ``i != j`` only; with ``i == j`` the equation
    misses the ``L R L'`` term of the local Riccati equation.
    """
    gi, gj = gains_i.grid, gains_j.grid
    if gi.count != gj.count or abs(gi.t0 - gj.t0) > 1e-9 * gi.h or gi.h != gj.h:
        raise ValueError("gain trajectories are on different grids")
    if abs(gi.t_end - t) > 1e-6 * gi.h:
        raise ValueError(f"gain trajectories end at {gi.t_end}, not at t={t}")
    system = scenario.system
    h = gi.h
    k_start = scenario.index(gi.t0)
    P = np.array(scenario.unconditional.covs.values[k_start], dtype=float)
    for k in range(gi.count):
        s = gi.time(k)
        F = system.F(s)
        Qt = system.Qtilde(s)
        Hi, Hj = gains_i.H[k], gains_j.H[k]
        Fi = [F - L @ Hi for L in gains_i.stage_gains[k]]
        FjT = [(F - L @ Hj).T for L in gains_j.stage_gains[k]]
        K1 = Fi[0] @ P + P @ FjT[0] + Qt
        P2 = P + (0.5 * h) * K1
        K2 = Fi[1] @ P2 + P2 @ FjT[1] + Qt
        P3 = P + (0.5 * h) * K2
        K3 = Fi[2] @ P3 + P3 @ FjT[2] + Qt
        P4 = P + h * K3
        K4 = Fi[3] @ P4 + P4 @ FjT[3] + Qt
        P = P + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
    return P


def cross_cov_predict(scenario: Scenario, P_ij: np.ndarray, t: float,
                      include_process_noise: bool = False) -> np.ndarray:
    """Carry a cross-covariance from ``t`` to ``t + Delta`` (see ``propagate_cross_prediction``)."""
    cfg = scenario.config
    return propagate_cross_prediction(scenario.system, t, t + cfg.Delta, P_ij, cfg.h,
                                      include_process_noise=include_process_noise)


def _equal_weights(N: int, n: int) -> list[np.ndarray]:
    return [np.eye(n) / N for _ in range(N)]


def fusion_weights(cross: CrossCovState, on_degenerate: str = "raise") -> list[np.ndarray]:
    """Optimal fusion weights from one ``(nN x nN)`` linear solve.

    Parameters
    ----------
    cross : CrossCovState
        Covariances of the estimators being fused.
    on_degenerate : {"raise", "equal"}
        What to do when the system's condition number exceeds
        ``MAX_CONDITION``: raise :class:`DegenerateFusionError`, or log a
        warning and return equal weights ``I/N``.
    """
    N, n = cross.N, cross.n
    if N == 1:
        return [np.eye(n)]
    P = cross.blocks
    # Unknown X = [W_1 ... W_N] (n x nN) satisfies X A = [0 ... 0 I].
    A = np.empty((N * n, N * n))
    for a in range(N):
        rows = slice(a * n, (a + 1) * n)
        for j in range(N - 1):
            A[rows, j * n : (j + 1) * n] = P[a, j] - P[a, N - 1]
        A[rows, (N - 1) * n :] = np.eye(n)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        if on_degenerate == "equal":
            log.warning("degenerate fusion at t=%g (condition %.3g); using equal weights", cross.t, cond)
            return _equal_weights(N, n)
        raise DegenerateFusionError(cond)
    B = np.zeros((n, N * n))
    B[:, (N - 1) * n :] = np.eye(n)
    X = np.linalg.solve(A.T, B.T).T
    return [X[:, a * n : (a + 1) * n] for a in range(N)]


def fusion_weights_block_inverse(cross: CrossCovState) -> list[np.ndarray]:
    """Weights from the inverse of the full block covariance matrix.

    With ``D = P^-1`` split into ``n x n`` blocks and ``S = sum_lh D_lh``,
    ``W_i = S^-1 sum_j D_ji``.  Used to cross-check :func:`fusion_weights`.
    """
    N, n = cross.N, cross.n
    D = np.linalg.inv(cross.block_matrix()).reshape(N, n, N, n).transpose(0, 2, 1, 3)
    S = D.sum(axis=(0, 1))
    col = D.sum(axis=0)  # col[i] = sum_j D_ji
    return [np.linalg.solve(S, col[i]) for i in range(N)]


def fuse(locals_: Sequence[EstimatorState], cross: CrossCovState,
         weights: Sequence[np.ndarray] | None = None, on_degenerate: str = "raise") -> FusionResult:
    """Fuse local predictions listed in the order of ``cross.sensors``."""
    if len(locals_) != cross.N:
        raise ValueError(f"{len(locals_)} local estimates for {cross.N} sensors")
    for s in locals_:
        if abs(s.t - cross.t) > 1e-9 * max(1.0, abs(cross.t)):
            raise ValueError(f"local estimate at t={s.t} does not match cross-covariance time {cross.t}")
    if weights is None:
        weights = fusion_weights(cross, on_degenerate=on_degenerate)
    if len(weights) != cross.N:
        raise ValueError("one weight matrix per active sensor is required")
    if cross.N == 1:
        s = locals_[0]
        return FusionResult(cross.t, s.mean, s.cov, (np.eye(cross.n),), cross.sensors)
    mean = sum(s.mean @ W.T for s, W in zip(locals_, weights))
    P = cross.blocks
    cov = sum(weights[a] @ P[a, b] @ weights[b].T for a in range(cross.N) for b in range(cross.N))
    return FusionResult(cross.t, mean, symmetrize(cov), tuple(weights), cross.sensors)


# --------------------------------------------------------------------------
# Per-scenario precomputation.  Everything here depends on the model and the
# availability schedule only, never on measurement values.


@dataclass(frozen=True)
class FusionInstant:
    k: int
    t: float
    t_pred: float
    active: tuple[int, ...]
    central_available: bool
    central_gains: GainTrajectory | None
    local_gains: dict[int, GainTrajectory]
    cross_filter: CrossCovState | None  # at t
    cross_pred: CrossCovState | None  # at t + Delta
    weights: tuple[np.ndarray, ...]
    P_crhf: np.ndarray | None
    P_crhp: np.ndarray | None
    P_drhp: np.ndarray | None
    local_pred_cov: dict[int, np.ndarray]
    warmup: bool


@dataclass(frozen=True)
class FusionSchedule:
    scenario: Scenario
    instants: tuple[FusionInstant, ...]
    cross_prediction_noise: bool = False

    def __len__(self) -> int:
        return len(self.instants)

    def __iter__(self):
        return iter(self.instants)

    def at(self, t: float) -> FusionInstant:
        k = self.scenario.index(t)
        for inst in self.instants:
            if inst.k == k:
                return inst
        raise KeyError(f"no output instant at t={t}")


def precompute_schedule(scenario: Scenario, cross_prediction_noise: bool = True,
                        indices: Sequence[int] | None = None) -> FusionSchedule:
    """Gains, cross-covariances, weights and theoretical covariances for every output time.

    ``cross_prediction_noise`` selects the cross-covariance prediction
    variant, see :func:`cross_cov_predict`.  The centralized estimator is
    available only when every configured sensor is active.
    """
    cfg = scenario.config
    system = scenario.system
    h = cfg.h
    instants = []
    for k in (scenario.output_indices() if indices is None else indices):
        t = scenario.time(k)
        t_pred = scenario.time(k + scenario.delta_steps)
        k0 = scenario.horizon_start(k)
        active = scenario.active_set(k)
        central = len(active) == scenario.N

        central_gains = P_crhf = P_crhp = None
        if central:
            central_gains = riccati_pass(scenario, active, k0, k)
            P_crhf = central_gains.final_cov
            P_crhp = propagate_covariance(system, t, t_pred, P_crhf, h)

        local_gains = {i: riccati_pass(scenario, (i,), k0, k) for i in active}
        N = len(active)
        n = scenario.n
        local_pred_cov: dict[int, np.ndarray] = {}
        cross_f = cross_p = None
        weights: tuple[np.ndarray, ...] = ()
        P_drhp = None
        if N:
            blocks_f = np.empty((N, N, n, n))
            blocks_p = np.empty((N, N, n, n))
            for a, i in enumerate(active):
                Pii = local_gains[i].final_cov
                blocks_f[a, a] = Pii
                blocks_p[a, a] = propagate_covariance(system, t, t_pred, Pii, h)
                local_pred_cov[i] = blocks_p[a, a]
                for b in range(a + 1, N):
                    j = active[b]
                    Pij = cross_cov_horizon(scenario, i, j, t, local_gains[i], local_gains[j])
                    blocks_f[a, b] = Pij
                    blocks_f[b, a] = Pij.T
                    Pij_p = cross_cov_predict(scenario, Pij, t, include_process_noise=cross_prediction_noise)
                    blocks_p[a, b] = Pij_p
                    blocks_p[b, a] = Pij_p.T
            cross_f = CrossCovState(t, active, blocks_f)
            cross_p = CrossCovState(t_pred, active, blocks_p)
            weights = tuple(fusion_weights(cross_p, on_degenerate="equal"))
            if N == 1:
                P_drhp = blocks_p[0, 0]
            else:
                P = cross_p.blocks
                P_drhp = symmetrize(sum(weights[a] @ P[a, b] @ weights[b].T for a in range(N) for b in range(N)))

        instants.append(FusionInstant(
            k=k, t=t, t_pred=t_pred, active=active, central_available=central,
            central_gains=central_gains, local_gains=local_gains,
            cross_filter=cross_f, cross_pred=cross_p, weights=weights,
            P_crhf=P_crhf, P_crhp=P_crhp, P_drhp=P_drhp, local_pred_cov=local_pred_cov,
            warmup=k < scenario.horizon_steps,
        ))
    return FusionSchedule(scenario, tuple(instants), cross_prediction_noise)

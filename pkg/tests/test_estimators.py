import math

import numpy as np
import pytest

from rhfusion import scenario_from_dict
from rhfusion.estimators import (
    EstimatorUnavailable,
    HorizonMeasurements,
    horizon_initial_conditions,
    riccati_pass,
    run_crhf,
    run_crhp,
    run_local_rhf,
    run_local_rhp,
)
from rhfusion.numerics import TimeGrid, propagate_lyapunov
from rhfusion.simulation import generate_measurements, run_rng, simulate_truth

from conftest import scalar_doc, scalar_scenario

ROOT2M1 = math.sqrt(2.0) - 1.0


def measurements(scenario, seed=1):
    rng = run_rng(seed, 0)
    truth = simulate_truth(scenario.system, scenario.grid, rng)
    return truth, generate_measurements(truth, scenario.suite, rng)


def test_initial_conditions_at_t0_are_the_prior():
    sc = scalar_scenario(x0=0.7, P0=2.5, T=1.0, t_end=3.0)
    ic = horizon_initial_conditions(sc, 1.0)
    assert ic.t == 0.0
    assert ic.mean[0] == 0.7 and ic.cov[0, 0] == 2.5
    # truncated horizon early on
    assert horizon_initial_conditions(sc, 0.4).cov[0, 0] == 2.5


def test_initial_conditions_constant_noise():
    q, P0 = 0.4, 1.5
    sc = scalar_scenario(f=0.0, q=q, P0=P0, T=1.0, t_end=3.0)
    ic = horizon_initial_conditions(sc, 2.7)
    assert ic.t == pytest.approx(1.7)
    assert ic.cov[0, 0] == pytest.approx(P0 + q * 1.7, abs=1e-12)


def test_initial_conditions_match_direct_propagation(watertank):
    for t in (0.8, 1.55, 3.0, 5.0):
        ic = horizon_initial_conditions(watertank, t)
        direct = propagate_lyapunov(watertank.system, 0.0, ic.t, watertank.system.x0_mean,
                                    watertank.system.P0, watertank.h)
        np.testing.assert_allclose(ic.cov, direct.covs.values[-1], rtol=0, atol=1e-12)
        np.testing.assert_allclose(ic.mean, direct.means[-1], rtol=0, atol=1e-12)


@pytest.mark.parametrize("T", [8.0, 10.0])
def test_scalar_riccati_steady_state(T):
    sc = scalar_scenario(T=T, t_end=T)
    _, ms = measurements(sc)
    state, gains = run_crhf(sc, T, ms.all())
    assert abs(state.cov[0, 0] - ROOT2M1) < 1e-4
    assert gains.gains[-1][0, 0] == pytest.approx(state.cov[0, 0])  # L = P H' / R


def test_single_sensor_central_equals_local():
    sc = scalar_scenario(R=(0.5, 2.0), T=1.0, t_end=2.0)
    _, ms = measurements(sc)
    c, _ = run_crhf(sc, 1.5, ms.all(), active=[1])
    l, _ = run_local_rhf(sc, 1, 1.5, ms.all())
    np.testing.assert_allclose(c.mean, l.mean, rtol=0, atol=1e-12)
    np.testing.assert_allclose(c.cov, l.cov, rtol=0, atol=1e-12)


def test_identical_sensors_with_shared_samples_agree():
    sc = scalar_scenario(R=(0.3, 0.3, 0.3), T=1.0, t_end=2.0)
    _, ms = measurements(sc)
    y = ms.values[0]
    hm = HorizonMeasurements(ms.grid, {0: y, 1: y, 2: y})
    states = [run_local_rhf(sc, i, 2.0, hm)[0] for i in range(3)]
    for s in states[1:]:
        assert np.array_equal(s.mean, states[0].mean)
        assert np.array_equal(s.cov, states[0].cov)


def test_failed_sensor_makes_local_filter_unavailable():
    sc = scalar_scenario(R=(1.0, 1.0), T=1.0, t_end=3.0, availability=[None, [(0.0, 1.5)]])
    _, ms = measurements(sc)
    run_local_rhf(sc, 1, 1.5, ms.all())  # still complete at t = 1.5
    with pytest.raises(EstimatorUnavailable) as exc:
        run_local_rhf(sc, 1, 2.0, ms.all())  # availability ended at t - T/2
    assert exc.value.sensors == (1,)
    with pytest.raises(EstimatorUnavailable):
        run_crhf(sc, 2.0, ms.all())
    # the windowed view drops the sensor too
    k = sc.index(2.0)
    assert ms.horizon(sc.horizon_start(k), k).available() == (0,)


def test_predictor_with_zero_delta_is_the_filter():
    sc = scalar_scenario(R=(0.5, 0.8), Delta=0.0)
    _, ms = measurements(sc)
    f, _ = run_crhf(sc, 1.5, ms.all())
    p = run_crhp(sc, 1.5, ms.all())
    assert p.t == f.t and np.array_equal(p.mean, f.mean) and np.array_equal(p.cov, f.cov)
    lf, _ = run_local_rhf(sc, 0, 1.5, ms.all())
    lp = run_local_rhp(sc, 0, 1.5, ms.all())
    assert np.array_equal(lp.mean, lf.mean) and np.array_equal(lp.cov, lf.cov)


def test_local_predictor_scalar_closed_form():
    d = 0.5
    sc = scalar_scenario(T=8.0, t_end=8.0, Delta=d)
    _, ms = measurements(sc)
    f, _ = run_local_rhf(sc, 0, 8.0, ms.all())
    p = run_local_rhp(sc, 0, 8.0, ms.all())
    assert p.t == pytest.approx(8.0 + d)
    # P' = -2P + 1 from P(8) = sqrt(2) - 1
    assert p.cov[0, 0] == pytest.approx(0.5 + (ROOT2M1 - 0.5) * math.exp(-2 * d), abs=1e-4)
    assert p.mean[0] == pytest.approx(f.mean[0] * math.exp(-d), rel=1e-9)


def test_watertank_central_predictor_only_on_first_interval(watertank):
    _, ms = measurements(watertank)
    p = run_crhp(watertank, 1.4, ms.all())
    assert p.t == pytest.approx(1.9)
    assert np.all(np.isfinite(p.cov))
    with pytest.raises(EstimatorUnavailable):
        run_crhp(watertank, 2.0, ms.all())
    # one sensor is enough for a local predictor late in the run
    assert np.all(np.isfinite(run_local_rhp(watertank, 0, 5.0, ms.all()).mean))
    with pytest.raises(EstimatorUnavailable):
        run_local_rhp(watertank, 3, 5.0, ms.all())


def test_gain_replay_matches_fresh_pass(watertank):
    _, ms = measurements(watertank)
    k = watertank.index(1.2)
    g = riccati_pass(watertank, (0, 1, 2, 3), watertank.horizon_start(k), k)
    a, _ = run_crhf(watertank, 1.2, ms.all())
    b, _ = run_crhf(watertank, 1.2, ms.all(), gains=g)
    assert np.array_equal(a.mean, b.mean)
    with pytest.raises(ValueError):
        run_crhf(watertank, 1.25, ms.all(), gains=g)


def test_batched_replay_matches_single_runs():
    sc = scalar_scenario(R=(0.5, 0.8), T=1.0, t_end=2.0)
    runs = [measurements(sc, seed=s)[1] for s in range(3)]
    batch = HorizonMeasurements(runs[0].grid, {i: np.stack([r.values[i] for r in runs], axis=1) for i in range(2)})
    joint, _ = run_crhf(sc, 1.7, batch)
    for b, r in enumerate(runs):
        single, _ = run_crhf(sc, 1.7, r.all())
        np.testing.assert_allclose(joint.mean[b], single.mean, rtol=0, atol=1e-14)


def test_only_horizon_samples_matter():
    sc = scalar_scenario(R=(0.5, 0.8), T=1.0, t_end=3.0)
    _, ms = measurements(sc)
    t = 2.5
    k0 = sc.horizon_start(sc.index(t))
    ref, _ = run_crhf(sc, t, ms.all())
    perturbed = {i: v.copy() for i, v in enumerate(ms.values)}
    for v in perturbed.values():
        v[:k0] += 100.0
    other, _ = run_crhf(sc, t, HorizonMeasurements(ms.grid, perturbed))
    assert np.array_equal(ref.mean, other.mean)
    # the first in-horizon sample does matter
    perturbed[0][k0] += 1.0
    moved, _ = run_crhf(sc, t, HorizonMeasurements(ms.grid, perturbed))
    assert not np.array_equal(ref.mean, moved.mean)


def test_stiff_prior_overflows_with_a_clear_error():
    doc = scalar_doc(f=0.0, R=(1e-6,), P0=10.0, h=0.1, T=1.0, t_end=1.0)
    sc = scenario_from_dict(doc)
    from rhfusion.numerics import PropagationError
    with pytest.raises(PropagationError):
        riccati_pass(sc, (0,), 0, 10)


def test_empty_active_set_rejected():
    sc = scalar_scenario()
    _, ms = measurements(sc)
    with pytest.raises(ValueError):
        run_crhf(sc, 1.0, ms.all(), active=[])
    with pytest.raises(IndexError):
        run_local_rhf(sc, 3, 1.0, ms.all())


def test_horizon_grid_is_offset_correctly():
    sc = scalar_scenario(T=0.5, t_end=2.0)
    _, ms = measurements(sc)
    k = sc.index(1.5)
    window = ms.horizon(sc.horizon_start(k), k)
    assert isinstance(window.grid, TimeGrid) and window.grid.t0 == pytest.approx(1.0)
    a, _ = run_crhf(sc, 1.5, window)
    b, _ = run_crhf(sc, 1.5, ms.all())
    assert np.array_equal(a.mean, b.mean)

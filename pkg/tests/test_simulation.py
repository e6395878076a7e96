import numpy as np
import pytest

from rhfusion.model import LtvSystem, SensorModel, SensorSuite
from rhfusion.numerics import TimeGrid
from rhfusion.simulation import (
    cross_cov_oracle,
    generate_measurements,
    run_monte_carlo,
    run_rng,
    simulate_truth,
)

from conftest import scalar_scenario


def test_noiseless_static_truth_is_constant():
    s = LtvSystem(F=np.zeros((2, 2)), G=np.eye(2), Q=np.zeros((2, 2)), x0_mean=[1.5, -2.0], P0=np.zeros((2, 2)))
    tr = simulate_truth(s, TimeGrid(0.0, 0.1, 50), run_rng(0, 0))
    assert np.all(tr.states == [1.5, -2.0])


def test_ornstein_uhlenbeck_stationary_variance():
    # dx = -x dt + dw, q = 1: stationary variance q / (2|f|) = 0.5
    s = LtvSystem(F=[[-1.0]], G=[[1.0]], Q=[[1.0]], x0_mean=[0.0], P0=[[0.5]])
    tr = simulate_truth(s, TimeGrid(0.0, 0.01, 1_000_000), run_rng(123, 0))
    var = tr.states[:, 0].var()
    assert var == pytest.approx(0.5, rel=0.05)


def test_truth_is_reproducible(watertank):
    a = simulate_truth(watertank.system, watertank.grid, run_rng(5, 3))
    b = simulate_truth(watertank.system, watertank.grid, run_rng(5, 3))
    c = simulate_truth(watertank.system, watertank.grid, run_rng(5, 4))
    assert np.array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)


def test_low_noise_sensors_track_truth():
    s = LtvSystem(F=[[0.0, 1.0], [-1.0, 0.0]], G=np.eye(2), Q=np.eye(2) * 0.1, x0_mean=[1.0, 0.0], P0=np.eye(2))
    grid = TimeGrid(0.0, 0.01, 200)
    rng = run_rng(1, 0)
    tr = simulate_truth(s, grid, rng)
    ms = generate_measurements(tr, SensorSuite((SensorModel(H=np.eye(2), R=np.eye(2) * 1e-14),)), rng)
    np.testing.assert_allclose(ms.values[0], tr.states, rtol=0, atol=1e-5)


def test_measurements_stop_when_sensor_fails(watertank):
    rng = run_rng(2, 0)
    tr = simulate_truth(watertank.system, watertank.grid, rng)
    ms = generate_measurements(tr, watertank.suite, rng)
    t = watertank.grid.times()
    fourth = ms.values[3][:, 0]
    assert np.all(np.isfinite(fourth[t <= 1.5 + 1e-9]))
    assert np.all(np.isnan(fourth[t > 1.5 + 1e-9]))
    assert ms.available[3].sum() == 151
    assert np.all(np.isfinite(ms.values[0][t <= 5.0 + 1e-9]))


def test_measurements_are_reproducible(watertank):
    tr = simulate_truth(watertank.system, watertank.grid, run_rng(9, 0))
    a = generate_measurements(tr, watertank.suite, run_rng(9, 1))
    b = generate_measurements(tr, watertank.suite, run_rng(9, 1))
    for x, y in zip(a.values, b.values):
        assert np.array_equal(x, y, equal_nan=True)


def test_monte_carlo_small_run_is_deterministic(watertank):
    sc = watertank.with_config(mc_runs=2, rng_seed=77, eval_stride=25)
    a = run_monte_carlo(sc, workers=1)
    b = run_monte_carlo(sc, workers=3)
    for name in a.estimators:
        assert np.array_equal(a.mse[name], b.mse[name], equal_nan=True)


def test_worker_count_does_not_change_results():
    sc = scalar_scenario(R=(0.5, 0.9), T=0.5, t_end=1.5, Delta=0.2, eval_stride=10, mc_runs=45, rng_seed=3)
    a = run_monte_carlo(sc, workers=1, chunk_size=10)
    b = run_monte_carlo(sc, workers=4, chunk_size=10)
    for name in a.estimators:
        assert np.array_equal(a.mse[name], b.mse[name], equal_nan=True)
        assert np.array_equal(a.mean_error[name], b.mean_error[name], equal_nan=True)
    assert all(np.array_equal(a.sample[k], b.sample[k], equal_nan=True) for k in a.sample)


def test_report_marks_central_predictor_unavailable(watertank_report):
    rep = watertank_report
    after = rep.times > 1.5 + 1e-9
    assert not rep.available["crhp"][after].any()
    assert rep.available["crhp"][~after].all()
    assert np.isnan(rep.mse["crhp"][after]).all()
    assert rep.available["drhp"].all()
    assert rep.runs == 1000


def test_estimators_are_unbiased(watertank_report):
    # zero prior mean and linear dynamics: every error has zero mean, even
    # while the truth-only perturbation is active
    rep = watertank_report
    for name in rep.estimators:
        ok = rep.available[name]
        z = rep.mean_error[name][ok] / rep.mean_error_se[name][ok]
        assert np.abs(z).max() < 5.0, name


def test_local_predictor_mse_matches_theory_on_nominal_stretch(watertank_report):
    rep = watertank_report
    sel = (rep.pred_times >= 3.5 - 1e-9) & rep.available["lrhp1"]
    ratio = rep.mse["lrhp1"][sel, 2] / rep.theory["lrhp1"][sel, 2]
    assert np.all(np.abs(ratio - 1) <= 0.15)


def test_oracle_rejects_same_sensor():
    sc = scalar_scenario(R=(0.25, 0.25))
    with pytest.raises(ValueError):
        cross_cov_oracle(sc, 1, 1, 100)


def test_oracle_low_power_warning_and_sanity_band():
    sc = scalar_scenario(R=(0.25, 0.25), T=1.0, t_end=2.0, rng_seed=4)
    with pytest.warns(UserWarning, match="only 500 oracle runs"):
        res = cross_cov_oracle(sc, 0, 1, 500)
    assert 0.0 < res.empirical[0, 0] < res.local_cov[0, 0]
    assert 0.0 < res.integrated[0, 0] < res.local_cov[0, 0]


def test_oracle_is_independent_of_chunking():
    sc = scalar_scenario(R=(0.25, 0.5), T=1.0, t_end=2.0, rng_seed=8)
    a = cross_cov_oracle(sc, 0, 1, 1200, chunk_size=1200, workers=1)
    b = cross_cov_oracle(sc, 0, 1, 1200, chunk_size=1200, workers=4)
    assert np.array_equal(a.empirical, b.empirical)


def test_oracle_requires_both_sensors_available():
    sc = scalar_scenario(R=(0.25, 0.25), T=1.0, t_end=3.0, availability=[None, [(0.0, 1.5)]])
    with pytest.raises(ValueError, match="not both available"):
        cross_cov_oracle(sc, 0, 1, 1000, t=3.0)

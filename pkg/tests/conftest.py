import json
import logging

import pytest

from rhfusion import load_scenario, scenario_from_dict, watertank_path
from rhfusion.fusion import precompute_schedule
from rhfusion.simulation import run_monte_carlo


def scalar_doc(f=-1.0, q=1.0, R=(1.0,), T=1.0, t_end=2.0, Delta=0.0, h=0.01, P0=1.0, x0=0.0,
               availability=None, eval_stride=1, mc_runs=1, rng_seed=0):
    """Scenario document for ``x' = f x + w`` observed by ``len(R)`` unit-gain sensors."""
    sensors = []
    for k, r in enumerate(R):
        s = {"name": f"s{k + 1}", "H": [[1.0]], "R": [[r]]}
        if availability is not None and availability[k] is not None:
            s["availability"] = [list(iv) for iv in availability[k]]
        sensors.append(s)
    return {
        "system": {"F": [[f]], "G": [[1.0]], "Q": [[q]], "x0_mean": [x0], "P0": [[P0]]},
        "sensors": sensors,
        "config": {"t0": 0.0, "t_end": t_end, "T": T, "Delta": Delta, "h": h,
                   "eval_stride": eval_stride, "mc_runs": mc_runs, "rng_seed": rng_seed},
    }


def scalar_scenario(**kw):
    return scenario_from_dict(scalar_doc(**kw))


@pytest.fixture(scope="session")
def watertank_doc():
    return json.loads(watertank_path().read_text())


@pytest.fixture(scope="session")
def watertank():
    return load_scenario(watertank_path())


@pytest.fixture(scope="session")
def watertank_schedule(watertank):
    # the early warm-up instants log equal-weight fallbacks; keep test output quiet
    logger = logging.getLogger("rhfusion.fusion")
    level = logger.level
    logger.setLevel(logging.ERROR)
    try:
        return precompute_schedule(watertank)
    finally:
        logger.setLevel(level)


@pytest.fixture(scope="session")
def watertank_report(watertank, watertank_schedule):
    """The full 1000-run experiment with the shipped seed."""
    return run_monte_carlo(watertank, watertank_schedule)

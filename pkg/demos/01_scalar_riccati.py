"""A receding-horizon filter on the simplest possible plant.

    dx = -x dt + dw,      y = x + v,      E[dw^2] = E[dv^2] = dt

Every estimate re-runs the Riccati equation over the last T time units,
starting from the unconditional prior.  With a long enough window the
covariance at the end of the horizon settles on the positive root of
-2P + 1 - P^2 = 0, i.e. sqrt(2) - 1.

Run:  python demos/01_scalar_riccati.py
"""

import math

import numpy as np

from rhfusion import scenario_from_dict
from rhfusion.estimators import run_crhf
from rhfusion.simulation import generate_measurements, run_rng, simulate_truth

doc = {
    "system": {"F": -1.0, "G": 1.0, "Q": 1.0, "x0_mean": [0.0], "P0": [[1.0]]},
    "sensors": [{"name": "y", "H": 1.0, "R": 1.0}],
    "config": {"t0": 0.0, "t_end": 12.0, "T": 8.0, "h": 0.01},
}
sc = scenario_from_dict(doc)

rng = run_rng(2024, 0)
truth = simulate_truth(sc.system, sc.grid, rng)
meas = generate_measurements(truth, sc.suite, rng)

# horizon length vs. end-of-horizon covariance
print(" T     P(t)        P - (sqrt2 - 1)")
for T in (0.25, 0.5, 1.0, 2.0, 4.0, 8.0):
    sc_T = sc.with_config(T=T)
    state, _ = run_crhf(sc_T, 12.0, meas.all())
    print(f"{T:4.2f}  {state.cov[0, 0]:.8f}  {state.cov[0, 0] - (math.sqrt(2) - 1):+.2e}")

# the filter tracks the truth; its error stays within a few standard deviations
state, gains = run_crhf(sc, 12.0, meas.all())
k = sc.index(12.0)
err = truth.states[k, 0] - state.mean[0]
print(f"\nat t=12: truth {truth.states[k, 0]:+.4f}, estimate {state.mean[0]:+.4f}, "
      f"error {err:+.4f} ({err / np.sqrt(state.cov[0, 0]):+.2f} sd)")
print(f"gain at the horizon end: {gains.gains[-1][0, 0]:.6f}  (equals P / R)")

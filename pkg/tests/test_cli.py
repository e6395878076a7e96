import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from rhfusion import watertank_path
from rhfusion.cli import UsageError, apply_overrides, main

WT = str(watertank_path())
FAST = ["--set", "mc_runs=1", "--set", "eval_stride=25", "--quiet"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_doc(tmp_path, doc, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_validate_watertank(capsys):
    assert main(["validate", WT]) == 0
    assert "valid" in capsys.readouterr().out


def test_validate_reports_grid_mismatch(tmp_path, watertank_doc, capsys):
    doc = json.loads(json.dumps(watertank_doc))
    doc["config"]["h"] = 0.03
    assert main(["validate", write_doc(tmp_path, doc)]) == 1
    assert "T not a multiple of h" in capsys.readouterr().out


def test_validate_missing_or_broken_file(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2")
    assert main(["validate", str(bad)]) == 2
    assert "error" in capsys.readouterr().err


def test_usage_errors():
    assert main([]) == 2
    assert main(["frobnicate"]) == 2


def test_run_writes_outputs(tmp_path):
    out = tmp_path / "o"
    assert main(["run", WT, "--out", str(out), *FAST]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == ["covariance.csv", "estimates.csv", "manifest.json"]  # no mse.csv for a single run
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 20090417 and man["outputs"] == ["estimates.csv", "covariance.csv"]
    assert man["config"]["config"]["mc_runs"] == 1
    rows = read_csv(out / "estimates.csv")
    assert [float(r["t"]) for r in rows] == [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25,
                                             2.5, 2.75, 3.0, 3.25, 3.5, 3.75, 4.0, 4.25, 4.5, 4.75, 5.0]
    late = rows[-1]
    assert late["avail_crhp"] == "0" and late["crhp_x1"] == ""
    assert late["avail_drhp"] == "1" and late["drhp_x3"] == late["lrhp1_x3"]
    cov = read_csv(out / "covariance.csv")
    assert float(cov[4]["W1_11"]) == pytest.approx(0.25)
    assert cov[-1]["W2_11"] == ""


def test_run_with_mc_writes_mse(tmp_path):
    out = tmp_path / "o"
    assert main(["run", WT, "--out", str(out), "--set", "mc_runs=3", "--set", "eval_stride=50", "--quiet"]) == 0
    rows = read_csv(out / "mse.csv")
    assert rows[0]["runs"] == "3"
    assert float(rows[-1]["drhp_theory_x3"]) > 0


def test_zero_delta_predictor_equals_filter(tmp_path):
    from rhfusion import load_scenario
    from rhfusion.estimators import run_crhf
    from rhfusion.simulation import generate_measurements, run_rng, simulate_truth

    out = tmp_path / "o"
    assert main(["run", WT, "--out", str(out), "--set", "Delta=0", *FAST]) == 0
    rows = read_csv(out / "estimates.csv")
    sc = load_scenario(WT).with_config(Delta=0.0, mc_runs=1, eval_stride=25)
    rng = run_rng(sc.config.rng_seed, 0)
    truth = simulate_truth(sc.system, sc.grid, rng)
    ms = generate_measurements(truth, sc.suite, rng)
    for r in rows:
        if r["avail_crhp"] == "1":
            f, _ = run_crhf(sc, float(r["t"]), ms.all())
            assert [float(r[f"crhp_x{c}"]) for c in (1, 2, 3)] == f.mean.tolist()
            assert r["t"] == r["t_pred"]


def test_same_seed_gives_identical_files(tmp_path):
    outs = []
    for k, workers in enumerate(("1", "3")):
        out = tmp_path / f"o{k}"
        args = ["run", WT, "--out", str(out), "--set", "mc_runs=1", "--set", "rng_seed=7", "--quiet",
                "--workers", workers]
        assert main(args) == 0
        outs.append(out)
    for name in ("estimates.csv", "covariance.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_invalid_override(tmp_path, capsys):
    assert main(["run", WT, "--out", str(tmp_path), "--set", "horizon=3"]) == 2
    assert "invalid override key" in capsys.readouterr().err
    assert main(["run", WT, "--out", str(tmp_path), "--set", "sensors.9.R=1"]) == 2
    assert main(["run", WT, "--out", str(tmp_path), "--set", "nokeyvalue"]) == 2


def test_override_that_breaks_validation_exits_1(tmp_path):
    assert main(["run", WT, "--out", str(tmp_path), "--set", "h=0.03"]) == 1


def test_dotted_overrides(watertank_doc):
    doc = apply_overrides(watertank_doc, ["sensors.0.R=[[0.04]]", "config.T=0.5", "Delta=0.2",
                                          "system.delta_schedule=[]", "sensors.1.name=front"])
    assert doc["sensors"][0]["R"] == [[0.04]]
    assert doc["config"]["T"] == 0.5 and doc["config"]["Delta"] == 0.2
    assert doc["system"]["delta_schedule"] == []
    assert doc["sensors"][1]["name"] == "front"
    assert watertank_doc["config"]["T"] == 0.8  # input untouched
    with pytest.raises(UsageError):
        apply_overrides(watertank_doc, ["system.X=1"])


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", WT, "--out", str(blocker / "sub"), *FAST]) == 2


def test_oracle_watertank_pair(tmp_path, capsys):
    assert main(["oracle", WT, "1", "2", "20000", "1.0", "--out", str(tmp_path)]) == 0
    assert ": pass" in capsys.readouterr().out
    rows = read_csv(tmp_path / "oracle.csv")
    horizon = [r for r in rows if r["stage"] == "horizon"]
    assert len(horizon) == 9 and all(r["pass"] == "1" for r in horizon)


def test_oracle_same_sensor_is_usage_error(tmp_path, capsys):
    assert main(["oracle", WT, "2", "2", "100", "--out", str(tmp_path)]) == 2
    assert "distinct" in capsys.readouterr().err


def test_oracle_low_power_warning(tmp_path, capsys):
    assert main(["oracle", WT, "1", "2", "10", "1.0", "--out", str(tmp_path), "--quiet"]) == 0
    assert "low-power" in capsys.readouterr().err
    assert (tmp_path / "oracle.csv").exists()


def test_oracle_rejects_failed_sensor(tmp_path):
    # sensor 4 is gone by t = 3
    assert main(["oracle", WT, "1", "4", "100", "3.0", "--out", str(tmp_path)]) == 2


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "rhfusion.cli", "validate", WT], capture_output=True, text=True)
    assert r.returncode == 0


def test_floats_round_trip(tmp_path):
    out = tmp_path / "o"
    assert main(["run", WT, "--out", str(out), *FAST]) == 0
    rows = read_csv(out / "covariance.csv")
    v = rows[10]["drhp_P33"]
    assert repr(float(v)) == v
    assert np.isfinite(float(v))

"""Command-line front end.

    rhfusion validate SCENARIO
    rhfusion run SCENARIO [--out DIR] [--set key=value ...] [--quiet]
    rhfusion oracle SCENARIO I J RUNS [T] [--out DIR]

Exit status is 0 on success, 1 when the scenario fails validation and 2 for
I/O or usage errors.  Sensor indices on the command line are 1-based.

The oracle's ``pass`` column applies the 3-standard-error test to the
horizon-end cross-covariance.  Rows for ``t + Delta`` carry z-scores too, but
they also absorb any truth-only perturbation active over the prediction
interval.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .fusion import precompute_schedule
from .model import ScenarioConfig, ScenarioError, ValidationError, load_document, scenario_from_dict
from .simulation import cross_cov_oracle, run_monte_carlo

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("rhfusion")


class UsageError(Exception):
    pass


def _fmt(x) -> str:
    """Shortest round-trip decimal; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _atomic_write(path, buf.getvalue())


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key=value`` assignments to a scenario document.

    Keys are dotted paths (``sensors.0.R``); a bare config field name such
    as ``Delta`` means ``config.Delta``.  Values are parsed as JSON when
    possible.
    """
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        if len(parts) == 1 and parts[0] in ScenarioConfig.__dataclass_fields__:
            parts = ["config", parts[0]]
        node = doc
        for p in parts[:-1]:
            node = _child(node, p, key)
        last = parts[-1]
        if isinstance(node, list):
            idx = _list_index(node, last, key)
            node[idx] = value
        elif isinstance(node, dict):
            if last not in node and not (parts[0] == "config" and last in ScenarioConfig.__dataclass_fields__):
                raise UsageError(f"invalid override key {key!r}")
            node[last] = value
        else:
            raise UsageError(f"invalid override key {key!r}")
    return doc


def _child(node, part: str, key: str):
    if isinstance(node, dict):
        if part not in node:
            if part == "config":
                node[part] = {}
            else:
                raise UsageError(f"invalid override key {key!r}")
        return node[part]
    if isinstance(node, list):
        return node[_list_index(node, part, key)]
    raise UsageError(f"invalid override key {key!r}")


def _list_index(node: list, part: str, key: str) -> int:
    try:
        idx = int(part)
    except ValueError:
        raise UsageError(f"invalid override key {key!r}") from None
    if not 0 <= idx < len(node):
        raise UsageError(f"invalid override key {key!r} (index out of range)")
    return idx


def _load(path: str, overrides: Sequence[str] = ()):
    doc = apply_overrides(load_document(path), overrides)
    return doc, scenario_from_dict(doc)


# --------------------------------------------------------------------------


def cmd_validate(path: str) -> int:
    try:
        _load(path)
    except ValidationError as exc:
        for v in exc.violations:
            print(f"invalid: {v}")
        return EXIT_INVALID
    print(f"{path}: valid")
    return EXIT_OK


def _estimates_rows(scenario, report, schedule):
    n, N = scenario.n, scenario.N
    names = report.estimators
    header = ["t", "t_pred", "warmup", "n_active"]
    header += [f"avail_{e}" for e in names]
    header += [f"truth_x{c + 1}" for c in range(n)]
    for e in names:
        header += [f"{e}_x{c + 1}" for c in range(n)]
    rows = []
    for o, inst in enumerate(schedule):
        row = [inst.t, inst.t_pred, inst.warmup, len(inst.active)]
        row += [bool(report.available[e][o]) for e in names]
        row += list(report.sample["truth"][o])
        for e in names:
            row += list(report.sample[e][o])
        rows.append(row)
    return header, rows


def _covariance_rows(scenario, report, schedule):
    n, N = scenario.n, scenario.N
    names = report.estimators
    header = ["t", "t_pred", "n_active"]
    for e in names:
        header += [f"{e}_P{c + 1}{c + 1}" for c in range(n)]
    for i in range(N):
        header += [f"W{i + 1}_{r + 1}{c + 1}" for r in range(n) for c in range(n)]
    rows = []
    for o, inst in enumerate(schedule):
        row = [inst.t, inst.t_pred, len(inst.active)]
        for e in names:
            row += list(report.theory[e][o])
        for i in range(N):
            if i in inst.active:
                W = inst.weights[inst.active.index(i)]
                row += list(W.reshape(-1))
            else:
                row += [None] * (n * n)
        rows.append(row)
    return header, rows


def _mse_rows(scenario, report, schedule):
    n = scenario.n
    names = report.estimators
    header = ["t", "t_pred", "runs"]
    for e in names:
        header += [f"{e}_mse_x{c + 1}" for c in range(n)]
        header += [f"{e}_theory_x{c + 1}" for c in range(n)]
    rows = []
    for o, inst in enumerate(schedule):
        row = [inst.t, inst.t_pred, report.runs]
        for e in names:
            mse = report.mse[e][o] if report.available[e][o] else [None] * n
            row += list(mse) + list(report.theory[e][o])
        rows.append(row)
    return header, rows


def cmd_run(path: str, out_dir: str, overrides: Sequence[str] = (), quiet: bool = False,
            workers: int | None = None) -> int:
    started = time.perf_counter()
    doc, scenario = _load(path, overrides)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")

    schedule = precompute_schedule(scenario)
    report = run_monte_carlo(scenario, schedule, workers=workers)

    files = []
    for name, builder in (("estimates.csv", _estimates_rows), ("covariance.csv", _covariance_rows)):
        header, rows = builder(scenario, report, schedule)
        _write_csv(out / name, header, rows)
        files.append(name)
    if scenario.config.mc_runs > 1:
        header, rows = _mse_rows(scenario, report, schedule)
        _write_csv(out / "mse.csv", header, rows)
        files.append("mse.csv")

    manifest = {
        "scenario": str(path),
        "overrides": list(overrides),
        "config": doc,
        "seed": scenario.config.rng_seed,
        "version": __version__,
        "duration_s": round(time.perf_counter() - started, 3),
        "outputs": files,
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    if not quiet:
        _summary(scenario, report, schedule, out, files)
    return EXIT_OK


def _summary(scenario, report, schedule, out, files):
    cfg = scenario.config
    central = sum(inst.central_available for inst in schedule)
    print(f"scenario: {scenario.N} sensors, T={cfg.T:g}, Delta={cfg.Delta:g}, h={cfg.h:g}, "
          f"{len(schedule)} output times, {cfg.mc_runs} run(s), seed {cfg.rng_seed}")
    print(f"centralized predictor available at {central}/{len(schedule)} output times; "
          f"distributed at {sum(bool(inst.active) for inst in schedule)}/{len(schedule)}")
    if cfg.mc_runs > 1:
        ok = report.available["drhp"] & ~report.warmup
        ratio = report.mse["drhp"][ok] / report.theory["drhp"][ok]
        print(f"DRHP empirical/theoretical MSE (post warmup): "
              f"min {ratio.min():.3f}, median {np.median(ratio):.3f}, max {ratio.max():.3f}")
    print(f"wrote {', '.join(files)}, manifest.json to {out}")


def cmd_oracle(path: str, i: int, j: int, runs: int, t: float | None = None, out_dir: str = ".",
               overrides: Sequence[str] = (), quiet: bool = False) -> int:
    if i == j:
        raise UsageError("oracle needs two distinct sensors (i != j)")
    if runs < 1:
        raise UsageError("runs must be positive")
    _, scenario = _load(path, overrides)
    if not (1 <= i <= scenario.N and 1 <= j <= scenario.N):
        raise UsageError(f"sensor indices must be between 1 and {scenario.N}")
    if runs < 1000:
        print(f"warning: low-power oracle, only {runs} runs", file=sys.stderr)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            res = cross_cov_oracle(scenario, i - 1, j - 1, runs, t)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    header = ["stage", "t", "row", "col", "empirical", "stderr", "integrated", "z", "pass",
              "integrated_homogeneous", "z_homogeneous"]
    rows = []
    n = scenario.n
    z_f = res.z_scores("filter")
    z_p = res.z_scores("pred_noise")
    z_h = res.z_scores("pred")
    for r in range(n):
        for c in range(n):
            rows.append(["horizon", res.t, r + 1, c + 1, res.empirical[r, c], res.stderr[r, c],
                         res.integrated[r, c], z_f[r, c], abs(z_f[r, c]) <= 3.0, None, None])
    for r in range(n):
        for c in range(n):
            rows.append(["prediction", res.t_pred, r + 1, c + 1, res.empirical_pred[r, c], res.stderr_pred[r, c],
                         res.integrated_pred_noise[r, c], z_p[r, c], abs(z_p[r, c]) <= 3.0,
                         res.integrated_pred[r, c], z_h[r, c]])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "oracle.csv", header, rows)
    if not quiet:
        verdict = "pass" if res.passes("filter") else "FAIL"
        print(f"cross-covariance P({i},{j}) at t={res.t:g} over {runs} runs: {verdict} "
              f"(max |z| = {np.max(np.abs(z_f)):.2f}); wrote {out / 'oracle.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rhfusion", description="Receding-horizon multisensor prediction.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("scenario")

    r = sub.add_parser("run", help="run estimators and the Monte-Carlo experiment")
    r.add_argument("scenario")
    r.add_argument("--out", default="out", help="output directory (default: ./out)")
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a scenario entry, e.g. --set mc_runs=100 (repeatable)")
    r.add_argument("--quiet", action="store_true")
    r.add_argument("--workers", type=int, default=None, help="worker threads (default: RH_FUSION_THREADS or CPUs)")

    o = sub.add_parser("oracle", help="Monte-Carlo check of a local cross-covariance")
    o.add_argument("scenario")
    o.add_argument("i", type=int)
    o.add_argument("j", type=int)
    o.add_argument("runs", type=int)
    o.add_argument("t", type=float, nargs="?", default=None)
    o.add_argument("--out", default=".")
    o.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    o.add_argument("--quiet", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.ERROR if getattr(args, "quiet", False) else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        if args.command == "validate":
            return cmd_validate(args.scenario)
        if args.command == "run":
            return cmd_run(args.scenario, args.out, args.overrides, args.quiet, args.workers)
        return cmd_oracle(args.scenario, args.i, args.j, args.runs, args.t, args.out, args.overrides, args.quiet)
    except ValidationError as exc:
        for v in exc.violations:
            print(f"invalid: {v}", file=sys.stderr)
        return EXIT_INVALID
    except (ScenarioError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

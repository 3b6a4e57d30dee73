"""Command-line front end.

    fbmcontrol COMMAND [--config PATH] [--set KEY=VALUE ...] [--output DIR]
                       [--seed N] [--workers N]

Configuration is a flat ``key = value`` file plus ``--set`` overrides; every
resolved value, defaults included, is echoed to ``manifest.txt`` together
with a hash of the configuration. Exit codes: 0 success, 2 invalid input,
3 numerical non-convergence, 4 failed check or certificate.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import __version__
from .bsde import (DriverSpec, LinearBsdeSpec, apriori_check, default_horizons, forward_check,
                   girsanov_shift, solve_iterative, solve_linear, write_key_values)
from .control import example_pipeline
from .errors import FbmControlError, NumericalError
from .kernel import GridFunction, PhiKernel, TimeGrid, as_hurst
from .paths import empirical_cov_report, sample_ensemble
from .wick import (EtaSpec, WickIntegrand, clark_ocone_check, wis_integral, wis_moments_check)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_FAILED = 0, 2, 3, 4
COMMANDS = ("sample-paths", "check-calculus", "solve-bsde", "solve-example", "certify")


class ConfigError(FbmControlError, ValueError):
    """Unknown key, bad value or malformed configuration file."""


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _choice(*options) -> Callable:
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _opt_float(text):
    return None if str(text).lower() in ("", "none", "auto") else float(text)


COMMON = {"seed": (int, 12345), "workers": (int, None), "output_dir": (str, "out")}

SCHEMAS = {
    "sample-paths": {"hurst": (_floats, (0.7,)), "t_max": (float, 1.0), "n_nodes": (int, 64),
                     "n_paths": (int, 1000), "export_paths": (int, 20)},
    "check-calculus": {"hurst": (float, 0.7), "t_max": (float, 1.0), "n_nodes": (int, 256),
                       "n_paths": (int, 20000), "z_threshold": (float, 4.0),
                       "clark_ocone_tol": (float, 0.05)},
    "solve-bsde": {"hurst": (float, 0.7), "t_max": (float, 10.0), "n_nodes": (int, 256),
                   "n_paths": (int, 1000), "alpha": (_choice("exp_decay", "state", "zero"), "exp_decay"),
                   "b": (float, 1.0), "c": (float, 0.0), "lambda": (float, 0.5),
                   "solver": (_choice("linear", "iterative", "both"), "linear"),
                   "tail_bound": (_opt_float, None), "export_paths": (int, 20)},
    "solve-example": {"h1": (float, 0.7), "h2": (float, 0.7), "rho": (float, 1.0),
                      "t_max": (float, 20.0), "n_nodes": (int, 256), "n_paths": (int, 4000),
                      "equation": (_choice("discounted", "undiscounted"), "discounted"),
                      "export_paths": (int, 64)},
}
SCHEMAS["certify"] = dict(SCHEMAS["solve-example"])


@dataclass(frozen=True)
class RunConfig:
    command: str
    parameters: dict

    def canonical(self) -> str:
        # neither key changes any result
        items = {k: v for k, v in self.parameters.items() if k not in ("output_dir", "workers")}
        return json.dumps({"command": self.command, **items}, sort_keys=True, default=list)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def read_config_file(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def resolve(command: str, raw: dict) -> RunConfig:
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    schema = {**COMMON, **SCHEMAS[command]}
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown configuration keys for {command}: {', '.join(unknown)}")
    params = {}
    for key, (parse, default) in schema.items():
        if key in raw:
            try:
                params[key] = parse(raw[key]) if isinstance(raw[key], str) else raw[key]
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw[key]!r} ({exc})") from None
        else:
            params[key] = default
    if params["workers"] is None:
        params["workers"] = os.cpu_count() or 1
    for key in ("n_nodes", "n_paths", "workers"):
        if key in params and params[key] < 1:
            raise ConfigError(f"{key} must be positive")
    return RunConfig(command, params)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _grid(p) -> TimeGrid:
    return TimeGrid.uniform(p["t_max"], p["n_nodes"])


def cmd_sample_paths(p, out) -> tuple[int, dict]:
    grid = _grid(p)
    ens = sample_ensemble(grid, p["hurst"], p["n_paths"], p["seed"], p["workers"])
    n_exp = min(p["export_paths"], ens.n_paths)
    type(ens)(grid, ens.hursts, ens.paths[:n_exp], ens.seed).to_csv(os.path.join(out, "paths.csv"))
    t = grid.nodes
    idx = np.linspace(1, t.size - 1, 5).astype(int)
    pairs = [(t[i], t[j]) for a, i in enumerate(idx) for j in idx[a:]][:10]
    rows = []
    for k in range(ens.n_noises):
        for r in empirical_cov_report(ens, pairs, k):
            rows.append([k, r.s, r.t, r.empirical, r.exact, r.std_error, r.z, int(r.flagged)])
    _write_rows(os.path.join(out, "covariance.csv"),
                ["noise_id", "s", "t", "empirical", "exact", "std_error", "z", "flagged"], rows)
    flagged = sum(r[-1] for r in rows)
    return EXIT_OK, {"flagged_pairs": flagged}


def cmd_check_calculus(p, out) -> tuple[int, dict]:
    grid = _grid(p)
    ens = sample_ensemble(grid, p["hurst"], p["n_paths"], p["seed"], p["workers"])
    h = as_hurst(p["hurst"])
    kernel = PhiKernel(h)
    zt = p["z_threshold"]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(p["seed"], spawn_key=(7,))))
    f = GridFunction(grid, np.repeat(rng.normal(size=8), -(-grid.n_nodes // 8))[:grid.n_nodes])
    mom = wis_moments_check(f, ens)
    B = ens.noise(0)
    T = grid.t_max
    ito = B[:, -1] ** 2 - 2 * wis_integral(WickIntegrand.fbm(B, kernel, grid), B, grid) - T ** (2 * h.h)
    ito_se = float(ito.std(ddof=1) / np.sqrt(ito.size))
    ito_z = float(ito.mean() / ito_se) if ito_se > 0 else 0.0
    co = clark_ocone_check("square", ens)
    digest = RunConfig("check-calculus", p).digest
    checks = [
        ("wis_mean_z", abs(mom.z_mean), zt),
        ("wis_variance_z", abs(mom.z_variance), zt),
        ("ito_identity_z", abs(ito_z), zt),
        ("clark_ocone_rms_relative", co.rms_relative_error, p["clark_ocone_tol"]),
    ]
    rows = [[name, digest, stat, thr, int(stat < thr)] for name, stat, thr in checks]
    _write_rows(os.path.join(out, "calculus.csv"),
                ["check_name", "parameter_hash", "statistic", "threshold", "pass"], rows)
    ok = all(r[-1] for r in rows)
    results = {
        "wis_mean": mom.mean, "wis_variance": mom.variance,
        "wis_variance_exact": mom.exact_variance, "ito_identity_mean": float(ito.mean()),
        **{name: stat for name, stat, _ in checks}, "pass": int(ok),
    }
    return (EXIT_OK if ok else EXIT_FAILED), results


def cmd_solve_bsde(p, out) -> tuple[int, dict]:
    grid = _grid(p)
    h = as_hurst(p["hurst"])
    b0, c0, lam = p["b"], p["c"], p["lambda"]
    b_coef = lambda t: np.full_like(np.asarray(t, dtype=float), b0)
    c_coef = lambda t: np.full_like(np.asarray(t, dtype=float), c0)
    alpha = {
        "exp_decay": lambda t, x: np.exp(-t) + 0.0 * x,
        "state": lambda t, x: np.exp(-t) * x,
        "zero": lambda t, x: 0.0 * x,
    }[p["alpha"]]
    eta = EtaSpec(0.0, None, GridFunction.constant(grid, 1.0), h)
    spec = LinearBsdeSpec(alpha, b_coef, c_coef, eta, lam)
    driver = None
    if p["solver"] in ("iterative", "both"):
        driver = DriverSpec(lambda t, x, y, z: -(alpha(t, x) + b0 * y + c0 * z),
                            mu=-b0, K=abs(c0), lam=lam, state_dependent=True)
    # the sampled paths play the role of the shifted noise B-hat
    ens = sample_ensemble(grid, h, p["n_paths"], p["seed"], p["workers"])
    shift = girsanov_shift(c_coef, h, grid)
    report = {"girsanov_norm_sq": shift.norm_sq, "girsanov_converged": int(shift.converged)}
    status = EXIT_OK
    n_exp = min(p["export_paths"], ens.n_paths)
    if p["solver"] in ("linear", "both"):
        sol = solve_linear(spec, ens, p["tail_bound"])
        fc = forward_check(sol, alpha, b_coef, eta, ens)
        _export_solution(sol, n_exp, os.path.join(out, "bsde_linear.csv"))
        pT = sol.p[:, -1]
        se_T = float(pT.std(ddof=1) / np.sqrt(pT.size)) if pT.size > 1 else 0.0
        report.update({"linear_p0_mean": float(sol.p[:, 0].mean()),
                       "linear_tail_bound": sol.tail_bound,
                       "linear_terminal_mean": float(pT.mean()),
                       "linear_terminal_ok": int(abs(pT.mean()) < sol.tail_bound + 4 * se_T + 1e-15),
                       "forward_max_excess_z": fc.max_excess_z, "forward_pass": int(fc.passed)})
        if not fc.passed:
            status = EXIT_FAILED
    if driver is not None:
        xi = lambda x: 0.0 * x
        sols = solve_iterative(driver, xi, default_horizons(grid.t_max), ens, eta)
        _export_solution(sols[-1], n_exp, os.path.join(out, "bsde_iterative.csv"))
        rep = apriori_check(sols, driver, xi, eta, ens)
        for key, val in rep.rows():
            report[f"apriori_{key}"] = val
        report["apriori_bounded"] = int(rep.bounded)
        report["cauchy_decreasing"] = int(rep.cauchy_decreasing)
        if p["solver"] == "both":
            report["cross_solver_rms"] = float(np.sqrt(np.mean((sols[-1].p - sol.p) ** 2)))
    write_key_values(os.path.join(out, "bsde_report.csv"), report)
    return status, report


def _export_solution(sol, n, path):
    type(sol)(sol.grid, sol.p[:n], sol.q[:n], sol.tail_bound, None, sol.horizon).to_csv(path)


def _cmd_example(p, out, certify: bool) -> tuple[int, dict]:
    grid = _grid(p)
    rep = example_pipeline(p["h1"], p["h2"], p["rho"], grid, p["n_paths"], p["seed"],
                           p["equation"], p["workers"])
    rep.write(out, p["export_paths"])
    summary = dict(rep.diagnostics)
    if certify and not (rep.certificate.passed and rep.dominance):
        return EXIT_FAILED, summary
    return EXIT_OK, summary


HANDLERS = {
    "sample-paths": cmd_sample_paths,
    "check-calculus": cmd_check_calculus,
    "solve-bsde": cmd_solve_bsde,
    "solve-example": lambda p, out: _cmd_example(p, out, False),
    "certify": lambda p, out: _cmd_example(p, out, True),
}


# --------------------------------------------------------------------------
# plumbing
# --------------------------------------------------------------------------

def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


PLOT_STUB = '''"""Plot every two-column numeric CSV in this directory (edit to taste)."""
import csv
import glob
import os

import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
for path in sorted(glob.glob(os.path.join(here, "*.csv"))):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if "t" not in header or not body:
        continue
    ti = header.index("t")
    for col in header:
        if col in ("t", "path_id", "noise_id") or col.startswith("flag") or col.endswith("flag"):
            continue
        ci = header.index(col)
        try:
            xs = [float(r[ti]) for r in body]
            ys = [float(r[ci]) for r in body]
        except ValueError:
            continue
        plt.figure()
        plt.plot(xs, ys, ",")
        plt.xlabel("t")
        plt.ylabel(col)
        plt.title(os.path.basename(path))
        plt.savefig(os.path.join(here, f"{os.path.basename(path)[:-4]}_{col}.png"), dpi=120)
        plt.close()
'''


def write_manifest(cfg: RunConfig, out: str, status: int, summary: dict) -> None:
    lines = [f"command = {cfg.command}", f"version = {__version__}",
             f"config_hash = {cfg.digest}",
             f"timestamp = {_dt.datetime.now(_dt.timezone.utc).isoformat()}",
             f"exit_code = {status}"]
    for key in sorted(cfg.parameters):
        val = cfg.parameters[key]
        if isinstance(val, tuple):
            val = ",".join(repr(v) for v in val)
        lines.append(f"{key} = {val}")
    for key in sorted(summary):
        lines.append(f"result.{key} = {summary[key]}")
    with open(os.path.join(out, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def run(cfg: RunConfig) -> int:
    out = cfg.parameters["output_dir"]
    os.makedirs(out, exist_ok=True)
    status, summary = HANDLERS[cfg.command](cfg.parameters, out)
    with open(os.path.join(out, "plot_results.py"), "w") as fh:
        fh.write(PLOT_STUB)
    write_manifest(cfg, out, status, summary)
    return status


def _error(exc: BaseException, code: int) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fbmcontrol", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="flat key = value configuration file")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override one configuration key (repeatable)")
    ap.add_argument("--output", help="output directory")
    ap.add_argument("--seed", help="random seed")
    ap.add_argument("--workers", help="worker threads for path sampling")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = read_config_file(args.config) if args.config else {}
        for item in args.overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            raw[key.strip()] = value.strip()
        for key, val in (("output_dir", args.output), ("seed", args.seed), ("workers", args.workers)):
            if val is not None:
                raw[key] = val
        cfg = resolve(args.command, raw)
        return run(cfg)
    except NumericalError as exc:
        return _error(exc, EXIT_NUMERICAL)
    except (FbmControlError, ValueError, OSError) as exc:
        return _error(exc, EXIT_INVALID)


if __name__ == "__main__":
    sys.exit(main())

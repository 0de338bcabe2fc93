"""Command-line entry point: ``apcre <command> [options]``.

Exit codes: 0 success, 2 bad arguments, 3 a requested check failed,
4 input/output error, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .constraints import DEFAULT_LAMBDAS, SweepError, quadratic_decomposition, verify_1re_sweep
from .design import apc_model, build_grid, parse_factors, rank_report
from .io import OUTPUT_DIR_ENV, RunManifest, atomic_write_text, delimited, load_manifest, write_json, write_matrix_csv
from .reml import GridSpec, scan_rl_surface
from .report import SIX_SPECS, read_cell_csv, sensitivity_table
from .simulation import SimSpec, generate_dataset, run_table5, sim_design

log = logging.getLogger("apcre")

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5


class CheckFailed(Exception):
    pass


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


# --- commands ----------------------------------------------------------------
# Each takes the full parameter dict (as stored in the manifest) and an output
# directory, writes its payload files and returns the manifest.


def cmd_design(params: dict, out: Path) -> RunManifest:
    man = RunManifest("design", params)
    grid = build_grid(params["a"], params["p"])
    random = parse_factors(params["re"])
    bundle = apc_model(grid, random=random)
    man.add(write_matrix_csv(out / "design.csv", bundle.Q))
    man.add(atomic_write_text(out / "columns.txt", "\n".join(bundle.column_labels()) + "\n"))
    report = rank_report(bundle, params["tol"])
    man.add(write_json(out / "rank.json", report))
    log.info("deficiency: %d", report["deficiency"])
    return man


def cmd_verify(params: dict, out: Path) -> RunManifest:
    man = RunManifest("verify", params)
    report = verify_1re_sweep(
        range(params["a_min"], params["a_max"] + 1),
        range(params["p_min"], params["p_max"] + 1),
        params["lambdas"],
        params["re"],
        params["tol"],
    )
    rows = [(a, p, lam, lin, icp) for a, p, lam, icp, lin in report.rows]
    man.add(atomic_write_text(out / "verify.csv", delimited(rows, ["a", "p", "lambda", "linear", "intercept"])))
    man.add(write_json(out / "verify.json", report.summary()))
    log.info("max |alpha'M| = %.3g, max |beta'M| = %.3g, pass = %s", report.max_intercept, report.max_linear, report.passed)
    if not report.passed:
        raise CheckFailed(f"sweep exceeded tolerance {params['tol']}", man)
    return man


def _sim_spec(params: dict) -> SimSpec:
    return SimSpec(
        m_grid=tuple(params["m_grid"]),
        n_reps=params["reps"],
        noise_sd=params["sd"],
        seed=params["seed"],
        shrink_threshold=params["threshold"],
        a=params["a"],
        p=params["p"],
    )


TABLE5_HEADER = [
    "m",
    "n_reps",
    "period_shrunk",
    "cohort_shrunk",
    "mean_slope_age",
    "mean_slope_period",
    "mean_slope_cohort",
    "multiple_maxima",
    "failures",
]


def cmd_simulate(params: dict, out: Path) -> RunManifest:
    spec = _sim_spec(params)
    man = RunManifest("simulate", params, seed=spec.seed)

    def progress(row):
        log.info("m=%.2f period shrunk %d/%d", row.m, row.count_period_shrunk, row.n_reps)

    rows = run_table5(spec, params["policy"], progress)
    table = [
        (
            r.m,
            r.n_reps,
            r.count_period_shrunk,
            r.count_cohort_shrunk,
            r.mean_slope_age,
            r.mean_slope_period,
            r.mean_slope_cohort,
            r.count_multiple_maxima,
            r.count_failures,
        )
        for r in rows
    ]
    man.add(atomic_write_text(out / "table5.tsv", delimited(table, TABLE5_HEADER, delimiter="\t")))
    failures = {fmt_m(r.m): r.failures for r in rows if r.failures}
    if failures:
        man.add(write_json(out / "failures.json", failures))
    if params.get("check_endpoints"):
        by_m = {round(r.m, 6): r for r in rows}
        bad = []
        if 0.0 in by_m and by_m[0.0].count_period_shrunk != 0:
            bad.append(f"m=0: {by_m[0.0].count_period_shrunk} shrunk")
        for m, r in by_m.items():
            if m >= 0.7 and r.count_period_shrunk != r.n_reps:
                bad.append(f"m={m}: {r.count_period_shrunk}/{r.n_reps} shrunk")
        if bad:
            raise CheckFailed("; ".join(bad), man)
    return man


def fmt_m(m: float) -> str:
    return f"{m:.2f}"


def cmd_profile(params: dict, out: Path) -> RunManifest:
    spec = SimSpec(m_grid=(params["m"],), n_reps=1, noise_sd=params["sd"], seed=params["seed"], a=params["a"], p=params["p"])
    man = RunManifest("profile", params, seed=spec.seed)
    y = generate_dataset(params["m"], params["replicate"], spec)
    surface = scan_rl_surface(sim_design(spec.grid), y, GridSpec(params["n_points"], params["low"], params["high"]))
    n1, n2 = surface.names
    rows = []
    for i, s1 in enumerate(surface.axes[0]):
        for j, s2 in enumerate(surface.axes[1]):
            rows.append((s1, s2, surface.sigma2_e[i, j], surface.values[i, j]))
    header = [f"sigma2_{n1}", f"sigma2_{n2}", "sigma2_e", "profiled_rl"]
    man.add(atomic_write_text(out / "surface.csv", delimited(rows, header)))
    man.add(write_json(out / "maxima.json", {"local_maxima": surface.local_maxima, "y": y}))
    log.info("%d local maxima", len(surface.local_maxima))
    return man


def _parse_specs(text: str | None):
    if not text:
        return [list(s) for s in SIX_SPECS]
    return [parse_factors(chunk) for chunk in text.split(";") if chunk.strip()]


def cmd_fit(params: dict, out: Path) -> RunManifest:
    man = RunManifest("fit", params)
    data = read_cell_csv(params["data"])
    report = sensitivity_table(data, params["specs"])
    header = ["effect", "group", *report.labels]
    man.add(atomic_write_text(out / "sensitivity.tsv", delimited(report.effect_table(), header, delimiter="\t")))
    man.add(write_json(out / "fit.json", report.as_dict()))
    return man


def cmd_decompose(params: dict, out: Path) -> RunManifest:
    man = RunManifest("decompose", params)
    dec = quadratic_decomposition(build_grid(params["a"], params["p"]))
    rows = [
        ("intercept", dec.intercept_sq, dec.intercept_sq / dec.total_sq),
        ("age", dec.age_sq, dec.age_sq / dec.total_sq),
        ("period", dec.period_sq, dec.period_sq / dec.total_sq),
        ("cohort", dec.cohort_residual_sq, dec.cohort_residual_sq / dec.total_sq),
        ("total", dec.total_sq, 1.0),
    ]
    man.add(atomic_write_text(out / "decomposition.csv", delimited(rows, ["piece", "squared_length", "fraction"])))
    man.add(write_json(out / "decomposition.json", dec.as_dict()))
    fr = dec.fractions
    log.info("fixed %.3f / period %.3f / cohort %.3f", fr["fixed"], fr["period"], fr["cohort"])
    return man


COMMANDS = {
    "design": cmd_design,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "profile": cmd_profile,
    "fit": cmd_fit,
    "decompose": cmd_decompose,
}


# --- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apcre", description="Fixed- and random-effect age-period-cohort diagnostics.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def out_arg(p):
        p.add_argument("--out", type=Path, default=None, help=f"output directory (default ${OUTPUT_DIR_ENV} or ./apcre-out)")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("design", help="write an APC design matrix and its rank diagnostics")
    p.add_argument("--a", type=int, required=True)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--re", default="", help="comma-separated random factors (empty: all fixed)")
    p.add_argument("--tol", type=float, default=1e-10)
    out_arg(p)

    p = sub.add_parser("verify", help="influence-matrix sweep for one random factor")
    p.add_argument("--a-min", type=int, default=3)
    p.add_argument("--a-max", type=int, default=30)
    p.add_argument("--p-min", type=int, default=3)
    p.add_argument("--p-max", type=int, default=30)
    p.add_argument("--lambdas", type=_floats, default=list(DEFAULT_LAMBDAS))
    p.add_argument("--re", default="cohort", choices=["age", "period", "cohort"])
    p.add_argument("--tol", type=float, default=1e-9)
    out_arg(p)

    p = sub.add_parser("simulate", help="period-shrinkage simulation over m")
    p.add_argument("--m-grid", type=_floats, default=[round(0.05 * k, 2) for k in range(21)])
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--sd", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=5)
    p.add_argument("--threshold", type=float, default=1e-2)
    p.add_argument("--policy", choices=["multistart_global", "default_ones"], default="multistart_global")
    p.add_argument("--a", type=int, default=6)
    p.add_argument("--p", type=int, default=5)
    p.add_argument("--check-endpoints", action="store_true", help="fail unless m=0 gives 0 and m>=0.7 gives all shrunk")
    out_arg(p)

    p = sub.add_parser("profile", help="profiled restricted-likelihood surface for one simulated dataset")
    p.add_argument("--m", type=float, default=0.0)
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--sd", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=5)
    p.add_argument("--a", type=int, default=6)
    p.add_argument("--p", type=int, default=5)
    p.add_argument("--n-points", type=int, default=30)
    p.add_argument("--low", type=float, default=-8.0)
    p.add_argument("--high", type=float, default=2.0)
    out_arg(p)

    p = sub.add_parser("fit", help="fit cell means under several random-effect choices")
    p.add_argument("--data", type=Path, required=True, help="CSV with age_index,period_index,value[,weight]")
    p.add_argument("--specs", type=_parse_specs, default=None, help='e.g. "age;period;cohort;period,cohort" (default: six models)')
    out_arg(p)

    p = sub.add_parser("decompose", help="split the cohort quadratic column among intercept, age, period and cohort")
    p.add_argument("--a", type=int, default=6)
    p.add_argument("--p", type=int, default=5)
    out_arg(p)

    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.add_argument("manifest", type=Path)
    out_arg(p)
    return parser


def _validate(command: str, params: dict, parser: argparse.ArgumentParser) -> None:
    if command == "verify":
        for lo, hi in (("a_min", "a_max"), ("p_min", "p_max")):
            if not 3 <= params[lo] <= params[hi] <= 30:
                parser.error(f"--{lo.replace('_', '-')}/--{hi.replace('_', '-')} must satisfy 3 <= min <= max <= 30")
        if not params["lambdas"] or any(l <= 0 for l in params["lambdas"]):
            parser.error("--lambdas must be positive")
    if command in ("design", "decompose", "simulate", "profile"):
        if params["a"] < 2 or params["p"] < 2:
            parser.error("--a and --p must be at least 2")
    if command == "simulate":
        if params["reps"] < 1 or params["sd"] <= 0 or any(not 0 <= m <= 1 for m in params["m_grid"]):
            parser.error("need --reps >= 1, --sd > 0 and m values in [0, 1]")


def _params(args: argparse.Namespace) -> dict:
    params = {k: v for k, v in vars(args).items() if k not in ("command", "out", "verbose")}
    for k, v in params.items():
        if isinstance(v, Path):
            params[k] = str(v)
    if args.command == "fit" and params["specs"] is None:
        params["specs"] = [list(s) for s in SIX_SPECS]
    return params


def run(command: str, params: dict, out: Path) -> RunManifest:
    out.mkdir(parents=True, exist_ok=True)
    try:
        man = COMMANDS[command](params, out)
    except CheckFailed as exc:
        exc.args[1].write(out)
        raise
    man.write(out)
    return man


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = args.out or Path(os.environ.get(OUTPUT_DIR_ENV, "apcre-out"))
    if args.command == "replay":
        try:
            manifest = load_manifest(args.manifest)
        except (OSError, ValueError) as exc:
            print(f"apcre: cannot read manifest: {exc}", file=sys.stderr)
            return EXIT_IO
        command, params = manifest["command"], manifest["params"]
    else:
        command, params = args.command, _params(args)
        _validate(command, params, parser)
    try:
        run(command, params, out)
    except CheckFailed as exc:
        print(f"apcre {command}: check failed: {exc.args[0]}", file=sys.stderr)
        return EXIT_CHECK
    except (SweepError, np.linalg.LinAlgError) as exc:
        print(f"apcre {command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"apcre {command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"apcre {command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: simulate, estimate on CSV data, placebo checks.

Exit codes: 0 success, 2 usage error, 3 data validation error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys

from .balancing import EmptyBasisError, NonConvergenceError
from .config import EstimationConfig
from .data import DataError, Method, StratificationError, load_csv
from .estimators import DegenerateDesignError, RankDeficiencyError
from .hermite import BasisCapacityError
from .nuisance import ConvergenceError, IllPosedEffectError, InsufficientDataError
from .orthogonal import ConditioningError
from .simulation import SETUPS, SetupSpec, estimate_all, run_trials

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

USAGE_ERRORS = (ValueError,)
DATA_ERRORS = (DataError, StratificationError)
NUMERIC_ERRORS = (
    ConvergenceError,
    NonConvergenceError,
    IllPosedEffectError,
    InsufficientDataError,
    DegenerateDesignError,
    RankDeficiencyError,
    ConditioningError,
    EmptyBasisError,
    BasisCapacityError,
)

ESTIMATE_METHODS = ("sample_means", "ols", "tr", "aipw", "ipw", "amle")
SIMULATE_METHODS = ESTIMATE_METHODS + ("oracle_tr",)

CONFIG_KEYS = (
    "k_folds",
    "basis_max_order",
    "ridge_lambdas",
    "eta_clip",
    "f_min",
    "seed",
    "propensity_ridge",
    "qp_tol",
    "qp_max_iter",
    "sigma2_override",
    "amle_basis_max_order",
    "level",
    "n_jobs",
)


class UsageError(ValueError):
    pass


def _add_config_flags(parser):
    parser.add_argument("--config", help="JSON file with config-key defaults")
    parser.add_argument("--print-config", action="store_true", dest="print_config")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--k_folds", type=int, default=None)
    parser.add_argument("--basis_max_order", type=int, default=None)
    parser.add_argument("--ridge_lambdas", type=str, default=None, help="comma-separated")
    parser.add_argument("--eta_clip", type=float, default=None)
    parser.add_argument("--f_min", type=float, default=None)
    parser.add_argument("--propensity_ridge", type=float, default=None)
    parser.add_argument("--qp_tol", type=float, default=None)
    parser.add_argument("--qp_max_iter", type=int, default=None)
    parser.add_argument("--sigma2_override", type=float, default=None)
    parser.add_argument("--amle_basis_max_order", type=int, default=None)
    parser.add_argument("--level", type=float, default=None)
    parser.add_argument("--jobs", type=int, default=None, dest="n_jobs")
    parser.add_argument("--out", help="output file path")
    parser.add_argument("--format", choices=("csv", "json"), default="json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="npdid",
        description="Nonparametric difference-in-differences estimation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo study on a named setup")
    sim.add_argument("--setup", required=True)
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--d", type=int, required=True)
    sim.add_argument("--reps", type=int, default=100)
    sim.add_argument("--methods", default="tr,ols,sample_means")
    _add_config_flags(sim)

    for name in ("estimate", "placebo"):
        cmd = sub.add_parser(name, help=f"{name} treatment effects on CSV data")
        cmd.add_argument("--input", required=True)
        cmd.add_argument("--outcome-col", default="y", dest="outcome_col")
        cmd.add_argument("--state-col", default="s", dest="state_col")
        cmd.add_argument("--time-col", default="t", dest="time_col")
        cmd.add_argument("--covariate-cols", required=True, dest="covariate_cols")
        cmd.add_argument("--methods", default="tr,amle")
        cmd.add_argument("--filter", default=None, help="col=value row filter")
        _add_config_flags(cmd)
    return parser


def resolve_config(args) -> EstimationConfig:
    """Defaults, overridden by the config file, overridden by flags."""
    values = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_vals = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(file_vals) - set(CONFIG_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(file_vals)
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if isinstance(values.get("ridge_lambdas"), str):
        values["ridge_lambdas"] = tuple(
            float(v) for v in values["ridge_lambdas"].split(",") if v.strip()
        )
    elif isinstance(values.get("ridge_lambdas"), list):
        values["ridge_lambdas"] = tuple(values["ridge_lambdas"])
    return EstimationConfig(**values)


def _parse_methods(raw, allowed):
    methods = [m.strip() for m in raw.split(",") if m.strip()]
    if not methods:
        raise UsageError("no methods given")
    for m in methods:
        if m not in allowed:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(allowed)}")
    return methods


def _write_text(path, text):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text)


def cmd_simulate(args) -> int:
    config = resolve_config(args)
    if args.print_config:
        print(json.dumps(config.to_dict(), indent=2))
    if args.setup not in SETUPS:
        raise UsageError(f"unknown setup {args.setup!r}; valid setups: {sorted(SETUPS)}")
    methods = _parse_methods(args.methods, SIMULATE_METHODS)
    spec = SetupSpec(id=args.setup, n=args.n, d=args.d, seed=config.seed)
    table = run_trials(
        [spec], methods, reps=args.reps, seed=config.seed, config=config, n_jobs=config.n_jobs
    )
    header = f"{'setup':>6} {'n':>6} {'d':>4} {'method':>14} {'bias':>9} {'covg':>6} {'rmse':>9} {'fail':>5}"
    print(header)
    for row in table.rows:
        print(
            f"{row['setup']:>6} {row['n']:>6} {row['d']:>4} {row['method']:>14} "
            f"{row['bias']:>9.3f} {row['coverage']:>6.2f} {row['rmse']:>9.3f} "
            f"{row['failures']:>5}"
        )
    if args.out:
        if args.format == "csv":
            table.to_csv(args.out)
        else:
            _write_text(args.out, table.to_json())
    return EXIT_OK


def _load_filtered(args):
    schema = {
        "outcome": args.outcome_col,
        "state": args.state_col,
        "time": args.time_col,
        "covariates": [c.strip() for c in args.covariate_cols.split(",") if c.strip()],
    }
    row_filter = None
    if args.filter:
        if "=" not in args.filter:
            raise UsageError("--filter must look like column=value")
        col, value = args.filter.split("=", 1)
        row_filter = (col.strip(), value.strip())
    return load_csv(args.input, schema, row_filter=row_filter)


def _run_reports(args, placebo: bool) -> int:
    config = resolve_config(args)
    if args.print_config:
        print(json.dumps(config.to_dict(), indent=2))
    methods = _parse_methods(args.methods, ESTIMATE_METHODS)
    data = _load_filtered(args)
    data.validate_for_estimation()
    reports = estimate_all(data, methods, config)
    lines = []
    print(f"{'estimator':>14} {'estimate':>10} {'std. err':>10}" + ("  ci excludes 0" if placebo else ""))
    for m in methods:
        rep = reports[Method(m)]
        obj = rep.to_json_dict()
        if placebo:
            obj["contains_zero"] = bool(rep.ci_low <= 0.0 <= rep.ci_high)
        lines.append(json.dumps(obj))
        tail = ""
        if placebo:
            tail = "   no" if obj["contains_zero"] else "   yes"
        print(f"{m:>14} {rep.tau_hat:>10.4f} {rep.std_err:>10.4f}{tail}")
    if args.out:
        if args.format == "csv":
            cols = ["method", "tau_hat", "std_err", "ci_low", "ci_high", "n_used"]
            if placebo:
                cols.append("contains_zero")
            rows = [json.loads(line) for line in lines]
            out = [",".join(cols)]
            out += [",".join(str(r[c]) for c in cols) for r in rows]
            _write_text(args.out, "\n".join(out) + "\n")
        else:
            _write_text(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "estimate":
            return _run_reports(args, placebo=False)
        if args.command == "placebo":
            return _run_reports(args, placebo=True)
        raise UsageError(f"unknown command {args.command!r}")
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except USAGE_ERRORS as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

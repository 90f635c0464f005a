"""Command-line front end: ``bregbal {balance,estimate,diagnose,simulate}``.

Exit codes: 0 success, 2 input or configuration error, 3 infeasible
balance constraints, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from . import simulation
from .bregman import DistanceFamily
from .design import Dataset, Estimand, build_balance_functions, build_problem
from .diagnostics import balance_report
from .errors import (
    BalanceViolation,
    BregbalError,
    DegenerateArm,
    ExtremeProbability,
    SingularBread,
    SolverError,
    UnsupportedConfig,
)
from .estimators import (
    CausalEstimate,
    aipw_estimate,
    fit_logistic_mle,
    fit_outcome,
    hajek_estimate,
    ht_estimate,
    ipw_se,
    ipw_weights,
    sandwich_se,
)
from .solver import (
    DualSolution,
    SolverOptions,
    Status,
    balance_residual,
    duality_gap,
    recover_weights,
    solve_dual,
)

log = logging.getLogger("bregbal")

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 2, 3, 4
MISSING = {"", "na", "nan", "null", "none"}


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


# -- serialization ---------------------------------------------------------

def fmt_num(x):
    """Render a float with 17 significant digits (exact round-trip)."""
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def dumps(obj, indent=2, _level=0):
    """JSON encoder that writes every float with 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            return "[]"
        return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_num(obj)
    if obj is None:
        return "null"
    return json.dumps(str(obj))


# -- configuration ---------------------------------------------------------

@dataclass
class RunConfig:
    input_path: str | None = None
    treatment: str = "Z"
    outcome: str | None = None
    balance_cols: list = field(default_factory=list)
    id_col: str | None = None
    q_col: str | None = None
    estimand: str = "ate"
    distance: str | None = None
    method: str = "dual"
    standardize: bool = False
    weights_out: str | None = None
    weights_file: str | None = None
    output: str | None = None
    format: str = "json"
    ci: bool = False
    grad_tol: float = 1e-9
    max_iter: int = 500

    def validate(self):
        try:
            est = Estimand.parse(self.estimand)
        except ValueError:
            raise CliError(f"unknown estimand {self.estimand!r}")
        if self.distance is not None:
            try:
                fam = DistanceFamily.parse(self.distance)
            except ValueError:
                raise CliError(f"unknown distance {self.distance!r}")
            # both arms must sum to n with every weight below 1
            if fam is DistanceFamily.BINARY and est in (Estimand.CALIBRATION, Estimand.ICBPS):
                raise CliError(f"binary distance cannot satisfy {est.value} constraints "
                               "(weights bounded by 1 cannot sum to n within an arm)")
        if est is Estimand.CALIBRATION and self.q_col:
            log.info("calibration requires uniform sampling weights; checked after reading")
        if self.method not in ("dual", "ipw", "aipw"):
            raise CliError(f"unknown method {self.method!r}")
        if self.method != "dual" and est not in (Estimand.ATE, Estimand.ATT):
            raise CliError(f"method {self.method} supports estimands ate and att only")
        if self.method == "aipw" and est is not Estimand.ATE:
            raise CliError("aipw supports the ate estimand only")
        if self.format not in ("csv", "json"):
            raise CliError(f"unknown format {self.format!r}")
        return self

    def solver_options(self):
        try:
            return SolverOptions(grad_tol=float(self.grad_tol), max_iter=int(self.max_iter))
        except ValueError as exc:
            raise CliError(str(exc))


def read_config_file(path):
    try:
        return simulation.load_config(path)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}")
    except ValueError as exc:
        raise CliError(f"cannot parse config {path}: {exc}")


def merge_run_config(args):
    known = {f.name for f in fields(RunConfig)}
    values = {}
    if args.config:
        raw = read_config_file(args.config)
        unknown = set(raw) - known
        if unknown:
            raise CliError(f"unknown config keys {sorted(unknown)}")
        values.update(raw)
    for name in known:
        flag = getattr(args, name, None)
        if flag is not None and flag is not False:
            values[name] = flag
    if isinstance(values.get("balance_cols"), str):
        values["balance_cols"] = [c.strip() for c in values["balance_cols"].split(",") if c.strip()]
    return RunConfig(**values).validate()


# -- data ingestion --------------------------------------------------------

@dataclass
class Table:
    header: list
    rows: list

    def column(self, name):
        if name not in self.header:
            raise CliError(f"column {name!r} not in header {self.header}")
        j = self.header.index(name)
        return [r[j] for r in self.rows]

    def numeric(self, name, allow_missing=False):
        out = np.empty(len(self.rows))
        for i, raw in enumerate(self.column(name)):
            cell = raw.strip()
            # data rows are numbered from 1, the header being row 0
            if cell.lower() in MISSING:
                if allow_missing:
                    out[i] = np.nan
                    continue
                raise CliError(f"row {i + 1}: missing value in column {name!r}")
            try:
                out[i] = float(cell)
            except ValueError:
                raise CliError(f"row {i + 1}: non-numeric value {raw!r} in column {name!r}")
            if not math.isfinite(out[i]):
                raise CliError(f"row {i + 1}: non-finite value {raw!r} in column {name!r}")
        return out


def read_table(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise CliError(f"{path}: empty file")
            rows = []
            for i, row in enumerate(reader, start=1):
                if not row:
                    continue
                if len(row) != len(header):
                    raise CliError(f"row {i}: expected {len(header)} fields, found {len(row)}")
                rows.append(row)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}")
    if len(set(header)) != len(header):
        raise CliError("duplicate column names in header")
    if not rows:
        raise CliError(f"{path}: no data rows")
    return Table(header, rows)


def treatment_vector(table, name):
    Z = np.empty(len(table.rows))
    for i, raw in enumerate(table.column(name)):
        cell = raw.strip()
        if cell in ("0", "1", "0.0", "1.0"):
            Z[i] = float(cell)
        else:
            raise CliError(f"row {i + 1}: treatment column {name!r} must be 0 or 1, got {raw!r}")
    return Z


@dataclass
class Loaded:
    ids: list
    C: np.ndarray
    names: tuple
    Z: np.ndarray
    Y: np.ndarray | None
    q: np.ndarray | None


def load_data(cfg, need_outcome=False):
    if not cfg.input_path:
        raise CliError("--input is required")
    table = read_table(cfg.input_path)
    Z = treatment_vector(table, cfg.treatment)
    reserved = {cfg.treatment, cfg.outcome, cfg.id_col, cfg.q_col}
    cols = list(cfg.balance_cols) or [h for h in table.header if h not in reserved]
    # no covariate columns leaves the intercept-only design
    X = np.column_stack([table.numeric(c) for c in cols]) if cols else np.empty((len(Z), 0))
    Y = None
    if cfg.outcome:
        Y = table.numeric(cfg.outcome)
    elif need_outcome:
        raise CliError("--outcome is required for this command")
    q = table.numeric(cfg.q_col) if cfg.q_col else None
    ids = table.column(cfg.id_col) if cfg.id_col else [str(i + 1) for i in range(len(Z))]
    data = Dataset(X=X, Z=Z, Y=Y, q=q, column_names=cols)
    bf = build_balance_functions(data, standardize=cfg.standardize)
    return Loaded(ids, bf.C, bf.column_names, Z, Y, q)


# -- pipelines -------------------------------------------------------------

def _family(cfg):
    return None if cfg.distance is None else DistanceFamily.parse(cfg.distance)


def fit_dual(cfg, d):
    problem = build_problem(cfg.estimand, d.C, d.Z, q=d.q, family=_family(cfg))
    family = problem.family_default if cfg.distance is None else _family(cfg)
    sol = solve_dual(problem, family, cfg.solver_options())
    log.info("dual solve: %s after %d iterations (grad %.3e)",
             sol.status.value, sol.iterations, sol.grad_norm_final)
    if sol.status is Status.INFEASIBLE:
        raise CliError(f"infeasible: {sol.message}", EXIT_INFEASIBLE)
    if not sol.converged:
        raise CliError(f"{sol.status.value}: {sol.message}", EXIT_NUMERICAL)
    try:
        weights = recover_weights(problem, family, sol)
    except BalanceViolation as exc:
        raise CliError(str(exc), EXIT_NUMERICAL)
    return problem, family, sol, weights.p_hat


def arm_residuals(d, p):
    """``sum (2Z - 1) p c`` per balance function (exact balance gives zero)."""
    r = ((2.0 * d.Z - 1.0) * p) @ d.C
    return {name: float(v) for name, v in zip(d.names, r)}


def sidecar(problem, family, sol):
    p = recover_weights(problem, family, sol).p_hat
    return {
        "status": sol.status.value,
        "estimand": problem.estimand.value,
        "family": family.value,
        "iterations": sol.iterations,
        "lambda_hat": [float(v) for v in sol.lambda_hat],
        "duality_gap": duality_gap(problem, family, sol),
        "primal_value": sol.primal_value,
        "constraint_names": list(problem.constraint_names),
        "constraint_residuals": [float(v) for v in problem.residual(p)],
        "scaled_residual": balance_residual(problem, p),
    }


def write_weights(path, ids, p):
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="", encoding="utf-8")
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "weight"])
        for uid, val in zip(ids, p):
            w.writerow([uid, fmt_num(val)])
    finally:
        if fh is not sys.stdout:
            fh.close()


def read_weights(path, ids):
    table = read_table(path)
    got = table.column("unit")
    w = table.numeric("weight")
    if got != list(ids):
        lookup = dict(zip(got, w))
        missing = [u for u in ids if u not in lookup]
        if missing or len(lookup) != len(ids):
            raise CliError(f"weights file units do not match input units (missing {missing[:5]})")
        w = np.array([lookup[u] for u in ids])
    if np.any(w <= 0):
        raise CliError("weights must be positive")
    return w


def read_sidecar(path):
    try:
        with open(path + ".json", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError:
        return None


def emit(text, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def cmd_balance(cfg):
    d = load_data(cfg)
    if cfg.method != "dual":
        raise CliError("balance fits dual-solver weights; use estimate --method for baselines")
    problem, family, sol, p = fit_dual(cfg, d)
    write_weights(cfg.weights_out, d.ids, p)
    meta = sidecar(problem, family, sol)
    if cfg.weights_out not in (None, "-"):
        emit(dumps(meta) + "\n", cfg.weights_out + ".json")
    else:
        sys.stderr.write(dumps(meta) + "\n")
    return EXIT_OK


def _estimate_dual(cfg, d):
    se = None
    if cfg.weights_file:
        p = read_weights(cfg.weights_file, d.ids)
        meta = read_sidecar(cfg.weights_file)
        if cfg.ci:
            if meta is None:
                raise CliError("--ci with --weights-file needs the JSON sidecar holding lambda_hat")
            problem = build_problem(meta["estimand"], d.C, d.Z, q=d.q, family=meta["family"])
            family = DistanceFamily.parse(meta["family"])
            sol = DualSolution(np.array(meta["lambda_hat"], dtype=float), 0, 0.0, 0.0, 0.0,
                               Status.CONVERGED, family)
            se = sandwich_se(problem, family, sol, d.Y)
        extra = {}
    else:
        problem, family, sol, p = fit_dual(cfg, d)
        if cfg.ci:
            se = sandwich_se(problem, family, sol, d.Y)
        extra = {"solver_status": sol.status.value, "duality_gap": duality_gap(problem, family, sol)}
    est = ht_estimate(p, d.Z, d.Y, cfg.estimand)
    return CausalEstimate.with_se(est.tau_hat, Estimand.parse(cfg.estimand).value, len(d.Z), se), p, extra


def cmd_estimate(cfg):
    d = load_data(cfg, need_outcome=True)
    extra = {}
    if cfg.method == "dual":
        est, p, extra = _estimate_dual(cfg, d)
    else:
        fit = fit_logistic_mle(d.C, d.Z)
        if not fit.converged:
            raise CliError("logistic MLE did not converge (possible separation)", EXIT_NUMERICAL)
        if cfg.method == "ipw":
            p = ipw_weights(fit, d.Z, cfg.estimand).p_hat
            tau = hajek_estimate(p, d.Z, d.Y).tau_hat
            se = ipw_se(fit, d.C, d.Z, d.Y, cfg.estimand) if cfg.ci else None
            est = CausalEstimate.with_se(tau, Estimand.parse(cfg.estimand).value, len(d.Z), se)
        else:
            est = aipw_estimate(fit, fit_outcome(d.C, d.Z, d.Y), d.C, d.Z, d.Y, with_se=cfg.ci)
            p = ipw_weights(fit, d.Z, "ate").p_hat
    out = est.to_dict(include_se=cfg.ci)
    out["method"] = cfg.method
    out["balance_residuals"] = arm_residuals(d, p)
    out.update(extra)
    emit(dumps(out) + "\n", cfg.output)
    return EXIT_OK


def cmd_diagnose(cfg):
    d = load_data(cfg)
    if cfg.weights_file:
        p, label = read_weights(cfg.weights_file, d.ids), "weights_file"
    elif cfg.method == "ipw":
        fit = fit_logistic_mle(d.C, d.Z)
        if not fit.converged:
            raise CliError("logistic MLE did not converge (possible separation)", EXIT_NUMERICAL)
        p, label = ipw_weights(fit, d.Z, cfg.estimand).p_hat, "ipw"
    elif cfg.method == "dual":
        _, family, _, p = fit_dual(cfg, d)
        label = f"dual_{Estimand.parse(cfg.estimand).value}_{family.value}"
    else:
        raise CliError("diagnose supports --method dual or ipw")
    report = balance_report(d.C, d.Z, p, names=d.names, method=label)
    if cfg.format == "csv":
        emit(report.to_long_csv(), cfg.output)
    else:
        emit(dumps(report.to_dict()) + "\n", cfg.output)
    return EXIT_OK


def cmd_simulate(args):
    values = {}
    if args.config:
        raw = read_config_file(args.config)
        values.update(raw.get("scenario", raw))
    overrides = {
        "replications": args.replications, "base_seed": args.seed, "n": args.n,
        "sigma2": args.sigma2, "rho": args.rho, "treat_scenario": args.treat_scenario,
        "outcome_scenario": args.outcome_scenario, "effect_type": args.effect_type,
    }
    if args.methods:
        overrides["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.full_grid:
        log.warning("running the full published grid; this takes hours")
        base = simulation.ScenarioConfig.from_mapping(values)
        configs = simulation.published_grid(base.effect_type, base.replications, base.base_seed)
    else:
        configs = [simulation.ScenarioConfig.from_mapping(values)]
    parts, reps = [], []
    for k, config in enumerate(configs):
        bad = config.nonstandard_fields()
        if bad:
            log.warning("scenario uses values outside the published design: %s", bad)
        summary = run_quiet(config)
        parts.append(summary.to_csv(header=(k == 0)))
        reps.append(summary)
        log.info("scenario %s: %d redraws", config.scenario_id(), summary.n_redraws)
    emit("".join(parts), args.output)
    if args.replications_out:
        emit("".join(s.replications_csv() for s in reps), args.replications_out)
    return EXIT_OK


def run_quiet(config):
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return simulation.run_study(config)


# -- argument parsing ------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="bregbal", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON file; flags override its values")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--output", "-o", help="output path (default stdout)")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--seed", type=int)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--input", dest="input_path")
    data.add_argument("--treatment")
    data.add_argument("--outcome")
    data.add_argument("--balance-cols", dest="balance_cols",
                      help="comma-separated covariate columns (default: all others)")
    data.add_argument("--id-col", dest="id_col")
    data.add_argument("--q-col", dest="q_col", help="column of sampling weights q")
    data.add_argument("--estimand", choices=[e.value for e in Estimand])
    data.add_argument("--distance", choices=[f.value for f in DistanceFamily])
    data.add_argument("--standardize", action="store_true")
    data.add_argument("--grad-tol", dest="grad_tol", type=float)
    data.add_argument("--max-iter", dest="max_iter", type=int)

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("balance", parents=[common, data], help="fit balancing weights")
    p.add_argument("--weights-out", dest="weights_out")
    p.set_defaults(method="dual")

    p = sub.add_parser("estimate", parents=[common, data], help="estimate a causal effect")
    p.add_argument("--method", choices=("dual", "ipw", "aipw"))
    p.add_argument("--weights-file", dest="weights_file")
    p.add_argument("--ci", action="store_true", help="report std_err and 95%% interval")

    p = sub.add_parser("diagnose", parents=[common, data], help="covariate balance report")
    p.add_argument("--method", choices=("dual", "ipw"))
    p.add_argument("--weights-file", dest="weights_file")

    p = sub.add_parser("simulate", parents=[common], help="run a simulation scenario")
    p.add_argument("--replications", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--treat-scenario", dest="treat_scenario", choices=("a", "b"))
    p.add_argument("--outcome-scenario", dest="outcome_scenario", choices=("a", "b"))
    p.add_argument("--effect-type", dest="effect_type", choices=("constant", "linear"))
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(simulation.METHODS)}")
    p.add_argument("--replications-out", dest="replications_out",
                   help="also write per-replication estimates here")
    p.add_argument("--full-grid", dest="full_grid", action="store_true")
    return parser


COMMANDS = {"balance": cmd_balance, "estimate": cmd_estimate, "diagnose": cmd_diagnose}


def _exit_code(exc):
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, SolverError):
        return EXIT_INFEASIBLE if exc.status is Status.INFEASIBLE else EXIT_NUMERICAL
    if isinstance(exc, (SingularBread, ExtremeProbability, BalanceViolation, FloatingPointError,
                        np.linalg.LinAlgError)):
        return EXIT_NUMERICAL
    return EXIT_INPUT


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        return COMMANDS[args.command](merge_run_config(args))
    except (CliError, BregbalError, ValueError, KeyError, TypeError, DegenerateArm,
            UnsupportedConfig, FloatingPointError, np.linalg.LinAlgError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"bregbal: error: {msg}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())

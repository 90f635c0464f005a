"""Monte Carlo studies comparing balancing-weight methods under misspecification.

Every replication draws from its own counter-based RNG stream keyed by
``(base_seed, rep_index, purpose, attempt)``, so results do not depend on
the order or concurrency with which replications run.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from .bregman import DistanceFamily
from .design import (
    build_att_problem,
    build_calibration_problem,
    build_icbps_problem,
    build_single_set_problem,
)
from .errors import BregbalError, DegenerateArm, UnsupportedConfig
from .estimators import (
    aipw_estimate,
    fit_logistic_mle,
    fit_outcome,
    hajek_estimate,
    ht_estimate,
    ipw_weights,
)
from .solver import fit_weights

log = logging.getLogger(__name__)

METHODS = ("IPW", "SENT_single", "SENT_twoset", "BENT", "EB_ATT", "CAL", "AIPW")
TABLE1_METHODS = ("IPW", "SENT_single", "SENT_twoset", "BENT")
TABLE2_METHODS = ("AIPW", "CAL", "SENT_twoset")

PUBLISHED_VALUES = {
    "n": (200, 1000),
    "sigma2": (2.0, 5.0, 10.0),
    "rho": (-0.3, 0.0, 0.5),
    "treat_scenario": ("a", "b"),
    "outcome_scenario": ("a", "b"),
    "effect_type": ("constant", "linear"),
}

_PURPOSE = {"data": 0, "truth": 1}
TRUTH_DRAWS = 1_000_000
MAX_REDRAWS = 100


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 200
    sigma2: float = 10.0
    rho: float = 0.0
    treat_scenario: str = "a"
    outcome_scenario: str = "a"
    effect_type: str = "constant"
    replications: int = 200
    base_seed: int = 20190417
    methods: tuple = TABLE1_METHODS

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.n < 10:
            raise UnsupportedConfig("n must be at least 10")
        if not self.sigma2 > 0:
            raise UnsupportedConfig("sigma2 must be positive")
        if not -1 < self.rho < 1:
            raise UnsupportedConfig("rho must lie in (-1, 1)")
        if self.treat_scenario not in ("a", "b") or self.outcome_scenario not in ("a", "b"):
            raise UnsupportedConfig("scenarios must be 'a' or 'b'")
        if self.effect_type not in ("constant", "linear"):
            raise UnsupportedConfig("effect_type must be 'constant' or 'linear'")
        if self.replications < 1:
            raise UnsupportedConfig("replications must be positive")
        if not 0 <= int(self.base_seed) < 2**64:
            raise UnsupportedConfig("base_seed must be a 64-bit unsigned integer")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown or not self.methods:
            raise UnsupportedConfig(f"unknown methods {unknown}; choose from {METHODS}")

    def nonstandard_fields(self):
        return [k for k, allowed in PUBLISHED_VALUES.items() if getattr(self, k) not in allowed]

    def scenario_id(self):
        return {
            "n": self.n,
            "sigma2": self.sigma2,
            "rho": self.rho,
            "outcome_scenario": self.outcome_scenario,
            "treat_scenario": self.treat_scenario,
            "effect_type": self.effect_type,
        }

    @classmethod
    def from_mapping(cls, data):
        allowed = set(cls.__dataclass_fields__)
        unknown = set(data) - allowed
        if unknown:
            raise UnsupportedConfig(f"unknown config keys {sorted(unknown)}")
        return cls(**data)


def load_config(path):
    """Read a :class:`ScenarioConfig` mapping from TOML or JSON."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if str(path).lower().endswith(".json"):
        data = json.loads(raw.decode("utf-8"))
    else:
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib

        data = tomllib.loads(raw.decode("utf-8"))
    return data


def published_grid(effect_type="constant", replications=1000, base_seed=20190417):
    """All 72 scenarios of one simulation study (144 across both effect types)."""
    methods = TABLE1_METHODS if effect_type == "constant" else TABLE2_METHODS
    out = []
    for n in PUBLISHED_VALUES["n"]:
        for sigma2 in PUBLISHED_VALUES["sigma2"]:
            for rho in PUBLISHED_VALUES["rho"]:
                for ys in ("a", "b"):
                    for ts in ("a", "b"):
                        out.append(ScenarioConfig(n, sigma2, rho, ts, ys, effect_type,
                                                  replications, base_seed, methods))
    return out


def rng_for(base_seed, rep_index, purpose, attempt=0):
    ss = np.random.SeedSequence([int(base_seed), int(rep_index), _PURPOSE[purpose], int(attempt)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class SimDataset:
    X: np.ndarray
    U: np.ndarray
    pi_true: np.ndarray
    Z: np.ndarray
    Y0: np.ndarray
    Y1: np.ndarray
    Y: np.ndarray
    tau_true: object
    redraws: int = 0

    @property
    def C(self):
        return np.column_stack([np.ones(len(self.Z)), self.X])


def transform_covariates(X, ddof=1):
    """Nonlinear transforms of X, standardized with the sample mean and SD."""
    x1, x2, x3, x4 = X.T
    U = np.column_stack([
        np.exp(x1 / 2.0),
        x2 / (1.0 + np.exp(x1)) + 10.0,
        (x1 * x3 / 25.0 + 0.6) ** 3,
        (x2 + x4 + 20.0) ** 2,
    ])
    return (U - U.mean(axis=0)) / U.std(axis=0, ddof=ddof)


def _linear_parts(X, U, treat_scenario, outcome_scenario):
    T = X if treat_scenario == "a" else U
    eta = -T[:, 0] + 0.5 * T[:, 1] - 0.25 * T[:, 2] - 0.1 * T[:, 3]
    O = X if outcome_scenario == "a" else U
    mu = 210.0 + 27.4 * O[:, 0] + 13.7 * (O[:, 1] + O[:, 2] + O[:, 3])
    delta = 20.0 - 13.7 * O[:, 0] + 13.7 * O[:, 3]
    return eta, mu, delta


def _draw(config, rng, n):
    X = rng.standard_normal((n, 4))
    U = transform_covariates(X)
    eta, mu, delta = _linear_parts(X, U, config.treat_scenario, config.outcome_scenario)
    pi = 1.0 / (1.0 + np.exp(-eta))
    Z = (rng.random(n) < pi).astype(float)
    effect = np.full(n, 20.0) if config.effect_type == "constant" else delta
    sd = np.sqrt(config.sigma2)
    e0 = rng.standard_normal(n)
    e1 = rng.standard_normal(n)
    Y0 = mu + sd * e0
    Y1 = mu + effect + sd * (config.rho * e0 + np.sqrt(1.0 - config.rho**2) * e1)
    return X, U, pi, Z, Y0, Y1, effect


def generate_dataset(config, rep_index):
    """Draw replication ``rep_index``; empty arms trigger a counted redraw."""
    for attempt in range(MAX_REDRAWS):
        rng = rng_for(config.base_seed, rep_index, "data", attempt)
        X, U, pi, Z, Y0, Y1, effect = _draw(config, rng, config.n)
        if 0 < Z.sum() < config.n:
            tau = 20.0 if config.effect_type == "constant" else effect
            Y = Z * Y1 + (1.0 - Z) * Y0
            return SimDataset(X, U, pi, Z, Y0, Y1, Y, tau, redraws=attempt)
    raise DegenerateArm(f"replication {rep_index} kept drawing an empty arm")


@lru_cache(maxsize=32)
def _auxiliary_truth(treat_scenario, outcome_scenario, base_seed, draws):
    """Population targets of the linear effect, by weighting function."""
    cfg = ScenarioConfig(n=draws, treat_scenario=treat_scenario,
                         outcome_scenario=outcome_scenario, effect_type="linear",
                         base_seed=base_seed)
    X, U, pi, _, _, _, delta = _draw(cfg, rng_for(base_seed, 0, "truth"), draws)
    omega = pi * (1.0 - pi)
    return {
        "ate": float(delta.mean()),
        "att": float(np.sum(pi * delta) / np.sum(pi)),
        "owate": float(np.sum(omega * delta) / np.sum(omega)),
    }


_METHOD_ESTIMAND = {
    "IPW": "ate", "SENT_single": "ate", "SENT_twoset": "ate", "CAL": "ate",
    "AIPW": "ate", "BENT": "owate", "EB_ATT": "att",
}


def true_effect(config, method):
    if config.effect_type == "constant":
        return 20.0
    truth = _auxiliary_truth(config.treat_scenario, config.outcome_scenario,
                             int(config.base_seed), TRUTH_DRAWS)
    return truth[_METHOD_ESTIMAND[method]]


def method_weights(method, C, Z):
    """Balancing weights for one dual-solver method (raises on failure)."""
    table = {
        "SENT_single": (build_single_set_problem, DistanceFamily.SHIFTED),
        "SENT_twoset": (build_icbps_problem, DistanceFamily.SHIFTED),
        "BENT": (build_single_set_problem, DistanceFamily.BINARY),
        "EB_ATT": (build_att_problem, DistanceFamily.UNNORMALIZED),
        "CAL": (build_calibration_problem, DistanceFamily.UNNORMALIZED),
    }
    if method == "IPW":
        fit = fit_logistic_mle(C, Z)
        if not fit.converged:
            raise BregbalError("logistic MLE did not converge")
        return ipw_weights(fit, Z, "ate").p_hat
    builder, family = table[method]
    weights, _ = fit_weights(builder(C, Z, family=family), family)
    return weights.p_hat


def estimate_method(method, data):
    C, Z, Y = data.C, data.Z, data.Y
    if method == "AIPW":
        fit = fit_logistic_mle(C, Z)
        if not fit.converged:
            raise BregbalError("logistic MLE did not converge")
        return aipw_estimate(fit, fit_outcome(C, Z, Y), C, Z, Y).tau_hat
    if method == "IPW":
        return hajek_estimate(method_weights(method, C, Z), Z, Y).tau_hat
    return ht_estimate(method_weights(method, C, Z), Z, Y).tau_hat


def run_replication(config, rep_index):
    data = generate_dataset(config, rep_index)
    rows = []
    for method in config.methods:
        try:
            est = estimate_method(method, data)
            status = "ok" if np.isfinite(est) else "failed"
        except (BregbalError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.debug("rep %d method %s failed: %s", rep_index, method, exc)
            est, status = float("nan"), "failed"
        rows.append({"rep": rep_index, "method": method, "estimate": float(est),
                     "status": status, "redraws": data.redraws})
    return rows


@dataclass(frozen=True)
class MethodSummary:
    method: str
    avg_estimate: float
    mc_std_err: float
    mse: float
    bias: float
    n_failed: int
    n_ok: int
    truth: float


@dataclass
class SimSummary:
    config: ScenarioConfig
    rows: list
    replications: list = field(repr=False, default_factory=list)
    n_redraws: int = 0

    def by_method(self, method):
        for row in self.rows:
            if row.method == method:
                return row
        raise KeyError(method)

    def to_csv(self, fh=None, header=True):
        own = fh is None
        fh = io.StringIO() if own else fh
        writer = csv.writer(fh, lineterminator="\n")
        sid = self.config.scenario_id()
        cols = list(sid) + ["method", "avg_estimate", "mc_std_err", "mse", "bias",
                            "n_failed", "truth"]
        if header:
            writer.writerow(cols)
        for row in self.rows:
            writer.writerow([_fmt(v) for v in sid.values()] + [
                row.method, _fmt(row.avg_estimate), _fmt(row.mc_std_err), _fmt(row.mse),
                _fmt(row.bias), row.n_failed, _fmt(row.truth)])
        return fh.getvalue() if own else None

    def replications_csv(self, fh=None):
        own = fh is None
        fh = io.StringIO() if own else fh
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rep", "method", "estimate", "status"])
        for rec in self.replications:
            writer.writerow([rec["rep"], rec["method"], _fmt(rec["estimate"]), rec["status"]])
        return fh.getvalue() if own else None


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if not np.isfinite(v):
        return "NA"
    return format(v, ".17g")


def summarize(config, records):
    rows = []
    for method in config.methods:
        est = np.array([r["estimate"] for r in records
                        if r["method"] == method and r["status"] == "ok"])
        n_failed = sum(1 for r in records if r["method"] == method and r["status"] != "ok")
        truth = true_effect(config, method)
        if est.size:
            avg = float(est.mean())
            sd = float(est.std(ddof=1)) if est.size > 1 else float("nan")
            mse = float(np.mean((est - truth) ** 2))
            bias = avg - truth
        else:
            avg = sd = mse = bias = float("nan")
        rows.append(MethodSummary(method, avg, sd, mse, bias, n_failed, int(est.size), truth))
    return rows


def thread_count(threads=None):
    if threads is None:
        env = os.environ.get("BREGBAL_THREADS")
        threads = int(env) if env else 1
    return max(1, int(threads))


def run_study(config, threads=None):
    """Run all replications and aggregate per method.

    Solver failures count toward ``n_failed``; they never abort the study.
    """
    bad = config.nonstandard_fields()
    if bad:
        warnings.warn(f"scenario uses values outside the published design: {bad}",
                      stacklevel=2)
    reps = range(config.replications)
    workers = thread_count(threads)
    if workers == 1:
        chunks = [run_replication(config, r) for r in reps]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(lambda r: run_replication(config, r), reps))
    records = [row for chunk in chunks for row in chunk]
    records.sort(key=lambda r: (r["rep"], config.methods.index(r["method"])))
    redraws = sum(chunk[0]["redraws"] for chunk in chunks if chunk)
    return SimSummary(config, summarize(config, records), records, redraws)


def with_overrides(config, **kw):
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(config, **kw) if kw else config


def config_dict(config):
    d = asdict(config)
    d["methods"] = list(config.methods)
    return d

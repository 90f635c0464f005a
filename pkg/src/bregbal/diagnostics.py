"""Covariate balance diagnostics: standardized mean differences and Kish ESS."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ZeroVariance

SMD_THRESHOLD = 0.05


def _names(C, names):
    C = np.asarray(C, dtype=float)
    if names is None:
        names = [f"c{j + 1}" for j in range(C.shape[1])]
    return C, list(names)


def _non_intercept(C):
    return [j for j in range(C.shape[1]) if not np.all(C[:, j] == 1.0)]


def pooled_sd(C, Z):
    """Unweighted pooled SD ``sqrt((s1^2 + s0^2) / 2)`` per column."""
    C = np.asarray(C, dtype=float)
    Z = np.asarray(Z, dtype=float)
    v1 = C[Z == 1].var(axis=0, ddof=1)
    v0 = C[Z == 0].var(axis=0, ddof=1)
    return np.sqrt((v1 + v0) / 2.0)


def weighted_smd(C, Z, weights):
    """Absolute weighted SMD for every non-intercept column of ``C``.

    The denominator is the pooled SD of the unweighted arms so that
    different weighting schemes are compared on one scale.
    """
    C = np.asarray(C, dtype=float)
    Z = np.asarray(Z, dtype=float)
    w = np.asarray(getattr(weights, "p_hat", weights), dtype=float)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    cols = _non_intercept(C)
    X = C[:, cols]
    sd = pooled_sd(X, Z)
    if np.any(sd == 0):
        raise ZeroVariance("pooled standard deviation is zero for some covariate")
    t, c = Z == 1, Z == 0
    m1 = w[t] @ X[t] / w[t].sum()
    m0 = w[c] @ X[c] / w[c].sum()
    return np.abs(m1 - m0) / sd


def effective_sample_size(weights, Z):
    """Kish effective sample size ``(sum w)^2 / sum w^2`` for (treated, control)."""
    w = np.asarray(getattr(weights, "p_hat", weights), dtype=float)
    Z = np.asarray(Z, dtype=float)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    out = []
    for arm in (1.0, 0.0):
        wa = w[Z == arm]
        out.append(float(wa.sum() ** 2 / np.sum(wa**2)))
    return tuple(out)


@dataclass(frozen=True)
class CovariateBalance:
    name: str
    unadjusted_smd: float
    adjusted_smd: float
    constraint_residual: float
    flagged: bool


@dataclass(frozen=True)
class BalanceReport:
    method: str
    records: tuple[CovariateBalance, ...]
    ess_treated: float
    ess_control: float
    threshold: float = SMD_THRESHOLD

    def to_long_csv(self, fh=None, header=True):
        """Write ``method,covariate,smd`` rows (one per adjusted covariate)."""
        own = fh is None
        fh = io.StringIO() if own else fh
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow(["method", "covariate", "smd"])
        for rec in self.records:
            writer.writerow([self.method, rec.name, repr(float(rec.adjusted_smd))])
        return fh.getvalue() if own else None

    def to_dict(self):
        return {
            "method": self.method,
            "ess_treated": self.ess_treated,
            "ess_control": self.ess_control,
            "threshold": self.threshold,
            "covariates": [rec.__dict__ for rec in self.records],
        }


def balance_report(C, Z, weights, names=None, method="weights", threshold=SMD_THRESHOLD):
    C, names = _names(C, names)
    Z = np.asarray(Z, dtype=float)
    w = np.asarray(getattr(weights, "p_hat", weights), dtype=float)
    cols = _non_intercept(C)
    raw = weighted_smd(C, Z, np.ones_like(w))
    adj = weighted_smd(C, Z, w)
    resid = ((2.0 * Z - 1.0) * w) @ C[:, cols]
    records = tuple(
        CovariateBalance(names[j], float(raw[k]), float(adj[k]), float(resid[k]),
                         bool(adj[k] > threshold))
        for k, j in enumerate(cols)
    )
    ess_t, ess_c = effective_sample_size(w, Z)
    return BalanceReport(method, records, ess_t, ess_c, threshold)

"""Effect estimators built on balancing weights, plus logistic and outcome baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .bregman import project_derivative
from .design import Estimand, check_rank, check_treatment
from .errors import (
    DegenerateDenominator,
    ExtremeProbability,
    LengthMismatch,
    SingularBread,
)
from .solver import WeightSet, primal_weights

Z_975 = 1.959963984540054
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class CausalEstimate:
    tau_hat: float
    estimand: str
    n_used: int
    std_err: float | None = None
    ci_lower: float | None = None
    ci_upper: float | None = None

    @classmethod
    def with_se(cls, tau_hat, estimand, n_used, std_err):
        if std_err is None:
            return cls(float(tau_hat), str(estimand), int(n_used))
        half = Z_975 * std_err
        return cls(float(tau_hat), str(estimand), int(n_used), float(std_err),
                   float(tau_hat - half), float(tau_hat + half))

    def to_dict(self, include_se=True):
        out = {"tau_hat": self.tau_hat, "estimand": self.estimand, "n": self.n_used}
        if include_se and self.std_err is not None:
            out["std_err"] = self.std_err
            out["ci"] = [self.ci_lower, self.ci_upper]
        return out


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    fitted_probs: np.ndarray
    converged: bool
    iterations: int


@dataclass(frozen=True)
class OutcomeFit:
    beta0: np.ndarray
    beta1: np.ndarray

    def mu0(self, C):
        return np.asarray(C, dtype=float) @ self.beta0

    def mu1(self, C):
        return np.asarray(C, dtype=float) @ self.beta1


def _weights_array(weights):
    p = weights.p_hat if isinstance(weights, WeightSet) else weights
    return np.asarray(p, dtype=float)


def ht_estimate(weights, Z, Y, estimand="ate"):
    """Ratio estimator ``sum (2Z - 1) p Y / sum p Z``."""
    p = _weights_array(weights)
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if not (p.shape == Z.shape == Y.shape):
        raise LengthMismatch("weights, Z and Y must have equal length")
    denom = float(np.sum(p * Z))
    if denom == 0.0:
        raise DegenerateDenominator("sum of treated weights is zero")
    tau = float(np.sum((2.0 * Z - 1.0) * p * Y) / denom)
    return CausalEstimate(tau, str(estimand), len(Y))


def hajek_estimate(weights, Z, Y, estimand="ate"):
    """Difference of arm-wise weighted means, each arm normalized by its own sum.

    Coincides with :func:`ht_estimate` whenever the weights balance an
    intercept; for inverse probability weights it removes the outcome level
    from the estimator's variance.
    """
    p = _weights_array(weights)
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if not (p.shape == Z.shape == Y.shape):
        raise LengthMismatch("weights, Z and Y must have equal length")
    s1 = float(np.sum(p * Z))
    s0 = float(np.sum(p * (1.0 - Z)))
    if s1 == 0.0 or s0 == 0.0:
        raise DegenerateDenominator("an arm has zero total weight")
    tau = float(np.sum(p * Z * Y) / s1 - np.sum(p * (1.0 - Z) * Y) / s0)
    return CausalEstimate(tau, str(estimand), len(Y))


def _hajek_influence(p, Z, Y, dp_dtheta, zeta, dzeta):
    s1 = np.sum(p * Z)
    s0 = np.sum(p * (1.0 - Z))
    m1 = np.sum(p * Z * Y) / s1
    m0 = np.sum(p * (1.0 - Z) * Y) / s0
    g = Z * (Y - m1) / s1 - (1.0 - Z) * (Y - m0) / s0
    h = p * g
    if zeta.shape[1] == 0:
        return h
    dh = g @ dp_dtheta
    if not np.isfinite(np.linalg.cond(dzeta)) or np.linalg.cond(dzeta) > 1e14:
        raise SingularBread("estimating-equation Jacobian is not invertible")
    return h - zeta @ np.linalg.solve(dzeta.T, dh)


def _ratio_influence(p, Z, Y, tau, dp_dtheta, zeta, dzeta):
    """Influence values of the ratio estimator with nuisance ``theta``.

    ``dp_dtheta`` is ``n x K`` (derivative of each unit's weight),
    ``zeta`` the ``n x K`` per-unit estimating functions for ``theta`` and
    ``dzeta`` their summed Jacobian.
    """
    psi = (2.0 * Z - 1.0) * p * Y - tau * p * Z
    dpsi = ((2.0 * Z - 1.0) * Y - tau * Z) @ dp_dtheta
    if zeta.shape[1] == 0:
        return psi
    try:
        cond = np.linalg.cond(dzeta)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularBread("estimating-equation Jacobian is not invertible")
    coef = np.linalg.solve(dzeta.T, dpsi)
    return psi - zeta @ coef


def sandwich_se(problem, family, solution, Y):
    """Stacked M-estimation standard error for ``ht_estimate`` on dual weights.

    The dual vector solves ``sum_i zeta_i = 0`` with
    ``zeta_i = a_i p_i - b_i``; the effect solves
    ``sum_i (2Z_i - 1) p_i Y_i - tau p_i Z_i = 0``.  Expectations in the
    influence function are replaced by sample sums.
    """
    family = problem.family_default if family is None else family
    Y = np.asarray(Y, dtype=float)
    Z = problem.Z
    lam = solution.lambda_hat
    p = primal_weights(problem, family, lam)
    tau = ht_estimate(p, Z, Y).tau_hat
    d = project_derivative(family, problem.q, problem.A @ lam)
    dp_dlam = d[:, None] * problem.A
    zeta = problem.A * p[:, None] - problem.b_units
    dzeta = problem.A.T @ dp_dlam
    phi = _ratio_influence(p, Z, Y, tau, dp_dlam, zeta, dzeta)
    return float(np.sqrt(np.sum(phi**2)) / np.sum(p * Z))


def fit_logistic_mle(C, Z, tol=1e-8, max_iter=100):
    """Logistic regression by Newton-Raphson (IRLS).

    Separation is reported through ``converged=False`` rather than raised.
    """
    C = np.asarray(C, dtype=float)
    Z = check_treatment(Z)
    check_rank(C, [f"c{j + 1}" for j in range(C.shape[1])])
    beta = np.zeros(C.shape[1])
    converged = False
    it = 0
    with np.errstate(over="ignore"):
        for it in range(1, max_iter + 1):
            pi = expit(C @ beta)
            grad = C.T @ (Z - pi)
            done = np.max(np.abs(grad)) <= tol
            w = pi * (1.0 - pi)
            H = C.T @ (w[:, None] * C)
            try:
                step = np.linalg.solve(H, grad)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(step)):
                break
            beta = beta + step
            if done:
                # one extra step after the tolerance is met polishes to rounding
                converged = True
                break
        else:
            pi = expit(C @ beta)
            converged = bool(np.max(np.abs(C.T @ (Z - pi))) <= tol)
    pi = expit(C @ beta)
    # fitted probabilities pinned at 0/1 mean the likelihood has no maximiser
    if np.any((pi < PROB_FLOOR) | (pi > 1 - PROB_FLOOR)):
        converged = False
    return LogisticFit(beta, pi, converged, it)


def _check_probs(pi):
    pi = np.asarray(pi, dtype=float)
    if np.any((pi < PROB_FLOOR) | (pi > 1.0 - PROB_FLOOR)):
        raise ExtremeProbability(
            f"fitted propensity outside [{PROB_FLOOR:g}, 1 - {PROB_FLOOR:g}]"
        )
    return pi


def ipw_weights(fit, Z, estimand="ate"):
    """Inverse probability weights from a fitted propensity model."""
    pi = _check_probs(fit.fitted_probs)
    Z = np.asarray(Z, dtype=float)
    est = Estimand.parse(estimand)
    if est is Estimand.ATT:
        p = np.where(Z == 1, 1.0, pi / (1.0 - pi))
    else:
        p = np.where(Z == 1, 1.0 / pi, 1.0 / (1.0 - pi))
    return WeightSet(p_hat=p, problem_digest="", family=None)


def ipw_se(fit, C, Z, Y, estimand="ate"):
    """Sandwich SE of the IPW (Hajek) estimator, propagating logistic estimation."""
    C = np.asarray(C, dtype=float)
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    pi = _check_probs(fit.fitted_probs)
    p = ipw_weights(fit, Z, estimand).p_hat
    if Estimand.parse(estimand) is Estimand.ATT:
        dp = np.where(Z == 1, 0.0, p)
    else:
        dp = np.where(Z == 1, -(1.0 - pi) / pi, pi / (1.0 - pi))
    dp_dbeta = dp[:, None] * C
    zeta = C * (Z - pi)[:, None]
    dzeta = -(C.T @ ((pi * (1.0 - pi))[:, None] * C))
    phi = _hajek_influence(p, Z, Y, dp_dbeta, zeta, dzeta)
    return float(np.sqrt(np.sum(phi**2)))


def fit_outcome(C, Z, Y):
    """Separate least-squares regressions of Y on C within each arm."""
    C = np.asarray(C, dtype=float)
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    betas = []
    for arm in (0.0, 1.0):
        rows = Z == arm
        Ca = C[rows]
        if Ca.shape[0] <= Ca.shape[1]:
            raise LengthMismatch(f"arm {int(arm)} has too few units for the outcome regression")
        check_rank(Ca, [f"c{j + 1}" for j in range(C.shape[1])])
        beta, *_ = np.linalg.lstsq(Ca, Y[rows], rcond=None)
        betas.append(beta)
    return OutcomeFit(beta0=betas[0], beta1=betas[1])


def aipw_from_weights(p, outcome, C, Z, Y):
    """Augmented estimator with ``p`` standing in for ``1/pi`` or ``1/(1 - pi)``.

    Equals ``mean[(2Z - 1) p (Y - mu_Z) + mu_1 - mu_0]``.
    """
    p = _weights_array(p)
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    mu0 = outcome.mu0(C)
    mu1 = outcome.mu1(C)
    mu_obs = np.where(Z == 1, mu1, mu0)
    return float(np.mean((2.0 * Z - 1.0) * p * (Y - mu_obs) + mu1 - mu0))


def aipw_estimate(fit, outcome, C, Z, Y, with_se=False):
    """Augmented inverse probability weighting estimate of the ATE."""
    pi = _check_probs(fit.fitted_probs)
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    mu0 = outcome.mu0(C)
    mu1 = outcome.mu1(C)
    terms = (Z * Y / pi - (Z - pi) * mu1 / pi
             - (1.0 - Z) * Y / (1.0 - pi) - (Z - pi) * mu0 / (1.0 - pi))
    tau = float(np.mean(terms))
    se = None
    if with_se:
        # plug-in influence function; nuisance estimation not propagated
        se = float(np.std(terms, ddof=1) / np.sqrt(len(terms)))
    return CausalEstimate.with_se(tau, "ate", len(Y), se)

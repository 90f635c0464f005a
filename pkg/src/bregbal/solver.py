"""Damped Newton ascent on the concave dual of a Bregman balancing problem.

For a problem ``min D_f(p || q) s.t. A^T p = b`` the dual function is

    g(lam) = D_f(P(lam) || q) + (A^T P(lam) - b)^T lam,   P(lam) = project(q, A lam)

with gradient ``A^T P(lam) - b`` and Hessian ``A^T diag(dP/deta) A``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .bregman import (
    ETA_CLAMP,
    DistanceFamily,
    _project,
    clamp_eta,
    distance_terms,
    project_derivative,
)
from .errors import BalanceViolation, SolverError

log = logging.getLogger(__name__)

BALANCE_TOL = 1e-6
GAP_TOL = 1e-6


class Status(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class SolverOptions:
    grad_tol: float = 1e-9
    max_iter: int = 500
    armijo_c: float = 1e-4
    backtrack_ratio: float = 0.5
    levenberg_floor: float = 1e-10
    divergence_norm: float = 1e6
    max_backtracks: int = 60
    boundary_tol: float = 1e-12

    def __post_init__(self):
        for name in ("grad_tol", "armijo_c", "levenberg_floor", "divergence_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.backtrack_ratio < 1:
            raise ValueError("backtrack_ratio must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


@dataclass
class DualSolution:
    lambda_hat: np.ndarray
    iterations: int
    grad_norm_final: float
    primal_value: float
    dual_value: float
    status: Status
    family: DistanceFamily
    message: str = ""
    clamp_active: bool = False
    trace: list = field(default_factory=list, repr=False)

    @property
    def converged(self):
        return self.status is Status.CONVERGED


@dataclass(frozen=True)
class WeightSet:
    p_hat: np.ndarray
    problem_digest: str
    family: DistanceFamily | None

    def __len__(self):
        return len(self.p_hat)


def _resolve_family(problem, family):
    return problem.family_default if family is None else DistanceFamily.parse(family)


def _eta(problem, lam):
    return problem.A @ np.asarray(lam, dtype=float)


def primal_weights(problem, family, lam):
    """``P(lam)``: weights implied by a dual vector (clamped predictor)."""
    family = _resolve_family(problem, family)
    return _project(family, problem.q, clamp_eta(_eta(problem, lam)))


def dual_objective(problem, family, lam):
    family = _resolve_family(problem, family)
    lam = np.asarray(lam, dtype=float)
    p = primal_weights(problem, family, lam)
    return float(np.sum(distance_terms(family, p, problem.q)) + problem.residual(p) @ lam)


def dual_gradient(problem, family, lam):
    family = _resolve_family(problem, family)
    return problem.residual(primal_weights(problem, family, lam))


def dual_hessian(problem, family, lam):
    family = _resolve_family(problem, family)
    d = project_derivative(family, problem.q, _eta(problem, lam))
    return problem.A.T @ (d[:, None] * problem.A)


def _newton_direction(H, g, floor):
    """Solve ``(-H) d = g``, adding a doubling Levenberg shift if needed."""
    M = -H
    shift = 0.0
    eye = np.eye(len(g))
    while True:
        try:
            factor = cho_factor(M + shift * eye, lower=True, check_finite=True)
            return cho_solve(factor, g), shift
        except (LinAlgError, ValueError):
            shift = floor if shift == 0.0 else 2.0 * shift
            if shift > 1e300:
                raise


def _converged_tol(problem, opts):
    return opts.grad_tol * (1.0 + np.max(np.abs(problem.b), initial=0.0))


def solve_dual(problem, family=None, opts=None, lambda0=None, trace=False):
    """Maximise the dual by damped Newton; certify by gradient and duality gap."""
    family = _resolve_family(problem, family)
    opts = SolverOptions() if opts is None else opts
    K = problem.K
    lam = np.zeros(K) if lambda0 is None else np.array(lambda0, dtype=float)
    tol = _converged_tol(problem, opts)
    records = []

    def finish(status, it, message=""):
        p = primal_weights(problem, family, lam)
        g = problem.residual(p)
        primal = float(np.sum(distance_terms(family, p, problem.q)))
        clamp = bool(np.any(np.abs(_eta(problem, lam)) >= ETA_CLAMP))
        return DualSolution(
            lambda_hat=lam.copy(),
            iterations=it,
            grad_norm_final=float(np.max(np.abs(g))) if K else 0.0,
            primal_value=primal,
            dual_value=primal + float(g @ lam),
            status=status,
            family=family,
            message=message,
            clamp_active=clamp,
            trace=records,
        )

    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        value = dual_objective(problem, family, lam)
        g = dual_gradient(problem, family, lam)
        for it in range(opts.max_iter + 1):
            if not (np.isfinite(value) and np.all(np.isfinite(g))):
                return finish(Status.NUMERICAL_FAILURE, it, "non-finite dual objective or gradient")
            gnorm = float(np.max(np.abs(g))) if K else 0.0
            if gnorm <= tol:
                sol = finish(Status.CONVERGED, it)
                return _certify(problem, sol, opts)
            if it == opts.max_iter:
                break
            H = dual_hessian(problem, family, lam)
            if not np.all(np.isfinite(H)):
                return finish(Status.NUMERICAL_FAILURE, it, "non-finite Hessian")
            try:
                d, shift = _newton_direction(H, g, opts.levenberg_floor)
            except (LinAlgError, ValueError):
                return finish(Status.NUMERICAL_FAILURE, it, "Hessian factorization failed")
            slope = float(g @ d)
            t = 1.0
            accepted = False
            # predicted ascent below objective rounding: Armijo cannot discriminate
            noise = 1e-12 * (1.0 + abs(value))
            for _ in range(opts.max_backtracks if slope > noise else 0):
                cand = lam + t * d
                cand_value = dual_objective(problem, family, cand)
                if np.isfinite(cand_value) and cand_value >= value + opts.armijo_c * t * slope:
                    accepted = True
                    break
                t *= opts.backtrack_ratio
            if accepted:
                cand_g = dual_gradient(problem, family, cand)
            else:
                # accept a full step that still shrinks the gradient
                cand = lam + d
                cand_value = dual_objective(problem, family, cand)
                cand_g = dual_gradient(problem, family, cand)
                if not (np.all(np.isfinite(cand_g)) and np.max(np.abs(cand_g)) < gnorm):
                    return finish(
                        Status.INFEASIBLE, it,
                        "line search stalled with nonzero gradient; constraint set "
                        "may not meet the open domain",
                    )
                t = 1.0
            lam, value, g = cand, cand_value, cand_g
            if trace or log.isEnabledFor(logging.DEBUG):
                rec = {"iteration": it + 1, "grad_norm": float(np.max(np.abs(g))),
                       "step": t, "objective": float(value), "levenberg": shift}
                records.append(rec)
                log.debug("newton %(iteration)d grad=%(grad_norm).3e step=%(step).3g "
                          "obj=%(objective).12g", rec)
            if np.linalg.norm(lam) > opts.divergence_norm:
                return finish(
                    Status.INFEASIBLE, it + 1,
                    f"dual iterate norm exceeded {opts.divergence_norm:g}; "
                    "constraints likely infeasible (positivity violation)",
                )
    sol = finish(Status.MAX_ITERATIONS, opts.max_iter, "iteration limit reached")
    if sol.clamp_active:
        sol.status = Status.INFEASIBLE
        sol.message = "solution approaches the domain boundary (projection clamp active)"
    return sol


def boundary_proximity(family, p, q):
    """Smallest ratio of a weight's distance to the domain edge over q's distance."""
    r = (p - family.lower) / (q - family.lower)
    if np.isfinite(family.upper):
        r = np.minimum(r, (family.upper - p) / (family.upper - q))
    return float(np.min(r))


def _certify(problem, sol, opts):
    if sol.clamp_active:
        sol.status = Status.INFEASIBLE
        sol.message = "solution on the domain boundary (projection clamp active)"
        return sol
    p = primal_weights(problem, sol.family, sol.lambda_hat)
    if boundary_proximity(sol.family, p, problem.q) < opts.boundary_tol:
        sol.status = Status.INFEASIBLE
        sol.message = ("weights collapse onto the domain boundary; the constraint set "
                       "meets the domain only at its edge")
        return sol
    gap = abs(sol.primal_value - sol.dual_value)
    if gap > GAP_TOL * (1.0 + abs(sol.primal_value)):
        sol.status = Status.NUMERICAL_FAILURE
        sol.message = f"duality gap {gap:.3e} exceeds certificate tolerance"
    return sol


def duality_gap(problem, family, solution):
    family = _resolve_family(problem, family)
    p = primal_weights(problem, family, solution.lambda_hat)
    primal = float(np.sum(distance_terms(family, p, problem.q)))
    dual = dual_objective(problem, family, solution.lambda_hat)
    return abs(primal - dual)


def balance_residual(problem, p):
    """Scaled infinity-norm of ``A^T p - b``."""
    r = problem.residual(np.asarray(p, dtype=float))
    return float(np.max(np.abs(r)) / (1.0 + np.max(np.abs(problem.b), initial=0.0)))


def recover_weights(problem, family, solution, balance_tol=BALANCE_TOL):
    family = _resolve_family(problem, family)
    if not solution.converged:
        raise SolverError(
            f"cannot recover weights from a {solution.status.value} solve: {solution.message}",
            solution.status,
        )
    p = primal_weights(problem, family, solution.lambda_hat)
    interior = (p > family.lower) & (p < family.upper)
    if not np.all(interior):
        raise BalanceViolation("recovered weights touch the domain boundary")
    res = balance_residual(problem, p)
    if res > balance_tol:
        raise BalanceViolation(f"constraint residual {res:.3e} exceeds {balance_tol:g}")
    p.setflags(write=False)
    return WeightSet(p_hat=p, problem_digest=problem.digest(), family=family)


def fit_weights(problem, family=None, opts=None):
    """Solve and recover in one call; raises :class:`SolverError` on failure."""
    family = _resolve_family(problem, family)
    sol = solve_dual(problem, family, opts)
    return recover_weights(problem, family, sol), sol

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit

from bregbal.bregman import DistanceFamily
from bregbal.design import build_ate_problem, build_att_problem, build_icbps_problem, build_single_set_problem
from bregbal.errors import DegenerateDenominator, ExtremeProbability, LengthMismatch, RankDeficient
from bregbal.estimators import (
    CausalEstimate,
    LogisticFit,
    aipw_estimate,
    aipw_from_weights,
    fit_logistic_mle,
    fit_outcome,
    hajek_estimate,
    ht_estimate,
    ipw_se,
    ipw_weights,
    sandwich_se,
)
from bregbal.simulation import ScenarioConfig, generate_dataset
from bregbal.solver import fit_weights, primal_weights, solve_dual

from conftest import random_instance

S, U, B = DistanceFamily.SHIFTED, DistanceFamily.UNNORMALIZED, DistanceFamily.BINARY


def sim_data(rep=0, **kw):
    return generate_dataset(ScenarioConfig(**kw), rep)


# -- point estimators ------------------------------------------------------

def test_ht_examples():
    assert ht_estimate([1, 1], [1, 0], [3, 1]).tau_hat == 2.0
    assert ht_estimate([1, 1, 1, 3], [1, 1, 1, 0], [1, 2, 3, 2]).tau_hat == 0.0
    Z = np.array([1, 1, 0, 0.0])
    Y = np.array([4.0, 6.0, 1.0, 2.0])
    assert ht_estimate(np.ones(4), Z, Y).tau_hat == pytest.approx(5.0 - 1.5)


def test_ht_scale_invariance_and_errors():
    rng = np.random.default_rng(0)
    p, Y = rng.uniform(0.5, 2, 10), rng.normal(size=10)
    Z = np.r_[np.ones(5), np.zeros(5)]
    a = ht_estimate(p, Z, Y).tau_hat
    assert ht_estimate(3.7 * p, Z, Y).tau_hat == pytest.approx(a, rel=1e-14)
    with pytest.raises(DegenerateDenominator):
        ht_estimate(np.r_[np.zeros(5), np.ones(5)], Z, Y)
    with pytest.raises(LengthMismatch):
        ht_estimate(p[:3], Z, Y)


def test_hajek_matches_ht_under_intercept_balance():
    d = sim_data()
    w, _ = fit_weights(build_icbps_problem(d.C, d.Z))
    # arm totals agree up to the solver's balance tolerance
    assert hajek_estimate(w, d.Z, d.Y).tau_hat == pytest.approx(ht_estimate(w, d.Z, d.Y).tau_hat,
                                                                rel=1e-7)


def test_causal_estimate_ci():
    est = CausalEstimate.with_se(1.0, "ate", 10, 0.5)
    assert est.ci_lower <= est.tau_hat <= est.ci_upper
    assert est.ci_upper - est.tau_hat == pytest.approx(1.959963984540054 * 0.5)
    assert "std_err" not in est.to_dict(include_se=False)
    assert CausalEstimate.with_se(1.0, "ate", 10, None).std_err is None


# -- logistic regression ---------------------------------------------------

def test_logistic_intercept_only_is_logit_of_share():
    Z = np.r_[np.ones(7), np.zeros(13)]
    fit = fit_logistic_mle(np.ones((20, 1)), Z)
    assert fit.converged
    assert fit.coefficients[0] == pytest.approx(np.log(7 / 13), abs=1e-12)


def test_logistic_against_generic_optimizer():
    rng = np.random.default_rng(1)
    C, Z = random_instance(rng, 60, 4)
    fit = fit_logistic_mle(C, Z)

    def nll(beta):
        eta = C @ beta
        return np.sum(np.logaddexp(0, eta) - Z * eta)

    def grad(beta):
        return C.T @ (expit(C @ beta) - Z)

    oracle = minimize(nll, np.zeros(4), jac=grad, method="BFGS", options={"gtol": 1e-12})
    np.testing.assert_allclose(fit.coefficients, oracle.x, atol=1e-6)
    np.testing.assert_allclose(fit.fitted_probs, expit(C @ fit.coefficients))


def test_logistic_separation_flagged():
    x = np.r_[np.linspace(1, 2, 6), np.linspace(3, 4, 6)]
    fit = fit_logistic_mle(np.c_[np.ones(12), x], np.r_[np.ones(6), np.zeros(6)])
    assert not fit.converged


def test_logistic_rank_deficient():
    x = np.arange(10.0)
    with pytest.raises(RankDeficient):
        fit_logistic_mle(np.c_[np.ones(10), x, 2 * x], np.r_[np.ones(5), np.zeros(5)])


def test_ipw_weights_formulas():
    fit = LogisticFit(np.zeros(1), np.full(4, 0.5), True, 0)
    np.testing.assert_array_equal(ipw_weights(fit, [1, 0, 1, 0], "ate").p_hat, [2, 2, 2, 2])
    fit = LogisticFit(np.zeros(1), np.array([0.5, 0.75]), True, 0)
    np.testing.assert_allclose(ipw_weights(fit, [1, 0], "att").p_hat, [1.0, 3.0])
    with pytest.raises(ExtremeProbability):
        ipw_weights(LogisticFit(np.zeros(1), np.array([0.5, 1e-14]), True, 0), [1, 0])


def test_ipw_does_not_balance_exactly():
    d = sim_data()
    p = ipw_weights(fit_logistic_mle(d.C, d.Z), d.Z).p_hat
    prob = build_single_set_problem(d.C, d.Z)
    assert np.max(np.abs(prob.residual(p))) > 1e-3


# -- outcome regression and AIPW ------------------------------------------

def test_outcome_fit_normal_equations():
    d = sim_data()
    fit = fit_outcome(d.C, d.Z, d.Y)
    for arm, beta in ((0, fit.beta0), (1, fit.beta1)):
        Ca, Ya = d.C[d.Z == arm], d.Y[d.Z == arm]
        lhs = Ca.T @ Ca @ beta
        np.testing.assert_allclose(lhs, Ca.T @ Ya, rtol=1e-8)


def test_aipw_noiseless_linear_outcome_exact():
    rng = np.random.default_rng(2)
    C, Z = random_instance(rng, 80, 4)
    Y = C @ np.array([1.0, 2.0, -1.0, 0.5]) + Z * (3.0 + C[:, 1])
    fit = fit_logistic_mle(C, Z)
    est = aipw_estimate(fit, fit_outcome(C, Z, Y), C, Z, Y)
    assert est.tau_hat == pytest.approx(3.0 + C[:, 1].mean(), abs=1e-10)


def test_aipw_constant_propensity_reduces_to_imputation():
    rng = np.random.default_rng(3)
    C, Z = random_instance(rng, 50, 3)
    Y = rng.normal(size=50) + Z
    out = fit_outcome(C, Z, Y)
    const = LogisticFit(np.zeros(3), np.full(50, 0.37), True, 0)
    est = aipw_estimate(const, out, C, Z, Y)
    assert est.tau_hat == pytest.approx(np.mean(out.mu1(C) - out.mu0(C)), abs=1e-12)


def test_aipw_with_se():
    d = sim_data()
    fit = fit_logistic_mle(d.C, d.Z)
    est = aipw_estimate(fit, fit_outcome(d.C, d.Z, d.Y), d.C, d.Z, d.Y, with_se=True)
    assert est.std_err > 0 and est.ci_lower < est.tau_hat < est.ci_upper


@pytest.mark.parametrize("builder,family", [(build_icbps_problem, S),
                                            (build_ate_problem, U)])
def test_balancing_weights_equal_augmented_estimator(builder, family):
    rng = np.random.default_rng(4)
    for _ in range(5):
        C, Z = random_instance(rng, 120, 4)
        Y = 5 + C @ rng.normal(size=4) + 2 * Z + rng.normal(size=120)
        kw = {"q": 1.0} if family is U else {}
        w, _ = fit_weights(builder(C, Z, family=family, **kw), family)
        aug = aipw_from_weights(w, fit_outcome(C, Z, Y), C, Z, Y)
        assert ht_estimate(w, Z, Y).tau_hat == pytest.approx(aug, abs=1e-8)


# -- sandwich standard errors ---------------------------------------------

def numeric_sandwich(G, theta, idx):
    """Generic M-estimation variance with a finite-difference bread."""
    Gi = G(theta)
    k = len(theta)
    bread = np.empty((k, k))
    for j in range(k):
        h = 1e-6 * max(1.0, abs(theta[j]))
        e = np.zeros(k)
        e[j] = h
        bread[:, j] = (G(theta + e).sum(axis=0) - G(theta - e).sum(axis=0)) / (2 * h)
    meat = Gi.T @ Gi
    binv = np.linalg.inv(bread)
    V = binv @ meat @ binv.T
    return np.sqrt(idx @ V @ idx)


@pytest.mark.parametrize("builder,family", [(build_icbps_problem, S),
                                            (build_single_set_problem, S),
                                            (build_single_set_problem, B),
                                            (build_att_problem, U)])
def test_sandwich_se_matches_numeric_m_estimation(builder, family):
    d = sim_data(rep=3, outcome_scenario="b")
    prob = builder(d.C, d.Z, family=family)
    sol = solve_dual(prob, family)
    assert sol.converged
    tau = ht_estimate(primal_weights(prob, family, sol.lambda_hat), d.Z, d.Y).tau_hat
    K = prob.K

    def G(theta):
        lam, t = theta[:K], theta[K]
        p = primal_weights(prob, family, lam)
        zeta = prob.A * p[:, None] - prob.b_units
        psi = (2 * d.Z - 1) * p * d.Y - t * p * d.Z
        return np.column_stack([zeta, psi])

    idx = np.zeros(K + 1)
    idx[-1] = 1.0
    oracle = numeric_sandwich(G, np.r_[sol.lambda_hat, tau], idx)
    assert sandwich_se(prob, family, sol, d.Y) == pytest.approx(oracle, rel=1e-5)


@pytest.mark.parametrize("estimand", ["ate", "att"])
def test_ipw_se_matches_numeric_m_estimation(estimand):
    d = sim_data(rep=5)
    C, Z, Y = d.C, d.Z, d.Y
    fit = fit_logistic_mle(C, Z)
    p = ipw_weights(fit, Z, estimand).p_hat
    m1 = np.sum(Z * p * Y) / np.sum(Z * p)
    m0 = np.sum((1 - Z) * p * Y) / np.sum((1 - Z) * p)
    m = C.shape[1]

    def G(theta):
        beta, a1, a0 = theta[:m], theta[m], theta[m + 1]
        pi = expit(C @ beta)
        if estimand == "att":
            w = np.where(Z == 1, 1.0, pi / (1 - pi))
        else:
            w = np.where(Z == 1, 1 / pi, 1 / (1 - pi))
        return np.column_stack([C * (Z - pi)[:, None], Z * w * (Y - a1), (1 - Z) * w * (Y - a0)])

    idx = np.zeros(m + 2)
    idx[m], idx[m + 1] = 1.0, -1.0
    oracle = numeric_sandwich(G, np.r_[fit.coefficients, m1, m0], idx)
    assert ipw_se(fit, C, Z, Y, estimand) == pytest.approx(oracle, rel=1e-5)


def test_sandwich_se_vanishes_without_noise():
    ses = []
    for n in (200, 800):
        rng = np.random.default_rng(n)
        C, Z = random_instance(rng, n, 3)
        Y = 10 + C @ np.array([1.0, 2.0, -1.0]) + 4 * Z
        prob = build_icbps_problem(C, Z)
        sol = solve_dual(prob)
        ses.append(sandwich_se(prob, S, sol, Y))
    assert max(ses) < 1e-8
    noisy = []
    for n in (200, 2000):
        rng = np.random.default_rng(n + 1)
        C, Z = random_instance(rng, n, 3)
        Y = 10 + C @ np.array([1.0, 2.0, -1.0]) + 4 * Z + 0.1 * rng.normal(size=n)
        prob = build_icbps_problem(C, Z)
        noisy.append(sandwich_se(prob, S, solve_dual(prob), Y))
    assert 0 < noisy[1] < noisy[0]

"""Balancing weights for causal effect estimation as Bregman projections."""

from .bregman import DistanceFamily, distance, project
from .design import (
    BalanceProblem,
    Dataset,
    Estimand,
    build_balance_functions,
    build_problem,
)
from .diagnostics import balance_report, effective_sample_size, weighted_smd
from .estimators import (
    CausalEstimate,
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
from .simulation import ScenarioConfig, generate_dataset, run_study
from .solver import DualSolution, SolverOptions, Status, fit_weights, recover_weights, solve_dual

__version__ = "0.1.0"

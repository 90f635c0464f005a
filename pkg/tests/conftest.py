import numpy as np
import pytest

from bregbal.bregman import DistanceFamily

FAMILIES = list(DistanceFamily)


def random_instance(rng, n, m, shift=0.0):
    """Intercept plus ``m - 1`` Gaussian covariates with logistic treatment."""
    X = rng.standard_normal((n, m - 1))
    C = np.column_stack([np.ones(n), X])
    eta = 0.4 * X.sum(axis=1) if m > 1 else np.zeros(n)
    Z = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta - shift))).astype(float)
    # keep both arms large enough for any builder
    while Z.sum() < m + 2 or (n - Z.sum()) < m + 2:
        Z = (rng.random(n) < 0.5).astype(float)
    return C, Z


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    line = f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])

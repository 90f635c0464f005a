"""Exception types raised across the package."""


class BregbalError(Exception):
    """Base class for all package errors."""


class DomainError(BregbalError, ValueError):
    """A weight lies outside the domain of the chosen generator."""


class LengthMismatch(BregbalError, ValueError):
    pass


class OverflowGuard(BregbalError, FloatingPointError):
    """Linear predictor magnitude exceeds the exponentiation clamp."""


class RankDeficient(BregbalError, ValueError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class InsufficientData(BregbalError, ValueError):
    pass


class UnsupportedConfig(BregbalError, ValueError):
    pass


class SolverError(BregbalError, RuntimeError):
    """Raised when weights are requested from a solve that did not converge."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class BalanceViolation(BregbalError, RuntimeError):
    pass


class DegenerateDenominator(BregbalError, ZeroDivisionError):
    pass


class SingularBread(BregbalError, ArithmeticError):
    pass


class ExtremeProbability(BregbalError, ValueError):
    pass


class ZeroVariance(BregbalError, ValueError):
    pass


class DegenerateArm(BregbalError, ValueError):
    pass

"""Separable Bregman distance families and their generalized projections.

Each family is defined by a strictly convex generator ``f`` acting
coordinatewise on a domain contained in ``[0, inf)``:

=============  ============================================  ===========
family         generator f(p)                                domain
=============  ============================================  ===========
UNNORMALIZED   p log p                                       [0, inf)
SHIFTED        (p - 1) log(p - 1)                            [1, inf)
BINARY         p log p + (1 - p) log(1 - p)                  [0, 1]
=============  ============================================  ===========

The projection ``project(family, q, eta)`` evaluates
``(grad f)^{-1}(grad f(q) - eta)`` in closed form.  All functions accept
scalars or numpy arrays and are pure.
"""

from __future__ import annotations

import enum

import numpy as np
from scipy.special import expit, logit, rel_entr, xlogy

from .errors import DomainError, LengthMismatch, OverflowGuard

ETA_CLAMP = 500.0


class DistanceFamily(str, enum.Enum):
    UNNORMALIZED = "entropy"
    SHIFTED = "shifted"
    BINARY = "binary"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {
            "entropy": cls.UNNORMALIZED,
            "unnormalized": cls.UNNORMALIZED,
            "unnormalizedrelativeentropy": cls.UNNORMALIZED,
            "shifted": cls.SHIFTED,
            "shiftedrelativeentropy": cls.SHIFTED,
            "binary": cls.BINARY,
            "binaryrelativeentropy": cls.BINARY,
        }
        try:
            return aliases[key.replace("_", "").replace("-", "")]
        except KeyError:
            raise ValueError(f"unknown distance family {value!r}") from None

    @property
    def lower(self):
        return 1.0 if self is DistanceFamily.SHIFTED else 0.0

    @property
    def upper(self):
        return 1.0 if self is DistanceFamily.BINARY else np.inf

    @property
    def default_q(self):
        """Uniform sampling weight used when none is supplied."""
        return {
            DistanceFamily.UNNORMALIZED: 1.0,
            DistanceFamily.SHIFTED: 2.0,
            DistanceFamily.BINARY: 0.5,
        }[self]


def _as_float(x):
    return np.asarray(x, dtype=float)


def check_closed_domain(family, p, name="p"):
    p = _as_float(p)
    bad = ~np.isfinite(p) | (p < family.lower) | (p > family.upper)
    if np.any(bad):
        raise DomainError(
            f"{name} outside closed domain [{family.lower}, {family.upper}] "
            f"of {family.name} at index {np.flatnonzero(np.atleast_1d(bad))[:5].tolist()}"
        )
    return p


def check_open_domain(family, q, name="q"):
    q = _as_float(q)
    bad = ~np.isfinite(q) | (q <= family.lower) | (q >= family.upper)
    if np.any(bad):
        raise DomainError(
            f"{name} must lie strictly inside ({family.lower}, {family.upper}) "
            f"for {family.name}; offending index {np.flatnonzero(np.atleast_1d(bad))[:5].tolist()}"
        )
    return q


def generator_value(family, p):
    """Evaluate ``f(p)`` with the ``0 log 0 = 0`` convention at boundaries."""
    family = DistanceFamily.parse(family)
    p = check_closed_domain(family, p)
    if family is DistanceFamily.UNNORMALIZED:
        return xlogy(p, p)
    if family is DistanceFamily.SHIFTED:
        s = p - 1.0
        return xlogy(s, s)
    return xlogy(p, p) + xlogy(1.0 - p, 1.0 - p)


def generator_grad(family, p):
    family = DistanceFamily.parse(family)
    p = check_open_domain(family, p, "p")
    if family is DistanceFamily.UNNORMALIZED:
        return np.log(p) + 1.0
    if family is DistanceFamily.SHIFTED:
        return np.log(p - 1.0) + 1.0
    return logit(p)


def generator_inv_grad(family, v):
    family = DistanceFamily.parse(family)
    v = _as_float(v)
    if family is DistanceFamily.UNNORMALIZED:
        return np.exp(v - 1.0)
    if family is DistanceFamily.SHIFTED:
        return 1.0 + np.exp(v - 1.0)
    return expit(v)


def distance(family, p, q):
    """Sum of coordinatewise Bregman distances ``D_f(p || q)``."""
    family = DistanceFamily.parse(family)
    p = np.atleast_1d(check_closed_domain(family, p))
    q = np.atleast_1d(check_open_domain(family, q))
    if p.shape != q.shape:
        raise LengthMismatch(f"p has shape {p.shape} but q has shape {q.shape}")
    return float(np.sum(distance_terms(family, p, q)))


def distance_terms(family, p, q):
    """Per-coordinate distances without domain checks (hot path)."""
    if family is DistanceFamily.UNNORMALIZED:
        return rel_entr(p, q) - p + q
    if family is DistanceFamily.SHIFTED:
        # rel_entr handles the p == 1 boundary as 0 log 0
        return rel_entr(p - 1.0, q - 1.0) - (p - 1.0) + (q - 1.0)
    return rel_entr(p, q) + rel_entr(1.0 - p, 1.0 - q)


def distance_from_generator(f, grad_f, p, q):
    """Generic ``sum f(p) - f(q) - f'(q)(p - q)`` for any separable generator."""
    p = _as_float(p)
    q = _as_float(q)
    if p.shape != q.shape:
        raise LengthMismatch(f"p has shape {p.shape} but q has shape {q.shape}")
    return float(np.sum(f(p) - f(q) - grad_f(q) * (p - q)))


def clamp_eta(eta):
    eta = _as_float(eta)
    return np.clip(eta, -ETA_CLAMP, ETA_CLAMP)


def project(family, q, eta, *, on_clamp="clip"):
    """Generalized projection ``(grad f)^{-1}(grad f(q) - eta)``.

    ``eta`` is the unit's dual linear predictor (a row of ``A @ lam``).
    Predictors beyond ``+-ETA_CLAMP`` are clipped before exponentiation;
    pass ``on_clamp="raise"`` to get :class:`OverflowGuard` instead.
    """
    family = DistanceFamily.parse(family)
    q = check_open_domain(family, q)
    eta = _as_float(eta)
    if not np.all(np.isfinite(eta)):
        raise DomainError("eta must be finite")
    if on_clamp == "raise" and np.any(np.abs(eta) > ETA_CLAMP):
        raise OverflowGuard(f"|eta| exceeds clamp {ETA_CLAMP}")
    return _project(family, q, clamp_eta(eta))


def _project(family, q, eta):
    if family is DistanceFamily.UNNORMALIZED:
        return q * np.exp(-eta)
    if family is DistanceFamily.SHIFTED:
        return 1.0 + (q - 1.0) * np.exp(-eta)
    return expit(logit(q) - eta)


def project_derivative(family, q, eta):
    """``d project / d eta`` evaluated at (q, eta); always negative."""
    family = DistanceFamily.parse(family)
    eta = clamp_eta(eta)
    q = _as_float(q)
    if family is DistanceFamily.UNNORMALIZED:
        return -q * np.exp(-eta)
    if family is DistanceFamily.SHIFTED:
        return -(q - 1.0) * np.exp(-eta)
    x = logit(q) - eta
    return -expit(x) * expit(-x)

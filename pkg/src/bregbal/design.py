"""Balance functions and constraint systems ``A^T p = b`` for each estimand."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr

from .bregman import DistanceFamily, check_open_domain
from .errors import (
    DegenerateArm,
    InsufficientData,
    LengthMismatch,
    RankDeficient,
    UnsupportedConfig,
)


class Estimand(str, enum.Enum):
    ATE = "ate"
    ATT = "att"
    OWATE_SINGLE = "owate"
    ICBPS = "icbps"
    CALIBRATION = "calibration"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        if key in ("owate_single", "single", "cbps"):
            return cls.OWATE_SINGLE
        return cls(key)


@dataclass
class Dataset:
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray | None = None
    q: np.ndarray | None = None
    column_names: list[str] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.Z = check_treatment(self.Z)
        n = self.X.shape[0]
        if self.Z.shape[0] != n:
            raise LengthMismatch(f"X has {n} rows but Z has {self.Z.shape[0]}")
        if self.Y is not None:
            self.Y = np.asarray(self.Y, dtype=float)
            if self.Y.shape != (n,):
                raise LengthMismatch(f"Y must have shape ({n},)")
        if self.q is not None:
            self.q = np.broadcast_to(np.asarray(self.q, dtype=float), (n,)).copy()
        if self.column_names is None:
            self.column_names = [f"x{j + 1}" for j in range(self.X.shape[1])]
        if n < 2:
            raise InsufficientData("need at least two units")


def check_treatment(Z):
    Z = np.asarray(Z)
    if Z.ndim != 1:
        raise ValueError("treatment must be a vector")
    if not np.all((Z == 0) | (Z == 1)):
        bad = np.flatnonzero(~((Z == 0) | (Z == 1)))
        raise ValueError(f"treatment must be 0/1; bad rows {bad[:5].tolist()}")
    Z = Z.astype(float)
    if Z.sum() == 0 or Z.sum() == Z.size:
        raise DegenerateArm("both treatment arms must be non-empty")
    return Z


@dataclass(frozen=True)
class BalanceFunctions:
    C: np.ndarray
    column_names: tuple[str, ...]

    @property
    def n(self):
        return self.C.shape[0]

    @property
    def m(self):
        return self.C.shape[1]


def check_rank(C, names):
    """Raise :class:`RankDeficient` naming the columns QR pivoting drops."""
    if C.shape[1] == 0:
        return
    _, R, piv = qr(C, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = 1e-10 * np.linalg.norm(C)
    rank = int(np.sum(diag > tol))
    if rank < C.shape[1]:
        dropped = [names[k] for k in piv[rank:]]
        raise RankDeficient(
            f"balance functions are collinear; dependent columns: {dropped}", dropped
        )


def build_balance_functions(data, columns=None, standardize=False, ddof=1,
                            intercept=True):
    """Select covariate columns and prepend the intercept balance function.

    ``standardize`` centres and scales the non-intercept columns using the
    sample standard deviation with ``ddof`` degrees of freedom removed.
    """
    names = list(data.column_names)
    if columns is None:
        idx = list(range(data.X.shape[1]))
    else:
        idx = []
        for col in columns:
            if isinstance(col, (int, np.integer)):
                idx.append(int(col))
            elif col in names:
                idx.append(names.index(col))
            else:
                raise KeyError(f"balance column {col!r} not found")
    X = data.X[:, idx].copy()
    sel = [names[k] for k in idx]
    if not np.all(np.isfinite(X)):
        raise ValueError("balance columns contain missing or non-finite values")
    if standardize and X.shape[1]:
        sd = X.std(axis=0, ddof=ddof)
        const = sd == 0
        if np.any(const):
            raise RankDeficient(
                "cannot standardize constant columns",
                [sel[k] for k in np.flatnonzero(const)],
            )
        X = (X - X.mean(axis=0)) / sd
    if intercept:
        C = np.column_stack([np.ones(X.shape[0]), X])
        sel = ["(intercept)"] + sel
    else:
        C = X
    n, m = C.shape
    if n <= m:
        raise InsufficientData(f"need more units than balance functions (n={n}, m={m})")
    check_rank(C, sel)
    C.setflags(write=False)
    return BalanceFunctions(C=C, column_names=tuple(sel))


@dataclass(frozen=True)
class BalanceProblem:
    """Constraint system ``A^T p = b`` together with the sampling weights.

    ``b_units`` holds each unit's additive contribution to ``b`` (its rows
    sum to ``b``); the sandwich variance needs the per-unit split.
    """

    A: np.ndarray
    b: np.ndarray
    q: np.ndarray
    Z: np.ndarray
    estimand: Estimand
    family_default: DistanceFamily
    b_units: np.ndarray
    constraint_names: tuple[str, ...] = field(default=())

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def K(self):
        return self.A.shape[1]

    def digest(self):
        h = hashlib.sha256()
        for arr in (self.A, self.b, self.q, self.Z):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        h.update(self.estimand.value.encode())
        return h.hexdigest()

    def residual(self, p):
        return self.A.T @ p - self.b


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


def _prepare(C, Z, q, family):
    if isinstance(C, BalanceFunctions):
        names = C.column_names
        C = C.C
    else:
        C = np.asarray(C, dtype=float)
        if C.ndim == 1:
            C = C[:, None]
        names = tuple(f"c{j + 1}" for j in range(C.shape[1]))
    Z = check_treatment(Z)
    n = C.shape[0]
    if Z.shape[0] != n:
        raise LengthMismatch(f"C has {n} rows but Z has {Z.shape[0]}")
    family = DistanceFamily.parse(family)
    if q is None:
        q = family.default_q
    q = np.broadcast_to(np.asarray(q, dtype=float), (n,)).copy()
    check_open_domain(family, q, "sampling weights q")
    return C, Z, q, family, names


def _make(A, b_units, q, Z, estimand, family, names):
    if A.shape[0] < A.shape[1]:
        raise InsufficientData(f"need at least as many units as constraints (n={A.shape[0]}, K={A.shape[1]})")
    check_rank(A, names)
    return BalanceProblem(
        A=_frozen(A),
        b=_frozen(b_units.sum(axis=0)),
        q=_frozen(q),
        Z=_frozen(Z),
        estimand=estimand,
        family_default=family,
        b_units=_frozen(b_units),
        constraint_names=tuple(names),
    )


def build_ate_problem(C, Z, q=None, family=DistanceFamily.SHIFTED):
    """Two-set ATE design: arm balance plus treated arm matching ``sum q c``."""
    C, Z, q, family, names = _prepare(C, Z, q, family)
    s = (2.0 * Z - 1.0)[:, None]
    A = np.hstack([s * C, Z[:, None] * C])
    b_units = np.hstack([np.zeros_like(C), q[:, None] * C])
    labels = [f"diff:{c}" for c in names] + [f"treated:{c}" for c in names]
    return _make(A, b_units, q, Z, Estimand.ATE, family, labels)


def build_att_problem(C, Z, q=None, family=DistanceFamily.UNNORMALIZED):
    """Controls reweighted to the ``q``-weighted treated moments."""
    C, Z, q, family, names = _prepare(C, Z, q, family)
    A = (1.0 - Z)[:, None] * C
    b_units = (q * Z)[:, None] * C
    labels = [f"control:{c}" for c in names]
    return _make(A, b_units, q, Z, Estimand.ATT, family, labels)


def build_single_set_problem(C, Z, q=None, family=DistanceFamily.SHIFTED):
    """Arm-balance constraints only, ``sum p (2Z - 1) c = 0``."""
    C, Z, q, family, names = _prepare(C, Z, q, family)
    A = (2.0 * Z - 1.0)[:, None] * C
    labels = [f"diff:{c}" for c in names]
    return _make(A, np.zeros_like(C), q, Z, Estimand.OWATE_SINGLE, family, labels)


def build_icbps_problem(C, Z, q=None, family=DistanceFamily.SHIFTED):
    """As the ATE design but with unweighted targets ``sum c`` for the treated block."""
    C, Z, q, family, names = _prepare(C, Z, q, family)
    s = (2.0 * Z - 1.0)[:, None]
    A = np.hstack([s * C, Z[:, None] * C])
    b_units = np.hstack([np.zeros_like(C), C])
    labels = [f"diff:{c}" for c in names] + [f"treated:{c}" for c in names]
    return _make(A, b_units, q, Z, Estimand.ICBPS, family, labels)


def build_calibration_problem(C, Z, q=None, family=DistanceFamily.UNNORMALIZED):
    """Three-way calibration: each arm matched to the full-sample sums."""
    C, Z, q, family, names = _prepare(C, Z, q, family)
    if not np.all(q == q[0]):
        raise UnsupportedConfig("calibration design requires uniform sampling weights")
    A = np.hstack([(1.0 - Z)[:, None] * C, Z[:, None] * C])
    b_units = np.hstack([C, C])
    labels = [f"control:{c}" for c in names] + [f"treated:{c}" for c in names]
    return _make(A, b_units, q, Z, Estimand.CALIBRATION, family, labels)


BUILDERS = {
    Estimand.ATE: build_ate_problem,
    Estimand.ATT: build_att_problem,
    Estimand.OWATE_SINGLE: build_single_set_problem,
    Estimand.ICBPS: build_icbps_problem,
    Estimand.CALIBRATION: build_calibration_problem,
}


def build_problem(estimand, C, Z, q=None, family=None):
    estimand = Estimand.parse(estimand)
    builder = BUILDERS[estimand]
    if family is None:
        return builder(C, Z, q)
    return builder(C, Z, q, family=family)


def paired_sampling_weights(Z, q_treated):
    """Arm-specific weights with ``q(1) - 1 = 1 / (q(0) - 1)``.

    Keeps the logistic reading of shifted-entropy weights symmetric between
    arms when the treated sampling weight differs from 2.
    """
    Z = np.asarray(Z, dtype=float)
    if q_treated <= 1:
        raise ValueError("q_treated must exceed 1")
    q_control = 1.0 + 1.0 / (q_treated - 1.0)
    return np.where(Z == 1, q_treated, q_control)

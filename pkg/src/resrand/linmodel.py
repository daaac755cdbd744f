"""Least-squares fits, restricted fits and the contrast statistic.

The model is ``y = X beta + eps`` and hypotheses are single linear contrasts
``a' beta = a0``.  The observed statistic is ``sqrt(n) (a' beta_hat - a0)`` and
the randomization functional is ``t(u) = sqrt(n) a' (X'X)^{-1} X' u``, stored
as the weight vector ``v = sqrt(n) X (X'X)^{-1} a`` so that ``t(u) = v @ u``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg as sla
from scipy import stats

from .errors import DegenerateConstraint, InputError, SingularDesign

#: Largest admissible condition number of X'X on the standard path.
CONDITION_BOUND = 1e12


def _frozen(a, dtype=float):
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def normalize_labels(labels) -> np.ndarray:
    """Map arbitrary labels to contiguous integers in order of first appearance."""
    labels = list(labels)
    mapping: dict = {}
    out = np.empty(len(labels), dtype=np.intp)
    for i, lab in enumerate(labels):
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


@dataclass(frozen=True)
class Dataset:
    """Response, design and optional grouping structure.

    ``X`` is used as given; no intercept column is ever added here.
    One-way cluster labels must already be contiguous integers ``0..J-1``
    (see :func:`normalize_labels`).  Row and column labels are nonnegative
    integers; dyadic data number rows and columns from one set of nodes.
    """

    y: np.ndarray
    X: np.ndarray
    cluster: Optional[np.ndarray] = None
    row_cluster: Optional[np.ndarray] = None
    col_cluster: Optional[np.ndarray] = None
    time: Optional[np.ndarray] = None
    names: tuple = field(default=())

    def __post_init__(self):
        y = _frozen(self.y)
        X = _frozen(self.X)
        if X.ndim == 1:
            X = _frozen(X[:, None])
        if y.ndim != 1:
            raise InputError("y must be one-dimensional")
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise InputError(f"X has shape {X.shape}, expected ({y.shape[0]}, p)")
        if X.shape[1] < 1:
            raise InputError("X needs at least one column")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise InputError("y and X must be finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        for name in ("cluster", "row_cluster", "col_cluster"):
            lab = getattr(self, name)
            if lab is None:
                continue
            lab = _frozen(lab, dtype=np.intp)
            if lab.shape != y.shape:
                raise InputError(f"{name} has length {lab.size}, expected {y.size}")
            if lab.min() < 0:
                raise InputError(f"{name} labels must be nonnegative")
            # Row and column labels of dyadic data share one node numbering,
            # so only one-way cluster labels must be contiguous.
            if name == "cluster" and np.unique(lab).size != lab.max() + 1:
                raise InputError(f"{name} labels must be contiguous integers 0..J-1")
            object.__setattr__(self, name, lab)
        if self.time is not None:
            t = _frozen(self.time, dtype=np.int64)
            if t.shape != y.shape:
                raise InputError(f"time has length {t.size}, expected {y.size}")
            if np.any(np.diff(t) <= 0):
                raise InputError("time index must be strictly increasing")
            object.__setattr__(self, "time", t)
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def scale(self) -> float:
        """``max(1, max|X|, max|y|)``, used to make tolerances unit-free."""
        return float(max(1.0, np.abs(self.X).max(), np.abs(self.y).max()))


@dataclass(frozen=True)
class LinearHypothesis:
    """``H0: a' beta = a0``."""

    a: np.ndarray
    a0: float = 0.0

    def __post_init__(self):
        a = _frozen(np.atleast_1d(self.a))
        if a.ndim != 1 or not np.any(a != 0):
            raise InputError("contrast vector a must be a nonzero vector")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "a0", float(self.a0))

    @classmethod
    def coefficient(cls, p: int, j: int, value: float = 0.0) -> "LinearHypothesis":
        a = np.zeros(p)
        a[j] = 1.0
        return cls(a, value)

    def check(self, p: int) -> None:
        if self.a.size != p:
            raise InputError(f"contrast has length {self.a.size}, design has {p} columns")


@dataclass(frozen=True)
class FitResult:
    beta_hat: np.ndarray
    residuals: np.ndarray
    gram_inverse: np.ndarray


@dataclass(frozen=True)
class ConstrainedFit:
    beta_restricted: np.ndarray
    restricted_residuals: np.ndarray


@dataclass(frozen=True)
class StatFunctional:
    """``t(u) = weight @ u``."""

    weight: np.ndarray

    def __call__(self, u):
        return np.asarray(u) @ self.weight


class _Gram:
    """QR-based factorization of the design with a condition guard."""

    def __init__(self, X: np.ndarray):
        n, p = X.shape
        if n <= p:
            raise SingularDesign(f"need n > p for least squares, got n={n}, p={p}")
        Q, R = np.linalg.qr(X, mode="reduced")
        diag = np.abs(np.diag(R))
        if diag.min() == 0.0:
            raise SingularDesign("design matrix is rank deficient")
        cond = np.linalg.cond(R) ** 2
        if not np.isfinite(cond) or cond > CONDITION_BOUND:
            raise SingularDesign(f"X'X condition number {cond:.3g} exceeds {CONDITION_BOUND:.0e}")
        self.Q = Q
        self.R = R

    def solve(self, b):
        """``(X'X)^{-1} b``."""
        z = sla.solve_triangular(self.R, b, trans="T")
        return sla.solve_triangular(self.R, z)

    def inverse(self):
        Rinv = sla.solve_triangular(self.R, np.eye(self.R.shape[0]))
        return Rinv @ Rinv.T


def fit_ols(d: Dataset) -> FitResult:
    g = _Gram(d.X)
    beta = sla.solve_triangular(g.R, g.Q.T @ d.y)
    resid = d.y - d.X @ beta
    return FitResult(_frozen(beta), _frozen(resid), _frozen(g.inverse()))


def _constrain(beta_hat, gram_inv, h: LinearHypothesis):
    w = gram_inv @ h.a
    denom = float(h.a @ w)
    if not denom > 1e-14 * float(h.a @ h.a) * max(1.0, np.abs(gram_inv).max()):
        raise DegenerateConstraint(f"a'(X'X)^-1 a = {denom:.3g} is not positive")
    return beta_hat - w * ((h.a @ beta_hat - h.a0) / denom)


def fit_constrained_ols(d: Dataset, h: LinearHypothesis, fit: FitResult | None = None) -> ConstrainedFit:
    """Least squares subject to ``a' beta = a0`` via the single-constraint projection."""
    h.check(d.p)
    if fit is None:
        fit = fit_ols(d)
    beta0 = _constrain(fit.beta_hat, fit.gram_inverse, h)
    # Re-impose the constraint exactly; the projection leaves O(eps) slack.
    slack = h.a @ beta0 - h.a0
    beta0 = beta0 - h.a * (slack / (h.a @ h.a))
    return ConstrainedFit(_frozen(beta0), _frozen(d.y - d.X @ beta0))


def test_statistic(f: FitResult, h: LinearHypothesis) -> float:
    """``sqrt(n) (a' beta_hat - a0)``."""
    n = f.residuals.shape[0]
    return float(math.sqrt(n) * (h.a @ f.beta_hat - h.a0))


# Not a pytest test despite the name.
test_statistic.__test__ = False


def make_stat_functional(d: Dataset, h: LinearHypothesis) -> StatFunctional:
    h.check(d.p)
    g = _Gram(d.X)
    v = math.sqrt(d.n) * (d.X @ g.solve(h.a))
    return StatFunctional(_frozen(v))


@dataclass(frozen=True)
class WaldResult:
    z: float
    pvalue: float
    reject: bool


def classical_wald_test(d: Dataset, h: LinearHypothesis, alpha: float = 0.05) -> WaldResult:
    """Two-sided z-test with the homoskedastic OLS variance.

    Only meant as the naive baseline in simulation studies.
    """
    h.check(d.p)
    f = fit_ols(d)
    dof = d.n - d.p
    sigma2 = float(f.residuals @ f.residuals) / dof
    se = math.sqrt(sigma2 * float(h.a @ f.gram_inverse @ h.a))
    diff = float(h.a @ f.beta_hat - h.a0)
    if se == 0.0:
        z = 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    else:
        z = diff / se
    pval = float(2 * stats.norm.sf(abs(z)))
    return WaldResult(z, pval, pval <= alpha)

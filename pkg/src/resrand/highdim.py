"""Randomization tests for regression with more covariates than observations.

Ridge with penalty ``lam`` satisfies, under ``a' beta = a0``,

    a' b_ridge - a0 + lam a' P^{-1} beta = a' P^{-1} X' eps,    P = X'X + lam I.

The unknown bias term is replaced by a lasso plug-in, residuals come from the
lasso fit, and the right-hand side becomes the randomization functional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .engine import TestConfig, TestOutcome, _tie_tol, randomization_draws, randomization_test
from .errors import InputError, NoConvergence
from .linmodel import Dataset, LinearHypothesis
from .primitives import PrimitiveKind
from .rng import substream


@dataclass(frozen=True)
class PenaltyConfig:
    lambda_ridge: float = 1.0
    lambda_lasso: float = 0.1
    lasso_tol: float = 1e-7
    lasso_max_sweeps: int = 10_000

    def __post_init__(self):
        if not self.lambda_ridge > 0 or not self.lambda_lasso > 0:
            raise InputError("penalties must be positive")
        if not self.lasso_tol > 0:
            raise InputError("lasso_tol must be positive")
        if self.lasso_max_sweeps < 1:
            raise InputError("lasso_max_sweeps must be >= 1")


@dataclass(frozen=True)
class FamilyTestReport:
    per_coef_pvals: np.ndarray
    rejected: np.ndarray
    alpha_family: float
    statistics: np.ndarray

    def to_dict(self) -> dict:
        return {
            "alpha_family": self.alpha_family,
            "threshold": self.alpha_family / self.per_coef_pvals.size,
            "per_coef_pvals": self.per_coef_pvals.tolist(),
            "rejected": np.flatnonzero(self.rejected).tolist(),
        }


# ---------------------------------------------------------------- ridge


class RidgeSystem:
    """Factorization of ``P = X'X + lam I`` for repeated solves.

    Uses the ``p x p`` system when ``p <= n`` and the ``n x n`` kernel system
    ``K = XX' + lam I`` otherwise, via ``P^{-1} = (I - X' K^{-1} X) / lam``.
    """

    def __init__(self, X: np.ndarray, lam: float):
        if not lam > 0:
            raise InputError("ridge penalty must be positive")
        self.X = X
        self.lam = float(lam)
        n, p = X.shape
        self.dual = p > n
        if self.dual:
            self.factor = sla.cho_factor(X @ X.T + lam * np.eye(n))
        else:
            self.factor = sla.cho_factor(X.T @ X + lam * np.eye(p))

    def solve(self, b):
        """``P^{-1} b`` for a vector or matrix ``b`` with ``p`` rows."""
        if self.dual:
            return (b - self.X.T @ sla.cho_solve(self.factor, self.X @ b)) / self.lam
        return sla.cho_solve(self.factor, b)

    def x_solve(self):
        """``X P^{-1}`` as an ``n x p`` matrix."""
        if self.dual:
            return sla.cho_solve(self.factor, self.X)
        return sla.cho_solve(self.factor, self.X.T).T


def fit_ridge(d: Dataset, lam: float) -> np.ndarray:
    """``(X'X + lam I)^{-1} X' y``; the dual form is used when ``p > n``."""
    X = d.X
    n, p = X.shape
    if not lam > 0:
        raise InputError("ridge penalty must be positive")
    if p > n:
        alpha = sla.cho_solve(sla.cho_factor(X @ X.T + lam * np.eye(n)), d.y)
        return X.T @ alpha
    return sla.cho_solve(sla.cho_factor(X.T @ X + lam * np.eye(p)), X.T @ d.y)


# ---------------------------------------------------------------- lasso


def _soft(z, t):
    return math.copysign(max(abs(z) - t, 0.0), z)


def lasso_kkt_gap(gram, xty, beta, lam) -> float:
    """Largest violation of the lasso optimality conditions.

    ``gram = X'X/n`` and ``xty = X'y/n``.
    """
    z = xty - gram @ beta
    active = beta != 0
    gap_act = np.abs(z[active] - lam * np.sign(beta[active]))
    gap_in = np.maximum(np.abs(z[~active]) - lam, 0.0)
    return float(max(gap_act.max(initial=0.0), gap_in.max(initial=0.0)))


def _sweep(idx, beta, grad, diag, g_rows, lam) -> float:
    biggest = 0.0
    for j in idx:
        if diag[j] <= 0.0:
            continue
        old = beta[j]
        new = _soft(grad[j] + diag[j] * old, lam) / diag[j]
        if new != old:
            delta = new - old
            grad -= delta * g_rows[j]
            beta[j] = new
            biggest = max(biggest, abs(delta) * math.sqrt(diag[j]))
    return biggest


def _cd(gram, xty, lam, beta, tol, max_sweeps):
    """Cyclic coordinate descent on the covariance form, in place on ``beta``.

    Full sweeps alternate with sweeps over the current nonzero coordinates
    until those settle; convergence is confirmed by the KKT gap.
    """
    p = beta.size
    diag = np.diag(gram).copy()
    # grad = X'(y - X beta)/n, updated after each coordinate move
    grad = xty - gram @ beta
    g_rows = [gram[j] for j in range(p)]
    full = range(p)
    sweeps = 0
    while sweeps < max_sweeps:
        biggest = _sweep(full, beta, grad, diag, g_rows, lam)
        sweeps += 1
        if biggest > tol:
            active = np.flatnonzero(beta).tolist()
            while sweeps < max_sweeps and _sweep(active, beta, grad, diag, g_rows, lam) > tol:
                sweeps += 1
            continue
        gap = lasso_kkt_gap(gram, xty, beta, lam)
        if gap <= tol:
            return beta, sweeps
        grad = xty - gram @ beta
    gap = lasso_kkt_gap(gram, xty, beta, lam)
    if gap <= tol:
        return beta, max_sweeps
    raise NoConvergence(f"lasso did not reach KKT gap {tol:g} in {max_sweeps} sweeps (gap {gap:.3g})", gap)


def fit_lasso(d: Dataset, lam: float, cfg: PenaltyConfig | None = None, warm_start=None) -> np.ndarray:
    """Minimize ``(1/2n) ||y - X b||^2 + lam ||b||_1`` by coordinate descent.

    ``lam = 0`` is allowed and gives least squares when the design has full
    column rank.
    """
    cfg = cfg or PenaltyConfig()
    if lam < 0:
        raise InputError("lasso penalty must be nonnegative")
    n = d.n
    gram = d.X.T @ d.X / n
    xty = d.X.T @ d.y / n
    beta = np.zeros(d.p) if warm_start is None else np.array(warm_start, dtype=float)
    beta, _ = _cd(gram, xty, float(lam), beta, cfg.lasso_tol, cfg.lasso_max_sweeps)
    return beta


def lasso_lambda_max(d: Dataset) -> float:
    """Smallest penalty with an all-zero solution."""
    return float(np.max(np.abs(d.X.T @ d.y)) / d.n)


def lasso_path(d: Dataset, lambdas, cfg: PenaltyConfig | None = None) -> np.ndarray:
    """Solutions along a decreasing penalty sequence with warm starts; shape ``(len, p)``."""
    cfg = cfg or PenaltyConfig()
    lambdas = np.sort(np.asarray(lambdas, dtype=float))[::-1]
    gram = d.X.T @ d.X / d.n
    xty = d.X.T @ d.y / d.n
    beta = np.zeros(d.p)
    out = np.empty((lambdas.size, d.p))
    for i, lam in enumerate(lambdas):
        beta, _ = _cd(gram, xty, float(lam), beta, cfg.lasso_tol, cfg.lasso_max_sweeps)
        out[i] = beta
    return out


def scaled_lasso_sigma(d: Dataset, max_iter: int = 50, tol: float = 1e-4) -> float:
    """Noise level by alternating a lasso fit with ``sigma = ||y - X b|| / sqrt(n)``.

    The lasso penalty at each step is ``sigma * sqrt(2 log p / n)``, starting
    from the standard deviation of ``y``.
    """
    base = math.sqrt(2 * math.log(max(d.p, 2)) / d.n)
    gram = d.X.T @ d.X / d.n
    xty = d.X.T @ d.y / d.n
    sigma = float(np.std(d.y))
    if sigma == 0.0:
        return 0.0
    beta = np.zeros(d.p)
    for _ in range(max_iter):
        beta, _ = _cd(gram, xty, sigma * base, beta, 1e-6 * sigma, 10_000)
        new = float(np.linalg.norm(d.y - d.X @ beta) / math.sqrt(d.n))
        if abs(new - sigma) <= tol * sigma:
            return new
        sigma = new
    return sigma


def default_penalties(d: Dataset, lasso_factor: float = 2.0, ridge_factor: float = 1e-3) -> PenaltyConfig:
    """Data-driven penalties used when none are given.

    ``lambda_lasso = lasso_factor * sigma_hat * sqrt(2 log p / n)`` with
    ``sigma_hat`` from :func:`scaled_lasso_sigma`, and ``lambda_ridge`` is
    ``ridge_factor`` times the mean diagonal of ``X'X``.  A lasso penalty
    above the universal level keeps spurious selections among correlated
    covariates rare, which is what drives false rejections; a small ridge
    penalty keeps the randomization spread wide.
    """
    sigma = scaled_lasso_sigma(d)
    base = math.sqrt(2 * math.log(max(d.p, 2)) / d.n)
    lam_lasso = lasso_factor * sigma * base
    lam_ridge = ridge_factor * float(np.mean(np.sum(d.X * d.X, axis=0)))
    if not lam_lasso > 0:
        lam_lasso = 1e-12
    return PenaltyConfig(
        lambda_ridge=max(lam_ridge, 1e-12),
        lambda_lasso=lam_lasso,
        lasso_tol=max(1e-7, 1e-6 * lam_lasso),
    )


def cross_validated_penalties(d: Dataset, folds: int = 5, seed: int = 0, num_lambdas: int = 30) -> PenaltyConfig:
    """K-fold cross-validated penalties.

    A convenience for choosing ``lambda_lasso`` and ``lambda_ridge``; the test
    itself takes any positive penalties.
    """
    n = d.n
    if folds < 2 or folds > n:
        raise InputError(f"folds must lie in [2, n], got {folds}")
    rng = substream(seed, 0)
    fold_of = rng.permutation(np.arange(n) % folds)
    lmax = lasso_lambda_max(d)
    lasso_grid = lmax * np.logspace(0, -1.3, num_lambdas)
    scale = float(np.trace(d.X.T @ d.X)) / d.p
    ridge_grid = scale * np.logspace(-4, 1, num_lambdas)
    lasso_err = np.zeros(num_lambdas)
    ridge_err = np.zeros(num_lambdas)
    # Prediction error barely moves below this accuracy, and tight solves crawl on correlated designs.
    cfg = PenaltyConfig(lasso_tol=1e-4 * lmax)
    for k in range(folds):
        tr = fold_of != k
        te = ~tr
        dtr = Dataset(d.y[tr], d.X[tr])
        path = lasso_path(dtr, lasso_grid, cfg)
        lasso_err += np.sum((d.y[te, None] - d.X[te] @ path.T) ** 2, axis=0)
        for i, lam in enumerate(ridge_grid):
            b = fit_ridge(dtr, lam)
            ridge_err[i] += float(np.sum((d.y[te] - d.X[te] @ b) ** 2))
    return PenaltyConfig(
        lambda_ridge=float(ridge_grid[np.argmin(ridge_err)]),
        lambda_lasso=float(lasso_grid[np.argmin(lasso_err)]),
    )


# ---------------------------------------------------------------- tests


def _prepare(d: Dataset, pen: PenaltyConfig):
    lasso = fit_lasso(d, pen.lambda_lasso, pen)
    ridge = fit_ridge(d, pen.lambda_ridge)
    system = RidgeSystem(d.X, pen.lambda_ridge)
    resid = d.y - d.X @ lasso
    return lasso, ridge, system, resid


def run_highdim_test(
    d: Dataset, h: LinearHypothesis, pen: PenaltyConfig, kind: PrimitiveKind, cfg: TestConfig
) -> TestOutcome:
    """Test ``a' beta = a0`` with ``T = sqrt(n) (a' b_ridge - a0 + lam a' P^{-1} b_lasso)``.

    Draws are ``sqrt(n) a' P^{-1} X' (g e)`` with ``e`` the lasso residuals.
    """
    h.check(d.p)
    lasso, ridge, system, resid = _prepare(d, pen)
    w = system.solve(h.a)
    rn = math.sqrt(d.n)
    t_obs = rn * (h.a @ ridge - h.a0 + pen.lambda_ridge * (w @ lasso))
    return randomization_test(resid, rn * (d.X @ w), float(t_obs), kind, cfg, primitive=getattr(kind, "name", None))


def _two_sided_columns(t, draws):
    """Per-column ``(1 + min(#{draw >= t}, #{draw <= t})) / (R + 1)``.

    Counting the observed value as one of the draws makes the p-value valid
    at every level, which matters at Bonferroni thresholds of order ``1/R``.
    """
    R = draws.shape[0]
    out = np.empty(t.size)
    for j in range(t.size):
        col = draws[:, j]
        tol = _tie_tol(t[j], col)
        up = np.count_nonzero(col >= t[j] - tol)
        lo = np.count_nonzero(col <= t[j] + tol)
        out[j] = (1 + min(up, lo)) / (R + 1)
    return out


def family_test(
    d: Dataset, pen: PenaltyConfig, kind: PrimitiveKind, cfg: TestConfig, alpha_family: float | None = None
) -> FamilyTestReport:
    """Test every ``beta_j = 0`` and apply a Bonferroni correction.

    The per-coefficient p-value is ``min(1, 2 * two-sided p-value)``, with the
    two-sided p-value counting the observed statistic among the draws, and ``j``
    is rejected when it is at most ``alpha_family / p``.  All coefficients
    share the same group elements.
    """
    alpha_family = cfg.alpha if alpha_family is None else alpha_family
    lasso, ridge, system, resid = _prepare(d, pen)
    rn = math.sqrt(d.n)
    stats_ = rn * (ridge + pen.lambda_ridge * system.solve(lasso))
    weights = rn * system.x_solve()
    draws, _, _ = randomization_draws(resid, weights, kind, cfg)
    pvals = np.minimum(1.0, 2.0 * _two_sided_columns(stats_, draws))
    rejected = pvals <= alpha_family / d.p
    for arr in (pvals, rejected, stats_):
        arr.setflags(write=False)
    return FamilyTestReport(pvals, rejected, alpha_family, stats_)

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from resrand.engine import TestConfig
from resrand.errors import InputError, NoConvergence
from resrand.highdim import (
    PenaltyConfig,
    RidgeSystem,
    cross_validated_penalties,
    default_penalties,
    family_test,
    fit_lasso,
    fit_ridge,
    lasso_kkt_gap,
    lasso_lambda_max,
    lasso_path,
    run_highdim_test,
)
from resrand.linmodel import Dataset, LinearHypothesis
from resrand.primitives import GlobalPerm, GlobalSign
from resrand.rng import substream
from resrand.simlab import HighDim, generate


def _wide(seed=0, n=20, p=35):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    beta = np.zeros(p)
    beta[[2, 9]] = [3.0, -2.0]
    return Dataset(X @ beta + rng.standard_normal(n), X)


class TestRidge:
    @pytest.mark.parametrize("shape", [(30, 8), (15, 40)])
    def test_matches_explicit_inverse(self, shape):
        rng = np.random.default_rng(1)
        X = rng.standard_normal(shape)
        y = rng.standard_normal(shape[0])
        lam = 0.7
        oracle = np.linalg.inv(X.T @ X + lam * np.eye(shape[1])) @ X.T @ y
        np.testing.assert_allclose(fit_ridge(Dataset(y, X), lam), oracle, rtol=1e-8, atol=1e-10)

    def test_primal_and_dual_agree(self):
        rng = np.random.default_rng(12)
        X = rng.standard_normal((20, 50))
        y = rng.standard_normal(20)
        primal = np.linalg.solve(X.T @ X + 0.9 * np.eye(50), X.T @ y)
        np.testing.assert_allclose(fit_ridge(Dataset(y, X), 0.9), primal, rtol=1e-8, atol=1e-10)

    def test_dual_system_solve(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((10, 25))
        b = rng.standard_normal((25, 3))
        sys_ = RidgeSystem(X, 0.3)
        assert sys_.dual
        P = X.T @ X + 0.3 * np.eye(25)
        np.testing.assert_allclose(sys_.solve(b), np.linalg.solve(P, b), rtol=1e-7, atol=1e-10)
        np.testing.assert_allclose(sys_.x_solve(), X @ np.linalg.inv(P), rtol=1e-7, atol=1e-10)

    def test_positive_penalty(self):
        with pytest.raises(InputError):
            fit_ridge(_wide(), 0.0)


class TestLasso:
    def test_orthonormal_design_is_soft_threshold(self):
        # with X'X/n = I the lasso is the soft-thresholded least-squares fit
        n, p = 40, 6
        Q, _ = np.linalg.qr(np.random.default_rng(3).standard_normal((n, p)))
        X = Q * math.sqrt(n)
        y = X @ np.array([2.0, -1.0, 0.3, 0.0, 0.05, -0.6]) + 0.1 * np.random.default_rng(4).standard_normal(n)
        z = X.T @ y / n
        lam = 0.4
        oracle = np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)
        np.testing.assert_allclose(fit_lasso(Dataset(y, X), lam), oracle, atol=1e-9)

    def test_zero_above_lambda_max(self):
        d = _wide()
        assert not np.any(fit_lasso(d, lasso_lambda_max(d) * 1.0001))

    @given(seed=st.integers(0, 10_000), frac=st.floats(0.05, 0.9))
    def test_kkt_conditions(self, seed, frac):
        d = _wide(seed)
        lam = frac * lasso_lambda_max(d)
        beta = fit_lasso(d, lam, PenaltyConfig(lasso_tol=1e-9))
        gram = d.X.T @ d.X / d.n
        xty = d.X.T @ d.y / d.n
        assert lasso_kkt_gap(gram, xty, beta, lam) <= 1e-9

    def test_path_matches_single_fits(self):
        d = _wide(5)
        lams = lasso_lambda_max(d) * np.array([0.5, 0.2, 0.1])
        path = lasso_path(d, lams, PenaltyConfig(lasso_tol=1e-10))
        for lam, row in zip(lams, path):
            np.testing.assert_allclose(row, fit_lasso(d, lam, PenaltyConfig(lasso_tol=1e-10)), atol=1e-7)

    def test_no_convergence_reports_gap(self):
        d = _wide(6)
        with pytest.raises(NoConvergence) as info:
            fit_lasso(d, 0.01 * lasso_lambda_max(d), PenaltyConfig(lasso_tol=1e-14, lasso_max_sweeps=2))
        assert info.value.kkt_gap > 0


class TestPenalties:
    def test_default_penalties_positive(self):
        pen = default_penalties(_wide())
        assert pen.lambda_lasso > 0 and pen.lambda_ridge > 0

    def test_cross_validation_runs(self):
        pen = cross_validated_penalties(_wide(), folds=4)
        assert pen.lambda_lasso > 0 and pen.lambda_ridge > 0


class TestHighDimTest:
    @given(seed=st.integers(0, 10_000))
    def test_statistic_splits_into_lasso_and_residual_parts(self, seed):
        # T = sqrt(n)(a'b_lasso - a0) + t(lasso residuals)
        d = _wide(seed)
        pen = PenaltyConfig(lambda_ridge=0.5, lambda_lasso=0.3, lasso_tol=1e-12)
        h = LinearHypothesis.coefficient(d.p, 2, 1.0)
        out = run_highdim_test(d, h, pen, GlobalSign(d.n), TestConfig(draws=20))
        lasso = fit_lasso(d, 0.3, pen)
        resid = d.y - d.X @ lasso
        w = RidgeSystem(d.X, 0.5).solve(h.a)
        expected = math.sqrt(d.n) * (lasso[2] - 1.0) + math.sqrt(d.n) * (d.X @ w) @ resid
        assert out.t_obs == pytest.approx(expected, rel=1e-8, abs=1e-8)

    def test_family_shapes_and_threshold(self):
        d = _wide()
        rep = family_test(d, default_penalties(d), GlobalSign(d.n), TestConfig(draws=500))
        assert rep.per_coef_pvals.shape == (d.p,)
        assert rep.per_coef_pvals.min() >= 1 / 501
        np.testing.assert_array_equal(rep.rejected, rep.per_coef_pvals <= 0.05 / d.p)

    def test_family_detects_strong_signal(self):
        d, truth = generate(HighDim(n=60, p=120, s0=3, signal="10"), substream(7))
        rep = family_test(d, default_penalties(d), GlobalSign(d.n), TestConfig(draws=10_000))
        active = np.flatnonzero(truth.beta)
        assert rep.rejected[active].all()

    def test_perm_primitive_accepted(self):
        d = _wide()
        out = run_highdim_test(d, LinearHypothesis.coefficient(d.p, 0), default_penalties(d), GlobalPerm(d.n), TestConfig(draws=100))
        assert out.R_used == 100


class TestHighDimScale:
    def test_single_strong_coefficient_power_above_fwer(self):
        from resrand.simlab import run_monte_carlo

        rep = run_monte_carlo(HighDim(n=60, p=120, s0=1, signal="10"), ["highdim"], 60, seed=3)
        assert rep.power["highdim"] > rep.rejection_rate["highdim"]

    def test_full_size_smoke(self):
        d, _ = generate(HighDim(n=100, p=500, s0=3), substream(4))
        rep = family_test(d, default_penalties(d), GlobalSign(d.n), TestConfig(draws=10_000))
        assert rep.per_coef_pvals.shape == (500,)
        assert np.all((rep.per_coef_pvals >= 0) & (rep.per_coef_pvals <= 1))

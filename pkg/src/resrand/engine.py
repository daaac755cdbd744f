"""Randomization test core, p-values, boundary-randomized decisions and CI inversion."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InputError
from .linmodel import (
    Dataset,
    LinearHypothesis,
    _Gram,
    fit_constrained_ols,
    fit_ols,
    make_stat_functional,
    test_statistic,
)
from .primitives import PrimitiveKind, enumerate_batch, group_size, sample_batch, size_note
from .rng import substream

#: Draws per random substream.  Block ``b`` always uses ``substream(seed, b)``.
BLOCK = 512

#: Relative tolerance under which two statistic values count as tied.
TIE_RTOL = 1e-9

SIDES = ("greater", "less", "two-sided")
MODES = ("auto", "sampled", "enumerated")


@dataclass(frozen=True)
class TestConfig:
    """Settings for one randomization test.

    ``mode="auto"`` enumerates the group whenever its size is at most
    ``draws`` (and at most ``cap``) and samples otherwise.
    """

    __test__ = False

    draws: int = 2000
    alpha: float = 0.05
    mode: str = "auto"
    cap: int = 100_000
    seed: int = 0
    sidedness: str = "two-sided"
    threads: int = 1

    def __post_init__(self):
        if self.draws < 1:
            raise InputError(f"draws must be >= 1, got {self.draws}")
        if not 0.0 < self.alpha < 1.0:
            raise InputError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sidedness not in SIDES:
            raise InputError(f"sidedness must be one of {SIDES}, got {self.sidedness!r}")
        if self.threads < 1:
            raise InputError(f"threads must be >= 1, got {self.threads}")

    def replace(self, **kw) -> "TestConfig":
        from dataclasses import replace

        return replace(self, **kw)


@dataclass(frozen=True)
class Decision:
    """Test decision as a rejection probability.

    ``probability`` is 1 for a plain rejection, 0 for acceptance and strictly
    in between when the observed statistic sits on the critical order
    statistic.
    """

    probability: float

    @property
    def verdict(self) -> str:
        if self.probability >= 1.0:
            return "reject"
        if self.probability <= 0.0:
            return "accept"
        return "reject_with_prob"

    @property
    def b(self) -> float:
        return self.probability

    def resolve(self, rng: np.random.Generator) -> bool:
        """Turn the decision into reject/accept with one Bernoulli draw."""
        if self.probability >= 1.0:
            return True
        if self.probability <= 0.0:
            return False
        return bool(rng.random() < self.probability)

    def __str__(self):
        if self.verdict == "reject_with_prob":
            return f"RejectWithProb({self.probability:.6g})"
        return self.verdict.capitalize()


@dataclass(frozen=True)
class TestOutcome:
    __test__ = False

    t_obs: float
    draw_values: np.ndarray
    pval_one: float
    pval_two: float
    decision: Decision
    mode_used: str
    group_size_note: str
    seed: int = 0
    primitive: str = ""
    sidedness: str = "two-sided"
    exact: bool = False
    notes: tuple = field(default=())

    @property
    def R_used(self) -> int:
        return int(self.draw_values.size)

    @property
    def b(self) -> float:
        return self.decision.probability

    def to_dict(self, include_draws: bool = False) -> dict:
        out = {
            "t_obs": self.t_obs,
            "pval_one": self.pval_one,
            "pval_two": self.pval_two,
            "decision": self.decision.verdict,
            "b": self.decision.probability,
            "R_used": self.R_used,
            "mode": self.mode_used,
            "seed": self.seed,
            "primitive": self.primitive,
            "group_size_note": self.group_size_note,
            "sidedness": self.sidedness,
            "exact": self.exact,
        }
        if self.notes:
            out["notes"] = list(self.notes)
        if include_draws:
            out["draw_values"] = self.draw_values.tolist()
        return out


# ---------------------------------------------------------------- p-values and decisions


def _tie_tol(t, draws) -> float:
    top = max(abs(float(t)), float(np.max(np.abs(draws))) if np.size(draws) else 0.0)
    return TIE_RTOL * top


def pvalue_one_sided(t_obs: float, draws) -> float:
    """Fraction of draws at or above ``t_obs``."""
    draws = np.asarray(draws, dtype=float)
    if draws.size == 0:
        raise InputError("no randomization draws")
    tol = _tie_tol(t_obs, draws)
    return float(np.count_nonzero(draws >= t_obs - tol) / draws.size)


def pvalue_two_sided(t_obs: float, draws) -> float:
    """``min(P(draw >= t), P(draw <= t))``; compare against ``alpha / 2``."""
    draws = np.asarray(draws, dtype=float)
    if draws.size == 0:
        raise InputError("no randomization draws")
    tol = _tie_tol(t_obs, draws)
    upper = np.count_nonzero(draws >= t_obs - tol)
    lower = np.count_nonzero(draws <= t_obs + tol)
    return float(min(upper, lower) / draws.size)


def _boundary_rule(t: float, draws: np.ndarray, alpha: float, tol: float) -> float:
    """Rejection probability of the upper-tail order-statistic test at level ``alpha``."""
    R = draws.size
    k = max(1, math.ceil(R * (1.0 - alpha) - 1e-9))
    crit = np.partition(draws, k - 1)[k - 1]
    if t > crit + tol:
        return 1.0
    if t < crit - tol:
        return 0.0
    above = np.count_nonzero(draws > crit + tol)
    tied = np.count_nonzero(np.abs(draws - crit) <= tol)
    return float(min(1.0, max(0.0, (R * alpha - above) / tied)))


def decide_with_correction(
    t_obs: float, draws, alpha: float, rng=None, sidedness: str = "two-sided"
) -> Decision:
    """Order-statistic decision with a randomized boundary.

    With ``k = ceil(R (1 - alpha))`` and ``T(k)`` the k-th smallest draw, reject
    when ``t_obs > T(k)``, accept when ``t_obs < T(k)``, and reject with
    probability ``b = (R alpha - R+) / R0`` on a tie, where ``R+`` counts draws
    above ``T(k)`` and ``R0`` draws equal to it.  The two-sided version adds
    the ``alpha/2`` rules for ``t`` and ``-t``.  If ``rng`` is given the result
    is resolved to a plain reject/accept decision.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.size == 0:
        raise InputError("no randomization draws")
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")
    tol = _tie_tol(t_obs, draws)
    if sidedness == "greater":
        prob = _boundary_rule(t_obs, draws, alpha, tol)
    elif sidedness == "less":
        prob = _boundary_rule(-t_obs, -draws, alpha, tol)
    elif sidedness == "two-sided":
        prob = _boundary_rule(t_obs, draws, alpha / 2, tol) + _boundary_rule(-t_obs, -draws, alpha / 2, tol)
    else:
        raise InputError(f"sidedness must be one of {SIDES}, got {sidedness!r}")
    dec = Decision(min(1.0, prob))
    if rng is not None:
        return Decision(1.0 if dec.resolve(rng) else 0.0)
    return dec


# ---------------------------------------------------------------- the draw loop


def _use_enumeration(kind: PrimitiveKind, cfg: TestConfig):
    size = group_size(kind)
    if cfg.mode == "enumerated":
        return True, size
    if cfg.mode == "sampled":
        return False, size
    return size <= min(cfg.draws, cfg.cap), size


def randomization_draws(u, weights, kind: PrimitiveKind, cfg: TestConfig):
    """Evaluate ``weights' (g u)`` over group elements.

    ``weights`` may be a vector (one statistic) or an ``(n, k)`` matrix
    (``k`` statistics sharing the same group elements).  Returns
    ``(draws, mode_used, size)`` where ``draws`` has shape ``(R,)`` or
    ``(R, k)``.
    """
    u = np.asarray(u, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if u.shape[0] != kind.n or weights.shape[0] != kind.n:
        from .errors import LayoutMismatch

        raise LayoutMismatch(f"primitive acts on {kind.n} units, data has {u.shape[0]}")
    enum, size = _use_enumeration(kind, cfg)
    if enum:
        perms, signs = enumerate_batch(kind, cfg.cap)
        chunks = [
            (signs[i : i + BLOCK] * u[perms[i : i + BLOCK]]) @ weights
            for i in range(0, perms.shape[0], BLOCK)
        ]
        return np.concatenate(chunks, axis=0), "enumerated", size

    nblocks = -(-cfg.draws // BLOCK)

    def block(b):
        m = min(BLOCK, cfg.draws - b * BLOCK)
        perms, signs = sample_batch(kind, substream(cfg.seed, b), m)
        return (signs * u[perms]) @ weights

    if cfg.threads > 1 and nblocks > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(block, range(nblocks)))
    else:
        parts = [block(b) for b in range(nblocks)]
    return np.concatenate(parts, axis=0), "sampled", size


def randomization_test(
    u, weights, t_obs: float, kind: PrimitiveKind, cfg: TestConfig, primitive: Optional[str] = None
) -> TestOutcome:
    """Randomization test of ``t_obs`` against draws of ``weights' (g u)``.

    :func:`run_test` calls this with the restricted residuals.  Simulation code
    may pass the true errors instead to check the exact-level property.
    """
    draws, mode, size = randomization_draws(u, weights, kind, cfg)
    if mode == "sampled" and cfg.alpha * cfg.draws < 1:
        warnings.warn(f"alpha * draws = {cfg.alpha * cfg.draws:.3g} < 1; the test can rarely reject", stacklevel=2)
    if cfg.sidedness == "less":
        p1 = pvalue_one_sided(-t_obs, -draws)
    else:
        p1 = pvalue_one_sided(t_obs, draws)
    p2 = pvalue_two_sided(t_obs, draws)
    dec = decide_with_correction(t_obs, draws, cfg.alpha, sidedness=cfg.sidedness)
    draws.setflags(write=False)
    return TestOutcome(
        t_obs=float(t_obs),
        draw_values=draws,
        pval_one=p1,
        pval_two=p2,
        decision=dec,
        mode_used=mode,
        group_size_note=size_note(size),
        seed=cfg.seed,
        primitive=primitive or getattr(kind, "name", type(kind).__name__),
        sidedness=cfg.sidedness,
    )


def run_test(d: Dataset, h: LinearHypothesis, kind: PrimitiveKind, cfg: TestConfig) -> TestOutcome:
    """Residual randomization test of ``a' beta = a0``.

    Fits the restricted model, then compares ``sqrt(n) (a' beta_hat - a0)``
    with the statistic recomputed on transformed restricted residuals.
    """
    h.check(d.p)
    f = fit_ols(d)
    cons = fit_constrained_ols(d, h, f)
    v = make_stat_functional(d, h)
    return randomization_test(cons.restricted_residuals, v.weight, test_statistic(f, h), kind, cfg)


# ---------------------------------------------------------------- confidence intervals


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    grid: np.ndarray
    pvals: np.ndarray
    level: float
    empty: bool = False
    contiguous: bool = True

    def to_dict(self) -> dict:
        return {
            "lower": self.lower,
            "upper": self.upper,
            "level": self.level,
            "empty": self.empty,
            "contiguous": self.contiguous,
            "grid": self.grid.tolist(),
            "pvals": self.pvals.tolist(),
        }


def make_grid(lo: float, hi: float, step: Optional[float] = None) -> np.ndarray:
    if not hi > lo:
        raise InputError(f"grid needs lo < hi, got [{lo}, {hi}]")
    if step is None:
        step = (hi - lo) / 200
    if not step > 0:
        raise InputError(f"grid step must be positive, got {step}")
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    # Round away float noise such as -0.04750000000000001 without touching the step.
    digits = max(0, 6 - math.floor(math.log10(step)))
    return np.round(lo + step * np.arange(count), digits)


def invert_ci(
    d: Dataset,
    coef_index: int,
    kind: PrimitiveKind,
    cfg: TestConfig,
    grid=None,
) -> ConfidenceInterval:
    """Confidence set for one coefficient by inverting the two-sided test.

    ``grid`` is ``(lo, hi)`` or ``(lo, hi, step)``, or an explicit array of
    values.  Every grid point reuses ``cfg.seed``, so the p-value curve is a
    deterministic function of the hypothesized value.  The interval is the
    hull of accepted values; ``contiguous`` is False when rejected points sit
    inside that hull.
    """
    if not 0 <= coef_index < d.p:
        raise InputError(f"coefficient index {coef_index} out of range for {d.p} columns")
    if grid is None:
        raise InputError("invert_ci needs a grid (lo, hi[, step])")
    if isinstance(grid, np.ndarray) or (isinstance(grid, (list, tuple)) and len(grid) > 3):
        values = np.asarray(grid, dtype=float)
    else:
        values = make_grid(*grid)
    pvals = np.empty(values.size)
    for i, a0 in enumerate(values):
        h = LinearHypothesis.coefficient(d.p, coef_index, a0)
        pvals[i] = run_test(d, h, kind, cfg).pval_two
    # Small slack so a p-value that is exactly alpha/2 in exact arithmetic is accepted.
    accepted = pvals >= cfg.alpha / 2 - 1e-12
    level = 1.0 - cfg.alpha
    values.setflags(write=False)
    pvals.setflags(write=False)
    if not accepted.any():
        return ConfidenceInterval(math.nan, math.nan, values, pvals, level, empty=True, contiguous=False)
    idx = np.flatnonzero(accepted)
    contiguous = bool(idx[-1] - idx[0] + 1 == idx.size)
    return ConfidenceInterval(float(values[idx[0]]), float(values[idx[-1]]), values, pvals, level, False, contiguous)


# ---------------------------------------------------------------- similarity diagnostic


@dataclass(frozen=True)
class SimilarityReport:
    """Distances of ``(X'X)^{-1} X' G X`` from multiples of the identity.

    ``per_draw_norms[r]`` is the Frobenius distance of ``M_r`` to
    ``(tr M_r / p) I``; ``mean_deviation`` is the same distance for the
    draw-averaged matrix, which estimates the distance of the population
    mean and shrinks like ``1/sqrt(draws)`` when that mean is a multiple of
    the identity.
    """

    mean_deviation: float
    per_draw_norms: np.ndarray
    mean_of_norms: float

    def to_dict(self) -> dict:
        return {
            "mean_deviation": self.mean_deviation,
            "mean_of_norms": self.mean_of_norms,
            "draws": int(self.per_draw_norms.size),
        }


def _scalar_identity_distance(M: np.ndarray) -> np.ndarray:
    p = M.shape[-1]
    tr = np.trace(M, axis1=-2, axis2=-1)
    diff = M - (tr / p)[..., None, None] * np.eye(p)
    return np.sqrt(np.sum(diff * diff, axis=(-2, -1)))


def element_similarity(d: Dataset, perms, signs):
    """``M_r = (X'X)^{-1} X' G_r X`` for each element and its distance to ``b I``."""
    g = _Gram(d.X)
    X = d.X
    GX = signs[:, :, None] * X[perms]
    cross = np.einsum("ni,rnj->rij", X, GX)
    M = np.stack([g.solve(c) for c in cross])
    return M, _scalar_identity_distance(M)


def similarity_diagnostic(d: Dataset, kind: PrimitiveKind, num_draws: int, rng) -> SimilarityReport:
    if num_draws < 1:
        raise InputError("num_draws must be >= 1")
    if isinstance(rng, (int, np.integer)):
        rng = substream(int(rng))
    sums = np.zeros((d.p, d.p))
    norms = []
    for start in range(0, num_draws, BLOCK):
        perms, signs = sample_batch(kind, rng, min(BLOCK, num_draws - start))
        M, dist = element_similarity(d, perms, signs)
        sums += M.sum(axis=0)
        norms.append(dist)
    norms = np.concatenate(norms)
    norms.setflags(write=False)
    mean_dev = float(_scalar_identity_distance(sums / num_draws))
    return SimilarityReport(mean_dev, norms, float(norms.mean()))

"""Balanced clusterings that make the cluster sign test exact in finite samples.

If every cluster's Gram matrix ``Xc'Xc`` is proportional to the full Gram
``X'X``, the statistic evaluated on cluster-sign-flipped restricted residuals
equals the statistic evaluated on the flipped true errors, for every group
element.  The test that enumerates all ``2**J`` cluster sign patterns is then
exact under cluster-level sign symmetry of the errors.

For a design made of an intercept and one binary treatment indicator the
condition holds whenever each cluster has the same treated share, which is
what :func:`build_balanced_clustering` constructs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .engine import TestConfig, TestOutcome, run_test
from .errors import IndivisibleDesign, InputError, NotSimilarWarning
from .linmodel import Dataset, LinearHypothesis, _Gram, fit_constrained_ols, make_stat_functional
from .primitives import ClusterSign, Clustering, enumerate_batch

DEFAULT_TOL = 1e-8


@dataclass(frozen=True)
class BalancedDesignSpec:
    treatment: np.ndarray
    num_clusters: int

    def __post_init__(self):
        d = np.asarray(self.treatment)
        if d.ndim != 1 or d.size == 0:
            raise InputError("treatment must be a nonempty vector")
        if not np.all((d == 0) | (d == 1)):
            raise InputError("treatment must be binary (0/1)")
        if self.num_clusters < 1:
            raise InputError("num_clusters must be >= 1")
        object.__setattr__(self, "treatment", d.astype(np.int8))
        n1 = int(d.sum())
        n0 = d.size - n1
        rem = {"treated": n1 % self.num_clusters, "control": n0 % self.num_clusters}
        if any(rem.values()):
            raise IndivisibleDesign(
                f"{self.num_clusters} clusters do not divide {n1} treated and {n0} control units "
                f"(remainders {rem['treated']} and {rem['control']})",
                rem,
            )


def build_balanced_clustering(spec: BalancedDesignSpec, rng) -> Clustering:
    """Randomly split treated and control units evenly across the clusters."""
    d = spec.treatment
    J = spec.num_clusters
    out = np.empty(d.size, dtype=np.intp)
    for group in (np.flatnonzero(d == 1), np.flatnonzero(d == 0)):
        if group.size == 0:
            continue
        shuffled = rng.permutation(group)
        out[shuffled] = np.repeat(np.arange(J), group.size // J)
    return Clustering(out)


@dataclass(frozen=True)
class SimilarityCheck:
    ok: bool
    worst_relative_deviation: float


def verify_cluster_similarity(d: Dataset, c: Clustering, tol: float = DEFAULT_TOL) -> SimilarityCheck:
    """Check that each cluster's Gram matrix is a scalar multiple of ``X'X``.

    The deviation of cluster ``c`` is ``||Gc - mu_c G||_F / ||Gc||_F`` with
    ``mu_c`` the least-squares scalar.
    """
    _Gram(d.X)
    if c.n != d.n:
        raise InputError(f"clustering covers {c.n} units, dataset has {d.n}")
    G = d.X.T @ d.X
    gg = float(np.sum(G * G))
    worst = 0.0
    for idx in c.members:
        Xc = d.X[idx]
        Gc = Xc.T @ Xc
        mu = float(np.sum(Gc * G)) / gg
        norm = float(np.linalg.norm(Gc))
        dev = float(np.linalg.norm(Gc - mu * G)) / norm if norm > 0 else 0.0
        worst = max(worst, dev)
    return SimilarityCheck(worst <= tol, worst)


def run_exact_test(
    d: Dataset,
    h: LinearHypothesis,
    c: Clustering,
    alpha: float = 0.05,
    tol: float = DEFAULT_TOL,
    cap: int = 1 << 16,
) -> TestOutcome:
    """Cluster sign test over all ``2**J`` sign patterns.

    The outcome carries ``exact=True`` only when the similarity check passes;
    otherwise a :class:`NotSimilarWarning` is issued and the result is an
    ordinary (asymptotic) cluster sign test.
    """
    check = verify_cluster_similarity(d, c, tol)
    kind = ClusterSign(c)
    cfg = TestConfig(draws=max(1, 2**c.J), alpha=alpha, mode="enumerated", cap=cap)
    out = run_test(d, h, kind, cfg)
    if not check.ok:
        warnings.warn(
            f"cluster Gram matrices deviate from proportionality by {check.worst_relative_deviation:.3g}; "
            "running as an asymptotic test",
            NotSimilarWarning,
            stacklevel=2,
        )
        return replace(out, notes=out.notes + ("clusters not similar; not exact",))
    return replace(out, exact=True)


def exactness_gap(d: Dataset, h: LinearHypothesis, c: Clustering, errors) -> float:
    """``max_g |t(g e_restricted) - t(g errors)|`` over all cluster sign patterns.

    ``errors`` are the true errors of a dataset generated under the null.
    """
    v = make_stat_functional(d, h).weight
    resid = fit_constrained_ols(d, h).restricted_residuals
    errors = np.asarray(errors, dtype=float)
    perms, signs = enumerate_batch(ClusterSign(c))
    a = (signs * resid[perms]) @ v
    b = (signs * errors[perms]) @ v
    return float(np.max(np.abs(a - b)))

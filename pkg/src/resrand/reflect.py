"""Reflection test for serially correlated errors.

An AR-type error series is conditionally symmetric right after a zero.  The
test therefore cuts the time axis at the points where the restricted residuals
are smallest in absolute value and runs a cluster sign test on the resulting
consecutive blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .engine import Decision, TestConfig, TestOutcome, randomization_test
from .errors import InputError
from .linmodel import Dataset, LinearHypothesis, fit_constrained_ols, fit_ols, make_stat_functional, test_statistic
from .primitives import ClusterSign, Clustering

VARIANTS = ("conditional", "unconditional")


@dataclass(frozen=True)
class ReflectionConfig:
    J: int = 6
    variant: str = "conditional"

    def __post_init__(self):
        if self.J < 2:
            raise InputError(f"J must be >= 2, got {self.J}")
        if self.variant not in VARIANTS:
            raise InputError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass(frozen=True)
class ReflectionClustering:
    """Consecutive blocks between anchor times.

    ``clustering`` labels units outside ``[t_0, t_J]`` with -1.  ``achieved``
    counts blocks with at least two members; a one-member block lies between
    two adjacent anchors and carries no reflected error path.
    """

    clustering: Clustering
    anchors: np.ndarray
    achieved: int


@dataclass(frozen=True)
class Undecided:
    achieved: int
    J: int
    reason: str

    def to_dict(self) -> dict:
        return {"decision": "undecided", "achieved": self.achieved, "J": self.J, "reason": self.reason}


def build_reflection_clustering(residuals, J: int) -> ReflectionClustering:
    """Anchor at the ``J + 1`` smallest ``|residuals|`` (earliest first on ties).

    With sorted anchors ``t_0 < ... < t_J`` the blocks are ``{t_0..t_1}`` and
    ``{t_{k-1}+1..t_k}`` for ``k = 2..J``.  ``residuals`` must be in time order.
    """
    r = np.abs(np.asarray(residuals, dtype=float))
    n = r.size
    if J + 1 > n:
        raise InputError(f"need J + 1 <= n, got J={J}, n={n}")
    anchors = np.sort(np.argsort(r, kind="stable")[: J + 1])
    assignment = np.full(n, -1, dtype=np.intp)
    assignment[anchors[0] : anchors[1] + 1] = 0
    for k in range(2, J + 1):
        assignment[anchors[k - 1] + 1 : anchors[k] + 1] = k - 1
    c = Clustering(assignment)
    achieved = int(np.count_nonzero(c.sizes >= 2))
    anchors.setflags(write=False)
    return ReflectionClustering(c, anchors, achieved)


def run_reflection_test(
    d: Dataset, h: LinearHypothesis, rcfg: ReflectionConfig, cfg: TestConfig
) -> Union[TestOutcome, Undecided]:
    """Cluster sign test on blocks anchored at near-zero restricted residuals.

    When fewer than ``J`` usable blocks are found the conditional variant
    returns :class:`Undecided` and the unconditional variant does not reject.
    """
    if d.time is None:
        raise InputError("the reflection test needs a time index")
    h.check(d.p)
    f = fit_ols(d)
    resid = fit_constrained_ols(d, h, f).restricted_residuals
    rc = build_reflection_clustering(resid, rcfg.J)
    if rc.achieved < rcfg.J and rcfg.variant == "conditional":
        return Undecided(rc.achieved, rcfg.J, f"only {rc.achieved} of {rcfg.J} blocks have two or more points")
    v = make_stat_functional(d, h).weight
    out = randomization_test(resid, v, test_statistic(f, h), ClusterSign(rc.clustering), cfg, primitive="reflect")
    if rc.achieved < rcfg.J:
        return replace(
            out,
            pval_one=1.0,
            pval_two=1.0,
            decision=Decision(0.0),
            notes=out.notes + (f"only {rc.achieved} of {rcfg.J} blocks; not rejecting",),
        )
    return out


def is_decided(result: Optional[Union[TestOutcome, Undecided]]) -> bool:
    return isinstance(result, TestOutcome)

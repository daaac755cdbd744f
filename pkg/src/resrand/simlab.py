"""Data-generating processes and a Monte Carlo harness for rejection rates.

Each replication draws a dataset from a scenario, hands only the observable
:class:`~resrand.linmodel.Dataset` to every method, and scores the returned
decisions against the hidden truth.  Replication ``r`` uses random streams
keyed by ``(seed, r, ...)``, so reports do not depend on thread count or
execution order.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Union

import numpy as np

from .engine import TestConfig, run_test
from .errors import InputError, ResRandError
from .exactcons import BalancedDesignSpec, build_balanced_clustering, run_exact_test
from .highdim import default_penalties, family_test
from .linmodel import Dataset, LinearHypothesis, classical_wald_test
from .primitives import ClusterPerm, ClusterSign, Clustering, Double, GlobalPerm, GlobalSign, TwoWayPerm, layout_from_labels
from .reflect import ReflectionConfig, run_reflection_test
from .rng import derive_seed, substream

# ---------------------------------------------------------------- scenarios


def _mixture(rng, size):
    """Equal mixture of N(-1, 0.25^2) and N(1, 0.25^2)."""
    centers = np.where(rng.random(size) < 0.5, -1.0, 1.0)
    return centers + 0.25 * rng.standard_normal(size)


def _draw(dist: str, rng, size):
    if dist == "normal":
        return rng.standard_normal(size)
    if dist == "lognormal":
        return rng.lognormal(0.0, 1.0, size)
    if dist == "t3":
        return rng.standard_t(3, size)
    if dist == "cauchy":
        return rng.standard_cauchy(size)
    if dist == "mixture":
        return _mixture(rng, size)
    raise InputError(f"unknown distribution {dist!r}")


def _check_choice(name, value, choices):
    if value not in choices:
        raise InputError(f"{name} must be one of {choices}, got {value!r}")


@dataclass(frozen=True)
class OneWayCluster:
    """``y = b0 + beta x + e`` with ``e = e_c + e_ic`` and ``x = x_c + x_ic``.

    ``x_c`` is N(0, 1) or 0.5 LN(0, 1).  With ``heteroskedastic`` the errors
    are scaled by ``3 |x|`` and the intercept is 1, otherwise it is 0.
    """

    J: int = 10
    cluster_size: int = 30
    x_dist: str = "normal"
    random_effect: bool = True
    heteroskedastic: bool = False
    beta: float = 0.0
    a0: float = 0.0

    def __post_init__(self):
        if self.J < 1 or self.cluster_size < 1:
            raise InputError("J and cluster_size must be positive")
        _check_choice("x_dist", self.x_dist, ("normal", "lognormal"))


@dataclass(frozen=True)
class BehrensFisher:
    """Two-group design ``y = beta1 d + e`` with error sd 1 (treated) and ``sigma0`` (control)."""

    n: int = 30
    n1: int = 3
    sigma0: float = 1.0
    err: str = "normal"
    beta1: float = 0.0
    num_clusters: int = 3

    def __post_init__(self):
        if not 0 < self.n1 < self.n:
            raise InputError("need 0 < n1 < n")
        if not self.sigma0 > 0:
            raise InputError("sigma0 must be positive")
        _check_choice("err", self.err, ("normal", "t3", "mixture"))


@dataclass(frozen=True)
class Dyadic:
    """``y = 1 + beta1 |x_r - x_c| + e_r + e_c + u`` over dyads of ``m`` nodes.

    ``cells="lower"`` keeps dyads with column below row (``m(m-1)/2`` of
    them); ``cells="full"`` keeps the whole ``m x m`` grid.
    """

    m: int = 10
    x_dist: str = "normal"
    eps_dist: str = "normal"
    beta1: float = 1.0
    a0: float = 1.0
    cells: str = "lower"

    def __post_init__(self):
        if self.m < 2:
            raise InputError("m must be >= 2")
        _check_choice("x_dist", self.x_dist, ("normal", "lognormal"))
        _check_choice("eps_dist", self.eps_dist, ("normal", "mixture"))
        _check_choice("cells", self.cells, ("lower", "full"))


@dataclass(frozen=True)
class AR1:
    """``y_t = x_t + e_t`` with zero coefficients and ``e_t = rho e_{t-1} + u_t``.

    Covariate models: ``(i)`` N(0,1), ``(ii)`` LN(0,1), ``(iii)`` AR with
    normal innovations, ``(iv)`` AR with log-normal innovations.
    """

    n: int = 100
    rho: float = 0.8
    x_model: str = "(i)"
    u_dist: str = "normal"

    def __post_init__(self):
        if self.n < 3:
            raise InputError("n must be >= 3")
        if not -1.0 <= self.rho <= 1.0:
            raise InputError("rho must lie in [-1, 1]")
        _check_choice("x_model", self.x_model, ("(i)", "(ii)", "(iii)", "(iv)"))
        _check_choice("u_dist", self.u_dist, ("normal", "mixture"))


@dataclass(frozen=True)
class HighDim:
    """Sparse regression with Toeplitz(0.9) Gaussian design and no intercept.

    ``signal`` is a constant (e.g. ``"10"``) or ``"U(lo,hi)"``; the ``s0``
    active coordinates are placed at random.
    """

    n: int = 60
    p: int = 120
    s0: int = 3
    signal: str = "10"
    err: str = "normal"
    rho: float = 0.9

    def __post_init__(self):
        if self.n < 2 or self.p < 1 or not 0 <= self.s0 <= self.p:
            raise InputError("need n >= 2, p >= 1 and 0 <= s0 <= p")
        _check_choice("err", self.err, ("normal", "t3", "cauchy"))
        _parse_signal(self.signal)


ScenarioSpec = Union[OneWayCluster, BehrensFisher, Dyadic, AR1, HighDim]
SCENARIO_TYPES = {cls.__name__: cls for cls in (OneWayCluster, BehrensFisher, Dyadic, AR1, HighDim)}


def _parse_signal(signal: str):
    m = re.fullmatch(r"\s*U\(\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*\)\s*", str(signal))
    if m:
        return ("uniform", float(m.group(1)), float(m.group(2)))
    try:
        return ("const", float(signal))
    except ValueError:
        raise InputError(f"signal must be a number or U(lo,hi), got {signal!r}") from None


def spec_from_dict(raw: dict) -> ScenarioSpec:
    """Build a scenario from ``{"kind": name, field: value, ...}`` with string or typed values."""
    raw = dict(raw)
    kind = raw.pop("kind", None)
    if kind not in SCENARIO_TYPES:
        raise InputError(f"scenario kind must be one of {sorted(SCENARIO_TYPES)}, got {kind!r}")
    cls = SCENARIO_TYPES[kind]
    types = {f.name: f.type for f in fields(cls)}
    kw = {}
    for key, value in raw.items():
        if key not in types:
            raise InputError(f"{kind} has no field {key!r}")
        default = getattr(cls(), key)
        if isinstance(default, bool):
            kw[key] = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            kw[key] = int(value)
        elif isinstance(default, float):
            kw[key] = float(value)
        else:
            kw[key] = str(value)
    return cls(**kw)


def spec_to_dict(spec: ScenarioSpec) -> dict:
    return {"kind": type(spec).__name__, **asdict(spec)}


@dataclass(frozen=True)
class Truth:
    """Generating values; only the harness sees these."""

    beta: np.ndarray
    errors: np.ndarray
    hypothesis: Optional[LinearHypothesis] = None


def generate(spec: ScenarioSpec, rng: np.random.Generator):
    """Draw one dataset; returns ``(Dataset, Truth)``."""
    if isinstance(spec, OneWayCluster):
        J, k = spec.J, spec.cluster_size
        n = J * k
        cl = np.repeat(np.arange(J), k)
        xc = rng.standard_normal(J) if spec.x_dist == "normal" else 0.5 * rng.lognormal(0.0, 1.0, J)
        x = xc[cl] + rng.standard_normal(n)
        ec = rng.standard_normal(J) if spec.random_effect else np.zeros(J)
        eps = ec[cl] + rng.standard_normal(n)
        b0 = 0.0
        if spec.heteroskedastic:
            eps = eps * 3.0 * np.abs(x)
            b0 = 1.0
        beta = np.array([b0, spec.beta])
        X = np.column_stack([np.ones(n), x])
        d = Dataset(X @ beta + eps, X, cluster=cl)
        return d, Truth(beta, eps, LinearHypothesis(np.array([0.0, 1.0]), spec.a0))
    if isinstance(spec, BehrensFisher):
        treat = np.zeros(spec.n)
        treat[: spec.n1] = 1.0
        sd = np.where(treat == 1, 1.0, spec.sigma0)
        if spec.err == "normal":
            z = rng.standard_normal(spec.n)
        elif spec.err == "t3":
            z = rng.standard_t(3, spec.n)
        else:
            z = _mixture(rng, spec.n)
        eps = sd * z
        beta = np.array([0.0, spec.beta1])
        X = np.column_stack([np.ones(spec.n), treat])
        return Dataset(X @ beta + eps, X), Truth(beta, eps, LinearHypothesis(np.array([0.0, 1.0]), 0.0))
    if isinstance(spec, Dyadic):
        m = spec.m
        if spec.cells == "lower":
            pairs = [(r, c) for r in range(m) for c in range(r)]
        else:
            pairs = [(r, c) for r in range(m) for c in range(m)]
        rows = np.array([p[0] for p in pairs])
        cols = np.array([p[1] for p in pairs])
        xs = _draw(spec.x_dist, rng, m)
        node_eps = _draw(spec.eps_dist, rng, m)
        eps = node_eps[rows] + node_eps[cols] + rng.standard_normal(rows.size)
        beta = np.array([1.0, spec.beta1])
        X = np.column_stack([np.ones(rows.size), np.abs(xs[rows] - xs[cols])])
        d = Dataset(X @ beta + eps, X, row_cluster=rows, col_cluster=cols)
        return d, Truth(beta, eps, LinearHypothesis(np.array([0.0, 1.0]), spec.a0))
    if isinstance(spec, AR1):
        n = spec.n
        u = rng.standard_normal(n) if spec.u_dist == "normal" else _mixture(rng, n)
        eps = np.empty(n)
        prev = 0.0
        for t in range(n):
            prev = spec.rho * prev + u[t]
            eps[t] = prev
        innov = rng.standard_normal(n) if spec.x_model in ("(i)", "(iii)") else rng.lognormal(0.0, 1.0, n)
        if spec.x_model in ("(iii)", "(iv)"):
            x = np.empty(n)
            prev = 0.0
            for t in range(n):
                prev = spec.rho * prev + innov[t]
                x[t] = prev
        else:
            x = innov
        beta = np.zeros(2)
        X = np.column_stack([np.ones(n), x])
        d = Dataset(X @ beta + eps, X, time=np.arange(n))
        return d, Truth(beta, eps, LinearHypothesis(np.array([0.0, 1.0]), 0.0))
    if isinstance(spec, HighDim):
        n, p = spec.n, spec.p
        idx = np.arange(p)
        cov = spec.rho ** np.abs(idx[:, None] - idx[None, :])
        X = rng.standard_normal((n, p)) @ np.linalg.cholesky(cov).T
        beta = np.zeros(p)
        active = np.sort(rng.choice(p, spec.s0, replace=False))
        sig = _parse_signal(spec.signal)
        if sig[0] == "const":
            beta[active] = sig[1]
        else:
            beta[active] = rng.uniform(sig[1], sig[2], spec.s0)
        eps = _draw(spec.err, rng, n)
        return Dataset(X @ beta + eps, X), Truth(beta, eps)
    raise TypeError(f"unknown scenario {spec!r}")


# ---------------------------------------------------------------- methods


@dataclass(frozen=True)
class MethodContext:
    """Per-replication settings handed to a method (never the truth)."""

    hypothesis: Optional[LinearHypothesis]
    cfg: TestConfig
    rng: np.random.Generator


def _resolved(outcome, ctx: MethodContext) -> bool:
    return outcome.decision.resolve(ctx.rng)


def _wald(d, ctx):
    return classical_wald_test(d, ctx.hypothesis, ctx.cfg.alpha).reject


def _clustering(d: Dataset) -> Clustering:
    if d.cluster is None:
        raise InputError("method needs cluster labels")
    return Clustering(d.cluster)


def _engine(kind_fn):
    def method(d, ctx):
        return _resolved(run_test(d, ctx.hypothesis, kind_fn(d), ctx.cfg), ctx)

    return method


def _twoway_kind(d: Dataset):
    if d.row_cluster is None or d.col_cluster is None:
        raise InputError("method needs row and column labels")
    return TwoWayPerm(layout_from_labels(d.row_cluster, d.col_cluster, dyadic=True))


def _exact(d, ctx, num_clusters=3):
    spec = BalancedDesignSpec(d.X[:, 1], num_clusters)
    c = build_balanced_clustering(spec, ctx.rng)
    return _resolved(run_exact_test(d, ctx.hypothesis, c, ctx.cfg.alpha), ctx)


def _reflect(variant):
    def method(d, ctx):
        out = run_reflection_test(d, ctx.hypothesis, ReflectionConfig(6, variant), ctx.cfg)
        if not hasattr(out, "decision"):
            return None
        return _resolved(out, ctx)

    return method


def _highdim(d, ctx):
    pen = default_penalties(d)
    return family_test(d, pen, GlobalSign(d.n), ctx.cfg).rejected


METHODS: dict[str, Callable] = {
    "wald": _wald,
    "sign": _engine(lambda d: ClusterSign(_clustering(d))),
    "perm": _engine(lambda d: ClusterPerm(_clustering(d))),
    "double": _engine(lambda d: Double(_clustering(d))),
    "global_perm": _engine(lambda d: GlobalPerm(d.n)),
    "global_sign": _engine(lambda d: GlobalSign(d.n)),
    "twoway": _engine(_twoway_kind),
    "exact": _exact,
    "reflect_cond": _reflect("conditional"),
    "reflect_uncond": _reflect("unconditional"),
    "highdim": _highdim,
}

#: Internal draws per method when not overridden.
DEFAULT_DRAWS = {"highdim": 10_000}


# ---------------------------------------------------------------- harness


@dataclass
class MonteCarloReport:
    scenario: dict
    methods: list
    replications: int
    seed: int
    rejection_rate: dict
    mc_standard_error: dict
    decided_fraction: dict
    excluded: dict
    wall_time: float
    power: dict = field(default_factory=dict)
    full_scale: str = ""
    run_scale: str = ""
    errors: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def rows(self) -> list:
        out = []
        for m in self.methods:
            out.append(
                {
                    "scenario": self.scenario.get("kind", ""),
                    "spec": json.dumps(self.scenario, sort_keys=True),
                    "method": m,
                    "replications": self.replications,
                    "rejection_rate": self.rejection_rate[m],
                    "mc_standard_error": self.mc_standard_error[m],
                    "decided_fraction": self.decided_fraction[m],
                    "excluded": self.excluded[m],
                    "power": self.power.get(m, ""),
                }
            )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.rows()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()


def mc_standard_error(rate: float, count: int) -> float:
    if count <= 0 or not math.isfinite(rate):
        return math.nan
    return math.sqrt(rate * (1.0 - rate) / count)


def _one_replication(spec, methods, seed, rep, draws, alpha):
    d, truth = generate(spec, substream(seed, rep, 0))
    out = {}
    for k, name in enumerate(methods):
        cfg = TestConfig(draws=draws.get(name, DEFAULT_DRAWS.get(name, 2000)), alpha=alpha, seed=derive_seed(seed, rep, 1 + k))
        ctx = MethodContext(truth.hypothesis, cfg, substream(seed, rep, 1000 + k))
        try:
            verdict = METHODS[name](d, ctx)
        except ResRandError as exc:
            out[name] = ("error", type(exc).__name__)
            continue
        if isinstance(verdict, np.ndarray):
            null = truth.beta == 0
            false_any = bool(np.any(verdict[null]))
            power = float(np.mean(verdict[~null])) if np.any(~null) else math.nan
            out[name] = ("family", false_any, power)
        else:
            out[name] = ("single", verdict)
    return out


def run_monte_carlo(
    spec: ScenarioSpec,
    methods: list,
    M: int,
    seed: int = 0,
    draws: Optional[dict] = None,
    alpha: float = 0.05,
    threads: int = 1,
    full_scale: str = "",
) -> MonteCarloReport:
    """Rejection rates of ``methods`` over ``M`` replications of ``spec``.

    For family methods (``highdim``) the rejection rate is the family-wise
    error rate and ``power`` is the mean share of active coefficients
    rejected.  Reflection methods can be undecided; their rate is over decided
    replications.  Replications where a method raises are excluded and
    counted.
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise InputError(f"unknown methods {unknown}; choose from {sorted(METHODS)}")
    if M < 1:
        raise InputError("M must be >= 1")
    draws = dict(draws or {})
    start = time.perf_counter()
    job = lambda rep: _one_replication(spec, methods, seed, rep, draws, alpha)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(M)))
    else:
        results = [job(rep) for rep in range(M)]
    rate, se, decided, excluded, power, errors = {}, {}, {}, {}, {}, {}
    for name in methods:
        rs = [r[name] for r in results]
        errs = [x[1] for x in rs if x[0] == "error"]
        excluded[name] = len(errs)
        if errs:
            errors[name] = sorted(set(errs))
        fam = [x for x in rs if x[0] == "family"]
        single = [x[1] for x in rs if x[0] == "single"]
        if fam:
            count = len(fam)
            rate[name] = sum(x[1] for x in fam) / count
            pw = [x[2] for x in fam if not math.isnan(x[2])]
            power[name] = float(np.mean(pw)) if pw else math.nan
            decided[name] = 1.0
        else:
            dec = [v for v in single if v is not None]
            count = len(dec)
            rate[name] = (sum(dec) / count) if count else math.nan
            decided[name] = count / len(single) if single else math.nan
        se[name] = mc_standard_error(rate[name], count)
    return MonteCarloReport(
        scenario=spec_to_dict(spec),
        methods=list(methods),
        replications=M,
        seed=seed,
        rejection_rate=rate,
        mc_standard_error=se,
        decided_fraction=decided,
        excluded=excluded,
        wall_time=time.perf_counter() - start,
        power=power,
        full_scale=full_scale,
        run_scale=f"M={M}",
        errors=errors,
    )


# ---------------------------------------------------------------- registered scenarios


@dataclass(frozen=True)
class RegisteredScenario:
    """A named scenario with its methods, default replications and target claim.

    ``full_scale`` describes the larger study this desk-sized scenario stands
    in for; reports record what was actually run in ``run_scale``.
    """

    spec: ScenarioSpec
    methods: tuple
    M: int
    full_scale: str
    claim: str


SCENARIOS: dict[str, RegisteredScenario] = {}


def _register(sid, spec, methods, M, full_scale, claim):
    SCENARIOS[sid] = RegisteredScenario(spec, tuple(methods), M, full_scale, claim)


for _s0 in (0.5, 5.0):
    for _err in ("normal", "mixture"):
        _register(
            f"bf-exact-s{_s0:g}-{_err}",
            BehrensFisher(sigma0=_s0, err=_err),
            ["exact"],
            5000,
            "5000 replications, sigma0 in {0.5, 1, 2, 5}, three error laws",
            "exact cluster sign test keeps level 0.05 +/- 0.01",
        )
_register(
    "oneway-homo-re",
    OneWayCluster(J=10, random_effect=True),
    ["sign", "perm", "double", "wald"],
    1000,
    "5000 replications, J in {10, 15, 20}, R=2000",
    "randomization tests near 0.05; classical Wald above 0.10",
)
_register(
    "oneway-hetero",
    OneWayCluster(J=10, random_effect=True, heteroskedastic=True),
    ["sign", "perm"],
    1000,
    "5000 replications, J in {10, 15, 20}, R=2000",
    "cluster sign test near 0.05; within-cluster permutation above 0.08",
)
_register(
    "oneway-power",
    OneWayCluster(J=10, random_effect=True, a0=0.1),
    ["sign", "perm", "double", "wald"],
    1000,
    "5000 replications, J in {10, 15, 20}",
    "rejection of the false hypothesis beta1 = 0.1",
)
_register(
    "dyadic-m10",
    Dyadic(m=10, cells="full"),
    ["twoway"],
    500,
    "m in {10, 25, 50}",
    "two-way permutation test at most 0.08",
)
_register(
    "ar1-rho0.8",
    AR1(n=100, rho=0.8),
    ["reflect_cond", "reflect_uncond", "wald"],
    1000,
    "rho in {0, 0.3, 0.5, 0.8}, four covariate models, two error laws",
    "conditional reflection test level 0.05 +/- 0.02 with decided share in [0.3, 0.7]",
)
_register(
    "highdim-null",
    HighDim(n=60, p=120, s0=0),
    ["highdim"],
    200,
    "p=500, n=100, 50 designs x 100 error draws per setting",
    "Bonferroni family error at most 0.07",
)
_register(
    "highdim-signal10",
    HighDim(n=60, p=120, s0=3, signal="10"),
    ["highdim"],
    200,
    "p=500, n=100, 50 designs x 100 error draws per setting",
    "average power at least 0.6 and above the family error",
)

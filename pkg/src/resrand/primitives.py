"""Groups of signed permutations acting on residual vectors.

A group element is stored as a pair ``(perm, sign)`` and acts on a vector by
``out[i] = sign[i] * u[perm[i]]``.  Six families are supported:

* ``GlobalPerm``: all permutations of the n units.
* ``GlobalSign``: independent sign flips of every unit.
* ``ClusterPerm``: permutations within each cluster.
* ``ClusterSign``: one sign flip per cluster.
* ``Double``: within-cluster permutations combined with cluster sign flips.
* ``TwoWayPerm``: a row-label permutation and a column-label permutation of a
  two-way layout (a single shared node permutation for dyadic layouts).

Sampling is vectorized: :func:`sample_batch` returns ``(size, n)`` arrays of
permutations and signs so that many draws can be evaluated with one matrix
product.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Union

import numpy as np

from .errors import EmptyInput, GroupTooLarge, InputError, LayoutMismatch

#: Group sizes above this are reported as ``math.inf`` ("large").
SIZE_LIMIT = 2**63 - 1


def _ro(a, dtype=np.intp):
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _saturate(value: int):
    return value if value <= SIZE_LIMIT else math.inf


@dataclass(frozen=True, eq=False)
class Clustering:
    """Partition of unit indices into ``J`` clusters.

    ``assignment[i] == -1`` marks a unit that belongs to no cluster; such
    units are held fixed by every cluster primitive.
    """

    assignment: np.ndarray

    def __post_init__(self):
        a = _ro(self.assignment)
        if a.ndim != 1 or a.size == 0:
            raise EmptyInput("clustering needs a nonempty label vector")
        if a.min() < -1:
            raise InputError("cluster labels must be >= -1")
        J = int(a.max()) + 1
        if J == 0:
            raise EmptyInput("clustering has no clusters")
        sizes = np.bincount(a[a >= 0], minlength=J)
        if np.any(sizes == 0):
            raise InputError("cluster labels must be contiguous with every cluster nonempty")
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "_sizes", _ro(sizes))
        members = tuple(_ro(np.flatnonzero(a == c)) for c in range(J))
        object.__setattr__(self, "_members", members)

    @classmethod
    def from_labels(cls, labels) -> "Clustering":
        """Build from arbitrary hashable labels; ``None`` marks an unclustered unit."""
        mapping: dict = {}
        out = []
        for lab in labels:
            if lab is None:
                out.append(-1)
                continue
            out.append(mapping.setdefault(lab, len(mapping)))
        return cls(np.asarray(out, dtype=np.intp))

    @property
    def n(self) -> int:
        return self.assignment.size

    @property
    def J(self) -> int:
        return self._sizes.size

    @property
    def sizes(self) -> np.ndarray:
        return self._sizes

    @property
    def members(self) -> tuple:
        return self._members


@dataclass(frozen=True, eq=False)
class TwoWayLayout:
    """Row and column labels of a two-way (or dyadic) arrangement.

    For a dyadic layout rows and columns index the same set of nodes, so
    ``row_count == col_count``.
    """

    row_of: np.ndarray
    col_of: np.ndarray
    replication_of: np.ndarray
    row_count: int
    col_count: int
    dyadic: bool = False

    def __post_init__(self):
        for name in ("row_of", "col_of", "replication_of"):
            object.__setattr__(self, name, _ro(getattr(self, name)))
        n = self.row_of.size
        if n == 0:
            raise EmptyInput("layout has no observations")
        if self.col_of.size != n or self.replication_of.size != n:
            raise InputError("row, column and replication vectors differ in length")
        keys = set(zip(self.row_of.tolist(), self.col_of.tolist(), self.replication_of.tolist()))
        if len(keys) != n:
            raise InputError("(row, column, replication) triples must be unique")
        if self.dyadic and self.row_count != self.col_count:
            raise InputError("a dyadic layout needs as many rows as columns")

    @property
    def n(self) -> int:
        return self.row_of.size

    @property
    def replicated(self) -> bool:
        return bool(self.replication_of.max() > 0)


def layout_from_labels(row, col, dyadic: Optional[bool] = None) -> TwoWayLayout:
    """Build a :class:`TwoWayLayout` from raw row and column labels.

    Labels are renumbered from 0 in sorted order.  For dyadic data the row and
    column labels share one node namespace.  With ``dyadic=None`` the layout is
    treated as dyadic when the labels overlap and the separately numbered
    grid is incomplete.  Replication indices count repeated cells in input
    order.
    """
    row = list(row)
    col = list(col)
    if len(row) == 0:
        raise EmptyInput("no observations")
    if len(row) != len(col):
        raise InputError(f"row labels have length {len(row)}, column labels {len(col)}")

    def index(labels, universe):
        lookup = {lab: k for k, lab in enumerate(sorted(universe))}
        return np.array([lookup[lab] for lab in labels], dtype=np.intp), len(lookup)

    r_sep, nr = index(row, set(row))
    c_sep, nc = index(col, set(col))
    if dyadic is None:
        full = len(set(zip(r_sep.tolist(), c_sep.tolist()))) == nr * nc
        dyadic = bool(set(row) & set(col)) and not full
    if dyadic:
        nodes = set(row) | set(col)
        r_idx, m = index(row, nodes)
        c_idx, _ = index(col, nodes)
        nr = nc = m
    else:
        r_idx, c_idx = r_sep, c_sep
    seen: dict = {}
    rep = np.empty(len(row), dtype=np.intp)
    for i, key in enumerate(zip(r_idx.tolist(), c_idx.tolist())):
        rep[i] = seen.get(key, 0)
        seen[key] = rep[i] + 1
    return TwoWayLayout(r_idx, c_idx, rep, nr, nc, dyadic)


@dataclass(frozen=True, eq=False)
class GlobalPerm:
    n: int
    name = "global_perm"


@dataclass(frozen=True, eq=False)
class GlobalSign:
    n: int
    name = "global_sign"


@dataclass(frozen=True, eq=False)
class ClusterPerm:
    clustering: Clustering
    name = "perm"

    @property
    def n(self) -> int:
        return self.clustering.n


@dataclass(frozen=True, eq=False)
class ClusterSign:
    clustering: Clustering
    name = "sign"

    @property
    def n(self) -> int:
        return self.clustering.n


@dataclass(frozen=True, eq=False)
class Double:
    clustering: Clustering
    name = "double"

    @property
    def n(self) -> int:
        return self.clustering.n


@dataclass(frozen=True, eq=False)
class TwoWayPerm:
    layout: TwoWayLayout
    name = "twoway"

    def __post_init__(self):
        _twoway_tables(self.layout)

    @property
    def n(self) -> int:
        return self.layout.n


PrimitiveKind = Union[GlobalPerm, GlobalSign, ClusterPerm, ClusterSign, Double, TwoWayPerm]


@dataclass(frozen=True, eq=False)
class GroupElement:
    perm: np.ndarray
    sign: np.ndarray

    def __post_init__(self):
        perm = _ro(self.perm)
        sign = _ro(self.sign, dtype=np.int8)
        n = perm.size
        if sign.size != n:
            raise LayoutMismatch(f"perm has length {n}, sign has length {sign.size}")
        if not np.array_equal(np.sort(perm), np.arange(n)):
            raise InputError("perm is not a bijection of 0..n-1")
        if not np.all(np.abs(sign) == 1):
            raise InputError("signs must be +1 or -1")
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "sign", sign)

    @property
    def n(self) -> int:
        return self.perm.size

    def __eq__(self, other):
        return (
            isinstance(other, GroupElement)
            and np.array_equal(self.perm, other.perm)
            and np.array_equal(self.sign, other.sign)
        )

    def __hash__(self):
        return hash((self.perm.tobytes(), self.sign.tobytes()))


def identity(n: int) -> GroupElement:
    return GroupElement(np.arange(n), np.ones(n, dtype=np.int8))


def apply_element(g: GroupElement, u) -> np.ndarray:
    """``out[i] = sign[i] * u[perm[i]]``."""
    u = np.asarray(u)
    if u.shape[0] != g.n:
        raise LayoutMismatch(f"vector has length {u.shape[0]}, element acts on {g.n}")
    return g.sign.reshape((-1,) + (1,) * (u.ndim - 1)) * u[g.perm]


def compose(g: GroupElement, h: GroupElement) -> GroupElement:
    """The element acting as ``g`` after ``h``: ``apply(compose(g, h), u) == apply(g, apply(h, u))``."""
    if g.n != h.n:
        raise LayoutMismatch("elements act on different lengths")
    return GroupElement(h.perm[g.perm], g.sign * h.sign[g.perm])


def inverse(g: GroupElement) -> GroupElement:
    inv = np.argsort(g.perm)
    return GroupElement(inv, g.sign[inv])


# ---------------------------------------------------------------- sizes


def group_size(kind: PrimitiveKind):
    """Number of elements, or ``math.inf`` when it exceeds ``2**63 - 1``."""
    if isinstance(kind, GlobalPerm):
        return _saturate(math.factorial(kind.n))
    if isinstance(kind, GlobalSign):
        return _saturate(2**kind.n)
    if isinstance(kind, (ClusterPerm, ClusterSign, Double)):
        c = kind.clustering
        perms = 1
        if not isinstance(kind, ClusterSign):
            for s in c.sizes.tolist():
                perms *= math.factorial(s)
        signs = 2**c.J if not isinstance(kind, ClusterPerm) else 1
        return _saturate(perms * signs)
    if isinstance(kind, TwoWayPerm):
        lay = kind.layout
        if lay.dyadic:
            return _saturate(math.factorial(lay.row_count))
        return _saturate(math.factorial(lay.row_count) * math.factorial(lay.col_count))
    raise TypeError(f"unknown primitive {kind!r}")


def size_note(size) -> str:
    return "large" if size == math.inf else str(size)


# ---------------------------------------------------------------- two-way tables


def _twoway_tables(lay: TwoWayLayout):
    """Cell lookup table, validated for the requested permutation scheme."""
    if lay.replicated:
        raise LayoutMismatch("two-way permutation needs one observation per cell; average replicated cells first")
    cell = np.full((lay.row_count, lay.col_count), -1, dtype=np.intp)
    cell[lay.row_of, lay.col_of] = np.arange(lay.n)
    occupied = cell >= 0
    if not lay.dyadic:
        if not occupied.all():
            raise LayoutMismatch(
                f"{lay.n} observations on a {lay.row_count}x{lay.col_count} grid; a rectangular layout must be complete"
            )
        return cell
    diag = np.diag(occupied)
    if diag.any() and not diag.all():
        raise LayoutMismatch("dyadic layout occupies only part of the diagonal")
    iu = np.triu_indices(lay.row_count, k=1)
    counts = occupied[iu].astype(int) + occupied.T[iu].astype(int)
    if counts.size and not np.all(counts == counts[0]):
        raise LayoutMismatch("dyadic layout must record every node pair the same way")
    return cell


def _twoway_perm_from(cell, lay: TwoWayLayout, rperm, cperm):
    """Map a batch of row and column label permutations to unit permutations."""
    r = rperm[:, lay.row_of]
    c = cperm[:, lay.col_of]
    target = cell[r, c]
    if lay.dyadic:
        miss = target < 0
        if miss.any():
            target[miss] = cell[c[miss], r[miss]]
    return target


# ---------------------------------------------------------------- sampling


def _cluster_perms(c: Clustering, rng, size: int) -> np.ndarray:
    perms = np.tile(np.arange(c.n, dtype=np.intp), (size, 1))
    for idx in c.members:
        if idx.size < 2:
            continue
        local = rng.permuted(np.tile(np.arange(idx.size), (size, 1)), axis=1)
        perms[:, idx] = idx[local]
    return perms


def _cluster_signs_from(c: Clustering, flips: np.ndarray) -> np.ndarray:
    """Expand ``(size, J)`` cluster signs to ``(size, n)``; unclustered units get +1."""
    ext = np.concatenate([flips, np.ones((flips.shape[0], 1), dtype=np.int8)], axis=1)
    cols = np.where(c.assignment >= 0, c.assignment, c.J)
    return ext[:, cols]


def _random_signs(rng, shape) -> np.ndarray:
    return (1 - 2 * rng.integers(0, 2, size=shape)).astype(np.int8)


def sample_batch(kind: PrimitiveKind, rng: np.random.Generator, size: int):
    """Draw ``size`` elements uniformly; returns ``(perms, signs)`` of shape ``(size, n)``."""
    n = kind.n
    ident = np.tile(np.arange(n, dtype=np.intp), (size, 1))
    plus = np.ones((size, n), dtype=np.int8)
    if isinstance(kind, GlobalPerm):
        return rng.permuted(ident, axis=1), plus
    if isinstance(kind, GlobalSign):
        return ident, _random_signs(rng, (size, n))
    if isinstance(kind, ClusterPerm):
        return _cluster_perms(kind.clustering, rng, size), plus
    if isinstance(kind, ClusterSign):
        c = kind.clustering
        return ident, _cluster_signs_from(c, _random_signs(rng, (size, c.J)))
    if isinstance(kind, Double):
        c = kind.clustering
        perms = _cluster_perms(c, rng, size)
        return perms, _cluster_signs_from(c, _random_signs(rng, (size, c.J)))
    if isinstance(kind, TwoWayPerm):
        lay = kind.layout
        cell = _twoway_tables(lay)
        rperm = rng.permuted(np.tile(np.arange(lay.row_count), (size, 1)), axis=1)
        if lay.dyadic:
            cperm = rperm
        else:
            cperm = rng.permuted(np.tile(np.arange(lay.col_count), (size, 1)), axis=1)
        return _twoway_perm_from(cell, lay, rperm, cperm), plus
    raise TypeError(f"unknown primitive {kind!r}")


def sample_element(kind: PrimitiveKind, rng: np.random.Generator, n: Optional[int] = None) -> GroupElement:
    """One uniform draw.  ``n``, when given, must match the primitive's size."""
    if n is not None and n != kind.n:
        raise LayoutMismatch(f"primitive acts on {kind.n} units, {n} requested")
    perms, signs = sample_batch(kind, rng, 1)
    return GroupElement(perms[0], signs[0])


# ---------------------------------------------------------------- enumeration


def _all_sign_patterns(k: int) -> np.ndarray:
    """``(2**k, k)`` signs in binary counting order; bit j set means unit j flipped."""
    codes = np.arange(2**k)[:, None]
    return (1 - 2 * ((codes >> np.arange(k)) & 1)).astype(np.int8)


def _all_perms(k: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(k))), dtype=np.intp).reshape(-1, k)


def _all_cluster_perms(c: Clustering) -> np.ndarray:
    blocks = [idx[_all_perms(idx.size)] for idx in c.members]
    rows = []
    base = np.arange(c.n, dtype=np.intp)
    for combo in itertools.product(*blocks):
        p = base.copy()
        for idx, img in zip(c.members, combo):
            p[idx] = img
        rows.append(p)
    return np.array(rows, dtype=np.intp)


def enumerate_batch(kind: PrimitiveKind, cap: int = 100_000):
    """Every element as ``(perms, signs)`` arrays, identity first.

    Signs are listed in binary counting order, permutations lexicographically,
    and products sign-major (row permutation outer for two-way layouts).
    """
    size = group_size(kind)
    if size > cap:
        raise GroupTooLarge(f"group has {size_note(size)} elements, cap is {cap}")
    n = kind.n
    if isinstance(kind, GlobalPerm):
        perms = _all_perms(n)
        return perms, np.ones(perms.shape, dtype=np.int8)
    if isinstance(kind, GlobalSign):
        signs = _all_sign_patterns(n)
        return np.tile(np.arange(n), (signs.shape[0], 1)), signs
    if isinstance(kind, ClusterPerm):
        perms = _all_cluster_perms(kind.clustering)
        return perms, np.ones(perms.shape, dtype=np.int8)
    if isinstance(kind, ClusterSign):
        c = kind.clustering
        signs = _cluster_signs_from(c, _all_sign_patterns(c.J))
        return np.tile(np.arange(n), (signs.shape[0], 1)), signs
    if isinstance(kind, Double):
        c = kind.clustering
        signs = _cluster_signs_from(c, _all_sign_patterns(c.J))
        perms = _all_cluster_perms(c)
        return np.tile(perms, (signs.shape[0], 1)), np.repeat(signs, perms.shape[0], axis=0)
    if isinstance(kind, TwoWayPerm):
        lay = kind.layout
        cell = _twoway_tables(lay)
        rp = _all_perms(lay.row_count)
        if lay.dyadic:
            perms = _twoway_perm_from(cell, lay, rp, rp)
        else:
            cp = _all_perms(lay.col_count)
            rr = np.repeat(rp, cp.shape[0], axis=0)
            cc = np.tile(cp, (rp.shape[0], 1))
            perms = _twoway_perm_from(cell, lay, rr, cc)
        return perms, np.ones(perms.shape, dtype=np.int8)
    raise TypeError(f"unknown primitive {kind!r}")


def enumerate_elements(kind: PrimitiveKind, cap: int = 100_000) -> list:
    perms, signs = enumerate_batch(kind, cap)
    return [GroupElement(p, s) for p, s in zip(perms, signs)]


def iter_elements(kind: PrimitiveKind, cap: int = 100_000) -> Iterator[GroupElement]:
    perms, signs = enumerate_batch(kind, cap)
    for p, s in zip(perms, signs):
        yield GroupElement(p, s)


# ---------------------------------------------------------------- membership


def is_member(kind: PrimitiveKind, g: GroupElement) -> bool:
    """Whether ``g`` satisfies the structural constraints of ``kind``."""
    if g.n != kind.n:
        return False
    plus = bool(np.all(g.sign == 1))
    if isinstance(kind, GlobalPerm):
        return plus
    if isinstance(kind, GlobalSign):
        return bool(np.array_equal(g.perm, np.arange(g.n)))
    if isinstance(kind, (ClusterPerm, ClusterSign, Double)):
        c = kind.clustering
        a = c.assignment
        stays = bool(np.all(a[g.perm] == a)) and bool(np.all(g.perm[a < 0] == np.flatnonzero(a < 0)))
        const = all(np.unique(g.sign[idx]).size == 1 for idx in c.members) and bool(np.all(g.sign[a < 0] == 1))
        if isinstance(kind, ClusterPerm):
            return stays and plus
        if isinstance(kind, ClusterSign):
            return const and bool(np.array_equal(g.perm, np.arange(g.n)))
        return stays and const
    if isinstance(kind, TwoWayPerm):
        if not plus:
            return False
        lay = kind.layout
        cell = _twoway_tables(lay)
        dst_r = lay.row_of[g.perm]
        dst_c = lay.col_of[g.perm]
        if lay.dyadic:
            # Each node's image must lie in the target node pair of every dyad it touches.
            cand = [set(range(lay.row_count)) for _ in range(lay.row_count)]
            for r, c, a, b in zip(lay.row_of, lay.col_of, dst_r, dst_c):
                cand[r] &= {a, b}
                cand[c] &= {a, b}
            options = [sorted(x) for x in cand]
            for img in itertools.product(*options):
                if len(set(img)) != len(img):
                    continue
                pi = np.array(img, dtype=np.intp)[None, :]
                if np.array_equal(_twoway_perm_from(cell, lay, pi, pi)[0], g.perm):
                    return True
            return False
        rimg = np.full(lay.row_count, -1, dtype=np.intp)
        cimg = np.full(lay.col_count, -1, dtype=np.intp)
        rimg[lay.row_of] = dst_r
        cimg[lay.col_of] = dst_c
        if np.unique(rimg).size != lay.row_count or np.unique(cimg).size != lay.col_count:
            return False
        return bool(np.array_equal(_twoway_perm_from(cell, lay, rimg[None, :], cimg[None, :])[0], g.perm))
    raise TypeError(f"unknown primitive {kind!r}")


# ---------------------------------------------------------------- cell averaging


def average_cells(y, X, layout: TwoWayLayout):
    """Average replicated observations within each occupied cell.

    Returns ``(y_bar, X_bar, layout_bar)`` with one observation per cell, the
    transform to apply before a two-way permutation test on replicated data.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    keys = layout.row_of * layout.col_count + layout.col_of
    uniq, inv = np.unique(keys, return_inverse=True)
    counts = np.bincount(inv).astype(float)
    y_bar = np.bincount(inv, weights=y) / counts
    X_bar = np.column_stack([np.bincount(inv, weights=X[:, j]) / counts for j in range(X.shape[1])])
    rows = uniq // layout.col_count
    cols = uniq % layout.col_count
    lay = TwoWayLayout(rows, cols, np.zeros(uniq.size, dtype=np.intp), layout.row_count, layout.col_count, layout.dyadic)
    return y_bar, X_bar, lay

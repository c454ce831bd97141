"""Multi-indices, Hermite polynomials, Wick products and the Cameron-Martin basis.

The Gaussian variables ``xi_{k l}`` are indexed by a basis index ``k >= 1``
and a noise index ``l >= 1``. Inside a truncation set ``J_N^{n,r}`` the pair
``(k, l)`` is flattened to the variable number ``v = (k - 1) r + (l - 1)``, so
that sorting variable numbers sorts pairs lexicographically.

Hermite polynomials use the probabilists' convention (weight ``e^{-t^2/2}``),
``H_{n+1}(t) = t H_n(t) - n H_{n-1}(t)``; the physicists' polynomials differ
by a rescaling of the argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import groupby
from typing import Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np
from scipy.special import comb, ndtri

__all__ = [
    "MultiIndex",
    "TruncationSet",
    "GaussianSample",
    "HermiteFactor",
    "TruncationLimitError",
    "HERMITE_CAP",
    "hermite",
    "xi_alpha",
    "xi_matrix",
    "wick_product",
    "wick_multi",
    "enumerate_truncation",
    "truncation_cardinality",
    "characteristic_set",
    "sample_gaussians",
    "gaussian_block",
]

HERMITE_CAP = 30
DEFAULT_ENUM_LIMIT = 1_000_000


class TruncationLimitError(ValueError):
    """A truncation set would exceed the configured cardinality limit."""


@dataclass(frozen=True)
class MultiIndex:
    """Finitely supported map ``(k, l) -> alpha_{k l} > 0``.

    Stored as a tuple of ``((k, l), value)`` pairs sorted by ``(k, l)``.
    """

    entries: tuple = ()

    def __post_init__(self):
        clean = []
        for (k, l), v in sorted(self.entries):
            if int(k) != k or int(l) != l or k < 1 or l < 1:
                raise ValueError(f"indices must be positive integers, got {(k, l)}")
            if int(v) != v or v < 0:
                raise ValueError(f"entries must be nonnegative integers, got {v}")
            if v:
                clean.append(((int(k), int(l)), int(v)))
        keys = [key for key, _ in clean]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (k, l) entries")
        object.__setattr__(self, "entries", tuple(clean))

    @classmethod
    def zero(cls) -> "MultiIndex":
        return cls(())

    @classmethod
    def unit(cls, k: int, l: int = 1) -> "MultiIndex":
        return cls((((k, l), 1),))

    @classmethod
    def from_dict(cls, d: Mapping) -> "MultiIndex":
        return cls(tuple(d.items()))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]]) -> "MultiIndex":
        """Inverse of :meth:`characteristic_set`."""
        pairs = sorted(pairs)
        return cls(tuple((key, len(list(grp))) for key, grp in groupby(pairs)))

    @classmethod
    def from_matrix(cls, rows: Sequence[Sequence[int]]) -> "MultiIndex":
        """Build from a matrix whose row ``l-1`` holds ``alpha_{k l}`` for ``k = 1, 2, ...``."""
        ent = {}
        for l, row in enumerate(rows, start=1):
            for k, v in enumerate(row, start=1):
                if v:
                    ent[(k, l)] = v
        return cls.from_dict(ent)

    def __getitem__(self, key: tuple[int, int]) -> int:
        return dict(self.entries).get(tuple(key), 0)

    def __add__(self, other: "MultiIndex") -> "MultiIndex":
        d = dict(self.entries)
        for key, v in other.entries:
            d[key] = d.get(key, 0) + v
        return MultiIndex.from_dict(d)

    def __bool__(self) -> bool:
        return bool(self.entries)

    @property
    def length(self) -> int:
        """Total degree ``|alpha|``."""
        return sum(v for _, v in self.entries)

    @property
    def order(self) -> int:
        """Largest basis index ``k`` in the support (0 for the zero index)."""
        return max((k for (k, _), _ in self.entries), default=0)

    @property
    def dimension(self) -> int:
        """Largest noise index ``l`` in the support (0 for the zero index)."""
        return max((l for (_, l), _ in self.entries), default=0)

    @property
    def factorial(self) -> int:
        """``alpha! = prod alpha_{k l}!`` as an exact integer."""
        return math.prod(math.factorial(v) for _, v in self.entries)

    def characteristic_set(self) -> list[tuple[int, int]]:
        return [key for key, v in self.entries for _ in range(v)]

    def __str__(self) -> str:
        if not self.entries:
            return "(0)"
        return "+".join(
            (f"{v}*" if v > 1 else "") + f"e({k},{l})" for (k, l), v in self.entries
        )


def characteristic_set(alpha: MultiIndex) -> list[tuple[int, int]]:
    """Sorted ``(k, l)`` pairs, ``alpha_{k l}`` copies of each."""
    return alpha.characteristic_set()


# ---------------------------------------------------------------- Hermite


def hermite(n: int, t):
    """Probabilists' Hermite polynomial ``H_n(t)``, ``n <= 30``."""
    if int(n) != n or n < 0:
        raise ValueError(f"degree must be a nonnegative integer, got {n}")
    if n > HERMITE_CAP:
        raise ValueError(f"Hermite degree {n} exceeds cap {HERMITE_CAP}")
    t = np.asarray(t, dtype=float)
    h_prev, h = np.ones_like(t), t.copy()
    if n == 0:
        h = h_prev
    for j in range(1, int(n)):
        h_prev, h = h, t * h - j * h_prev
    return float(h) if h.ndim == 0 else h


def _normalized_hermite_table(x: np.ndarray, nmax: int) -> np.ndarray:
    """``H_d(x) / sqrt(d!)`` for ``d = 0..nmax``, stacked on a new leading axis."""
    if nmax > HERMITE_CAP:
        raise ValueError(f"Hermite degree {nmax} exceeds cap {HERMITE_CAP}")
    out = np.empty((nmax + 1,) + x.shape)
    out[0] = 1.0
    if nmax >= 1:
        out[1] = x
    # normalized recurrence avoids large factorials
    for d in range(1, nmax):
        out[d + 1] = (x * out[d] - math.sqrt(d) * out[d - 1]) / math.sqrt(d + 1)
    return out


@dataclass(frozen=True)
class HermiteFactor:
    """The factor ``H_degree(xi_{k l})``; degree 0 is the unit."""

    k: int
    l: int
    degree: int


def wick_product(a: HermiteFactor, b: HermiteFactor) -> tuple[HermiteFactor, ...]:
    """Wick product of two Hermite factors.

    Factors of the same variable add degrees; factors of distinct variables
    multiply ordinarily and are returned as a sorted pair. Unit factors drop
    out.
    """
    parts = [f for f in (a, b) if f.degree > 0]
    if not parts:
        return (HermiteFactor(a.k, a.l, 0),)
    if len(parts) == 2 and (a.k, a.l) == (b.k, b.l):
        return (HermiteFactor(a.k, a.l, a.degree + b.degree),)
    return tuple(sorted(parts, key=lambda f: (f.k, f.l)))


def wick_multi(alpha: MultiIndex, beta: MultiIndex) -> tuple[MultiIndex, float]:
    """``xi_alpha <> xi_beta = c xi_{alpha+beta}``; returns ``(alpha+beta, c)``.

    ``c = sqrt((alpha+beta)! / (alpha! beta!))`` from the normalisation of
    ``xi``.
    """
    gamma = alpha + beta
    return gamma, math.sqrt(gamma.factorial / (alpha.factorial * beta.factorial))


# ---------------------------------------------------------- truncation sets


def truncation_cardinality(N: int, n: int, r: int) -> int:
    """``sum_{j<=N} C(nr + j - 1, j)``."""
    D = n * r
    return sum(math.comb(D + j - 1, j) for j in range(N + 1))


def _extend_level(prev: np.ndarray, D: int) -> np.ndarray:
    """All nondecreasing tuples one longer than the rows of ``prev``, in lex order."""
    if prev.shape[1] == 0:
        return np.arange(D, dtype=np.int32)[:, None]
    last = prev[:, -1].astype(np.int64)
    counts = D - last
    rows = np.repeat(np.arange(len(prev)), counts)
    starts = np.cumsum(counts) - counts
    appended = last[rows] + (np.arange(counts.sum()) - starts[rows])
    return np.concatenate([prev[rows], appended[:, None].astype(np.int32)], axis=1)


@dataclass(frozen=True, eq=False)
class TruncationSet:
    """The set ``J_N^{n,r}`` in graded-lexicographic order.

    Level ``j`` holds the multi-indices of length ``j`` as an integer array of
    shape ``(count_j, j)``: each row lists the flattened variable numbers of
    the characteristic set in nondecreasing order. Rows are ordered
    lexicographically, and levels are concatenated by increasing length.
    """

    N: int
    n: int
    r: int
    levels: tuple = field(repr=False)

    @property
    def D(self) -> int:
        return self.n * self.r

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([len(x) for x in self.levels])])

    def __len__(self) -> int:
        return int(self.offsets[-1])

    def level_size(self, j: int) -> int:
        return len(self.levels[j])

    def var_to_pair(self, v) -> tuple:
        v = np.asarray(v)
        return v // self.r + 1, v % self.r + 1

    def pair_to_var(self, k: int, l: int) -> int:
        return (k - 1) * self.r + (l - 1)

    def alpha(self, index: int) -> MultiIndex:
        j = int(np.searchsorted(self.offsets, index, side="right") - 1)
        row = self.levels[j][index - self.offsets[j]]
        k, l = self.var_to_pair(row)
        return MultiIndex.from_pairs(zip(k.tolist(), l.tolist()))

    @cached_property
    def members(self) -> tuple:
        return tuple(self.alpha(i) for i in range(len(self)))

    def __iter__(self) -> Iterator[MultiIndex]:
        return iter(self.members)

    @cached_property
    def _binom(self) -> np.ndarray:
        top = self.D + self.N
        return comb(np.arange(top + 1)[:, None], np.arange(self.N + 1)[None, :], exact=False).round().astype(np.int64)

    def rank(self, rows: np.ndarray) -> np.ndarray:
        """Position within its level of each sorted variable tuple in ``rows``."""
        rows = np.asarray(rows, dtype=np.int64)
        cnt, j = rows.shape
        if j == 0:
            return np.zeros(cnt, dtype=np.int64)
        n_top = self.D + j - 1
        c = rows + np.arange(j)  # strictly increasing, lex order preserved
        B = self._binom
        total = B[n_top, j] - 1
        return total - sum(B[n_top - 1 - c[:, m], j - m] for m in range(j))

    def index_of(self, alpha: MultiIndex) -> int:
        if alpha.length > self.N or alpha.order > self.n or alpha.dimension > self.r:
            raise KeyError(f"{alpha} not in J_{self.N}^({self.n},{self.r})")
        row = np.array([[self.pair_to_var(k, l) for k, l in alpha.characteristic_set()]])
        row = row.reshape(1, alpha.length)
        return int(self.offsets[alpha.length] + self.rank(row)[0])

    def __contains__(self, alpha: MultiIndex) -> bool:
        try:
            self.index_of(alpha)
        except KeyError:
            return False
        return True

    def lengths(self) -> np.ndarray:
        """``|alpha|`` for every member."""
        return np.repeat(np.arange(self.N + 1), [len(x) for x in self.levels])

    def orders(self) -> np.ndarray:
        """``order(alpha)`` (largest basis index) for every member."""
        parts = [np.zeros(1, np.int64)]
        parts += [lv[:, -1].astype(np.int64) // self.r + 1 for lv in self.levels[1:]]
        return np.concatenate(parts)

    def dimensions(self) -> np.ndarray:
        """``dim(alpha)`` (largest noise index) for every member."""
        parts = [np.zeros(1, np.int64)]
        parts += [np.max(lv.astype(np.int64) % self.r, axis=1) + 1 for lv in self.levels[1:]]
        return np.concatenate(parts)

    def decompose(self, rows: np.ndarray) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
        """Decompositions ``alpha = parent + e_v`` for sorted variable tuples.

        ``rows`` is a block of one level, shape ``(count, j)``. Returns one
        entry per position ``m`` of the characteristic set:
        ``(local_rows, parent_rank, var, multiplicity)`` restricted to rows
        whose position ``m`` is the first occurrence of its variable, so each
        distinct ``v`` in ``alpha`` is listed once; ``multiplicity`` is
        ``alpha_v`` and ``parent_rank`` indexes the previous level.
        """
        X = np.asarray(rows, dtype=np.int64)
        out = []
        for m in range(X.shape[1]):
            first = np.ones(len(X), bool) if m == 0 else X[:, m] != X[:, m - 1]
            local = np.nonzero(first)[0]
            sub = X[local]
            var = sub[:, m]
            mult = np.sum(sub == var[:, None], axis=1)
            parent = np.delete(sub, m, axis=1)
            out.append((local, self.rank(parent), var, mult))
        return out

    def parents(self, j: int):
        """:meth:`decompose` applied to the whole of level ``j``."""
        return self.decompose(self.levels[j])


def enumerate_truncation(N: int, n: int, r: int, limit: Optional[int] = DEFAULT_ENUM_LIMIT) -> TruncationSet:
    """Enumerate ``J_N^{n,r}`` in graded-lexicographic order.

    Raises :class:`TruncationLimitError` when the cardinality exceeds
    ``limit`` (``None`` disables the guard).
    """
    if N < 0 or n < 1 or r < 1:
        raise ValueError("need N >= 0, n >= 1, r >= 1")
    size = truncation_cardinality(N, n, r)
    if limit is not None and size > limit:
        raise TruncationLimitError(
            f"|J_{N}^({n},{r})| = {size} exceeds the enumeration limit {limit}"
        )
    D = n * r
    levels = [np.zeros((1, 0), dtype=np.int32)]
    for _ in range(N):
        levels.append(_extend_level(levels[-1], D))
    return TruncationSet(N, n, r, tuple(levels))


# --------------------------------------------------------------- sampling

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def _counter_normals(seed: int, step: int, sample_ids: np.ndarray, D: int) -> np.ndarray:
    """Standard normals indexed by ``(seed, step, sample_id, variable)``.

    Each value is an inverse-CDF transform of a splitmix64-style hash of its
    counter tuple, so any subset can be regenerated independently.
    """
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
        h = _mix(h ^ _mix(np.uint64(step) + _GOLDEN))
        ids = np.asarray(sample_ids, dtype=np.uint64)[:, None]
        h = _mix(h ^ _mix(ids + _GOLDEN))
        h = _mix(h ^ _mix(np.arange(D, dtype=np.uint64)[None, :] + _GOLDEN))
    u = ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


@dataclass(frozen=True, eq=False)
class GaussianSample:
    """Draws of ``xi_{k l}``, ``k <= n``, ``l <= r``, for a batch of sample ids.

    ``values[s, k-1, l-1]`` is the draw for sample ``sample_ids[s]``.
    """

    values: np.ndarray
    seed: int
    sample_ids: np.ndarray
    step: int = 0

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def r(self) -> int:
        return self.values.shape[2]

    def __getitem__(self, key: tuple[int, int]) -> np.ndarray:
        k, l = key
        return self.values[:, k - 1, l - 1]

    def flat(self) -> np.ndarray:
        """Draws as ``(samples, n r)`` in flattened variable order."""
        return self.values.reshape(len(self.values), -1)


def sample_gaussians(n: int, r: int, seed: int, samples=1, step: int = 0) -> GaussianSample:
    """Counter-keyed standard normal draws of ``xi_{k l}``.

    ``samples`` is a count or an explicit sequence of sample ids. The draw for
    ``(k, l)`` and sample id ``s`` depends only on ``(seed, step, s, k, l)``.
    """
    ids = np.arange(samples) if np.ndim(samples) == 0 else np.asarray(samples)
    z = _counter_normals(seed, step, ids, n * r)
    return GaussianSample(z.reshape(len(ids), n, r), seed, ids, step)


def gaussian_block(seed: int, step: int, sample_ids, n: int, r: int) -> np.ndarray:
    """Flat ``(samples, n r)`` draws; shorthand used by the samplers."""
    return sample_gaussians(n, r, seed, sample_ids, step).flat()


def xi_alpha(alpha: MultiIndex, sample: GaussianSample):
    """``xi_alpha = prod H_{alpha_{kl}}(xi_{kl}) / sqrt(alpha_{kl}!)`` per sample."""
    if alpha.order > sample.n or alpha.dimension > sample.r:
        raise ValueError(f"sample ({sample.n}x{sample.r}) does not cover the support of {alpha}")
    out = np.ones(len(sample.values))
    for (k, l), v in alpha.entries:
        out = out * hermite(v, sample[k, l]) / math.sqrt(math.factorial(v))
    return out


def xi_matrix(trunc: TruncationSet, z: np.ndarray) -> np.ndarray:
    """``xi_alpha`` for every member of ``trunc``, shape ``(samples, |J|)``.

    ``z`` holds flattened draws ``(samples, n r)``, e.g. ``GaussianSample.flat()``.
    """
    z = np.asarray(z, dtype=float)
    if z.shape[1] < trunc.D:
        raise ValueError("draws do not cover the truncation set")
    table = _normalized_hermite_table(z[:, : trunc.D], trunc.N)  # (N+1, S, D)
    S = len(z)
    out = np.empty((S, len(trunc)))
    out[:, 0] = 1.0
    for j in range(1, trunc.N + 1):
        X = trunc.levels[j].astype(np.int64)
        block = np.ones((S, len(X)))
        for m in range(j):
            first = np.ones(len(X), bool) if m == 0 else X[:, m] != X[:, m - 1]
            rows = np.nonzero(first)[0]
            var = X[rows, m]
            mult = np.sum(X[rows] == var[:, None], axis=1)
            block[:, rows] *= table[mult, :, var].T
        out[:, trunc.offsets[j] : trunc.offsets[j + 1]] = block
    return out

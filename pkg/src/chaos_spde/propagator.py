"""Spectral setting on the torus and the recursive solve of the S-system.

Fields on ``[0, 2 pi)`` are stored as Fourier coefficients ``c_q`` of
``e^{iqx}``, ``q = -Q..Q``, so that ``A`` (Laplacian plus a constant shift) is
diagonal and its semigroup is exact. Norms follow Parseval on the torus:
``||v||_{H^r}^2 = 2 pi sum_q (1 + q^2)^r |c_q|^2``.

The coefficients ``u_alpha`` are computed level by level in ``|alpha|`` from
the Duhamel form

    u_alpha(t) = sum_{k,l} sqrt(alpha_{kl}) int_0^t Phi_{t-s} B_l u_{alpha - e_kl}(s) (K_l m_k)(s) ds,

with the integrand interpolated linearly between grid nodes and the
semigroup factor integrated exactly (exponential trapezoid rule).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._expint import linear_step_weights, phi12
from .basis import TimeGrid
from .chaos import TruncationSet
from .noise import NoiseSpec, kernel_basis

__all__ = [
    "SpectralField",
    "OperatorA",
    "OperatorB",
    "ChaosCoefficients",
    "NumericalGuardError",
    "semigroup_apply",
    "apply_B",
    "sobolev_norm",
    "sobolev_norm2",
    "solve_s_system",
]

log = logging.getLogger(__name__)

# cap on stored scalars (float64-equivalent) per solve
DEFAULT_MEMORY_LIMIT = 150_000_000
SUP_GRID_POINTS = 4096


class NumericalGuardError(RuntimeError):
    """A computation would exceed a resource or stability guard."""


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Real or complex function on the torus given by modes ``-Q..Q``."""

    coeffs: np.ndarray
    Q: int

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape != (2 * self.Q + 1,):
            raise ValueError(f"expected {2 * self.Q + 1} coefficients, got shape {c.shape}")
        object.__setattr__(self, "coeffs", c)

    @property
    def modes(self) -> np.ndarray:
        return np.arange(-self.Q, self.Q + 1)

    @classmethod
    def zeros(cls, Q: int) -> "SpectralField":
        return cls(np.zeros(2 * Q + 1, complex), Q)

    @classmethod
    def from_trig(cls, Q: int, sin=(), cos=()) -> "SpectralField":
        """``sum_j sin[j-1] sin(jx) + cos[0] + sum_j cos[j] cos(jx)``."""
        if len(sin) > Q or len(cos) > Q + 1:
            raise ValueError(f"trigonometric data exceed cutoff Q={Q}")
        c = np.zeros(2 * Q + 1, complex)
        for j, a in enumerate(sin, start=1):
            c[Q + j] += -0.5j * a
            c[Q - j] += 0.5j * a
        for j, a in enumerate(cos):
            if j == 0:
                c[Q] += a
            else:
                c[Q + j] += 0.5 * a
                c[Q - j] += 0.5 * a
        return cls(c, Q)

    @classmethod
    def from_function(cls, f, Q: int, points: int = 512) -> "SpectralField":
        """Project a callable ``f(x)`` onto modes ``|q| <= Q`` by FFT."""
        x = 2 * np.pi * np.arange(points) / points
        fhat = np.fft.fft(f(x)) / points
        q = np.arange(-Q, Q + 1)
        return cls(fhat[q % points], Q)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        vals = np.exp(1j * np.multiply.outer(x, self.modes)) @ self.coeffs
        return vals

    def real_values(self, x) -> np.ndarray:
        return np.real(self(x))

    def is_real(self, tol: float = 1e-12) -> bool:
        return bool(np.allclose(self.coeffs, np.conj(self.coeffs[::-1]), atol=tol))

    def truncate(self, Q: int) -> "SpectralField":
        if Q >= self.Q:
            c = np.zeros(2 * Q + 1, complex)
            c[Q - self.Q : Q + self.Q + 1] = self.coeffs
            return SpectralField(c, Q)
        return SpectralField(self.coeffs[self.Q - Q : self.Q + Q + 1], Q)

    def __add__(self, other: "SpectralField") -> "SpectralField":
        Q = max(self.Q, other.Q)
        return SpectralField(self.truncate(Q).coeffs + other.truncate(Q).coeffs, Q)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        return self + (-1.0) * other

    def __mul__(self, scalar) -> "SpectralField":
        return SpectralField(self.coeffs * scalar, self.Q)

    __rmul__ = __mul__

    def norm(self) -> float:
        return sobolev_norm(self, 0.0)

    def sup_norm(self, points: int = SUP_GRID_POINTS) -> float:
        x = 2 * np.pi * np.arange(points) / points
        return float(np.max(np.abs(self(x))))


def sobolev_norm2(v: SpectralField, r: float) -> float:
    """``2 pi sum_q (1 + q^2)^r |c_q|^2``, the squared ``H^r`` norm."""
    w = (1.0 + v.modes.astype(float) ** 2) ** r
    return float(np.sum(2 * np.pi * w * np.abs(v.coeffs) ** 2))


def sobolev_norm(v: SpectralField, r: float) -> float:
    """``sqrt(2 pi sum_q (1 + q^2)^r |c_q|^2)``."""
    return math.sqrt(sobolev_norm2(v, r))


@dataclass(frozen=True)
class OperatorA:
    """``A = d^2/dx^2 + c0`` on the torus, symbol ``a(q) = -q^2 + c0``.

    With ``X = H^1`` the parabolicity constants are ``delta_A = 1`` and
    ``C_A = 1 + c0``; ``c0 <= 1`` keeps ``||Phi_t v||^2 <= e^{C_A t} ||v||^2``.
    """

    c0: float = 0.0

    def __post_init__(self):
        if self.c0 > 1:
            raise ValueError("shift c0 must be <= 1 for the semigroup bound e^{C_A t}")

    def symbol(self, q) -> np.ndarray:
        return -np.asarray(q, dtype=float) ** 2 + self.c0

    @property
    def delta_A(self) -> float:
        return 1.0

    @property
    def C_A(self) -> float:
        return 1.0 + self.c0

    @property
    def C_02(self) -> float:
        """Constant in ``||A v||^2 <= C_02 ||v||_{H^2}^2``."""
        return (1.0 + abs(self.c0)) ** 2

    def apply(self, v: SpectralField) -> SpectralField:
        return SpectralField(self.symbol(v.modes) * v.coeffs, v.Q)


def semigroup_apply(A: OperatorA, t: float, v: SpectralField) -> SpectralField:
    """``Phi_t v``, exact per mode."""
    if t < 0:
        raise ValueError(f"semigroup time must be nonnegative, got {t}")
    return SpectralField(np.exp(A.symbol(v.modes) * t) * v.coeffs, v.Q)


@dataclass(frozen=True, eq=False)
class OperatorB:
    """Bounded operator on ``L2(torus)``: ``sigma * I`` or multiplication by ``h``."""

    kind: str
    sigma: float = 0.0
    h: Optional[SpectralField] = None

    def __post_init__(self):
        if self.kind not in ("diagonal", "multiplier"):
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.kind == "multiplier":
            if self.h is None:
                raise ValueError("multiplier operator needs h")
            if not self.h.is_real():
                raise ValueError("multiplier h must be a real function")

    @classmethod
    def diagonal(cls, sigma: float) -> "OperatorB":
        return cls("diagonal", sigma=float(sigma))

    @classmethod
    def multiplier(cls, h: SpectralField) -> "OperatorB":
        return cls("multiplier", h=h)

    @property
    def is_diagonal(self) -> bool:
        return self.kind == "diagonal"

    @property
    def C(self) -> float:
        """Operator norm on ``L2``: ``|sigma|`` or ``sup |h|`` on a fine grid."""
        if self.is_diagonal:
            return abs(self.sigma)
        return self.h.sup_norm()

    @property
    def C1(self) -> float:
        """Bound on the ``H^2`` operator norm.

        For a multiplier, ``(1+q^2) <= 2 (1+p^2)(1+(q-p)^2)`` and Young's
        inequality give ``2 sum_p (1+p^2) |h_p|``.
        """
        if self.is_diagonal:
            return abs(self.sigma)
        p = self.h.modes.astype(float)
        return float(2 * np.sum((1 + p**2) * np.abs(self.h.coeffs)))

    def matrix(self, Q: int) -> np.ndarray:
        """Action on modes ``-Q..Q`` as a ``(2Q+1, 2Q+1)`` matrix."""
        if self.is_diagonal:
            return self.sigma * np.eye(2 * Q + 1)
        q = np.arange(-Q, Q + 1)
        diff = q[:, None] - q[None, :]
        Qh = self.h.Q
        inside = np.abs(diff) <= Qh
        return np.where(inside, self.h.coeffs[np.clip(diff + Qh, 0, 2 * Qh)], 0.0)


def apply_B(B: OperatorB, v: SpectralField) -> SpectralField:
    """``B v``; multipliers act by circular convolution truncated to ``|q| <= Q``."""
    if B.is_diagonal:
        return SpectralField(B.sigma * v.coeffs, v.Q)
    return SpectralField(B.matrix(v.Q) @ v.coeffs, v.Q)


@dataclass(frozen=True, eq=False)
class ChaosCoefficients:
    """Chaos coefficients ``u_alpha(t)`` at selected grid nodes.

    ``values[a, i, p]`` is channel ``p`` of the coefficient of the ``a``-th
    member of ``trunc`` at time ``times[i]``. A channel maps to Fourier modes
    through ``mode_map`` (channel per mode, ``-1`` if unused) and
    ``mode_scale``: ``c_q = values[a, i, mode_map[q]] * mode_scale[q]``. In the
    diagonal case one real channel covers all modes sharing an eigenvalue of
    ``A``; otherwise each mode is its own complex channel.
    """

    values: np.ndarray
    times: np.ndarray
    node_index: np.ndarray
    trunc: TruncationSet
    Q: int
    mode_map: np.ndarray
    mode_scale: np.ndarray
    grid: TimeGrid

    @property
    def n_channels(self) -> int:
        return self.values.shape[-1]

    def channel_weights(self, r: float = 0.0) -> np.ndarray:
        """``w_p`` with ``||u_alpha||_{H^r}^2 = sum_p w_p |values[alpha, ., p]|^2``."""
        q = np.arange(-self.Q, self.Q + 1).astype(float)
        w = np.zeros(self.n_channels)
        used = self.mode_map >= 0
        np.add.at(
            w,
            self.mode_map[used],
            2 * np.pi * (1 + q[used] ** 2) ** r * np.abs(self.mode_scale[used]) ** 2,
        )
        return w

    def time_index(self, t: float) -> int:
        hits = np.nonzero(np.abs(self.times - t) <= 1e-9 * max(1.0, self.grid.T))[0]
        if not len(hits):
            raise KeyError(f"t={t} is not among the stored times")
        return int(hits[0])

    def field(self, alpha_index: int, time_index: int = -1) -> SpectralField:
        vals = self.values[alpha_index, time_index]
        c = np.zeros(2 * self.Q + 1, complex)
        used = self.mode_map >= 0
        c[used] = vals[self.mode_map[used]] * self.mode_scale[used]
        return SpectralField(c, self.Q)

    def norms_squared(self, time_index: int = -1, r: float = 0.0) -> np.ndarray:
        """``||u_alpha(t)||_{H^r}^2`` for every member, in truncation order."""
        w = self.channel_weights(r)
        return np.abs(self.values[:, time_index, :]) ** 2 @ w

    def fields_at(self, time_index: int = -1) -> np.ndarray:
        """Spectral coefficients of every member, shape ``(|J|, 2Q+1)``."""
        vals = self.values[:, time_index, :]
        out = np.zeros((len(vals), 2 * self.Q + 1), complex)
        used = np.nonzero(self.mode_map >= 0)[0]
        out[:, used] = vals[:, self.mode_map[used]] * self.mode_scale[used]
        return out


@dataclass
class _Channels:
    rates: np.ndarray
    x0: np.ndarray
    mode_map: np.ndarray
    mode_scale: np.ndarray
    dtype: type
    diag_sigma: Optional[np.ndarray] = None
    matrices: list = field(default_factory=list)


def _channels(A: OperatorA, B_list: Sequence[OperatorB], u0: SpectralField, full: bool) -> _Channels:
    Q = u0.Q
    q = u0.modes
    if not full:
        support = np.nonzero(np.abs(u0.coeffs) > 0)[0]
        rates_all = A.symbol(q)
        distinct = sorted(set(rates_all[support].tolist()), reverse=True)
        mode_map = np.full(2 * Q + 1, -1)
        for i in support:
            mode_map[i] = distinct.index(rates_all[i])
        return _Channels(
            rates=np.array(distinct, dtype=float),
            x0=np.ones(len(distinct)),
            mode_map=mode_map,
            mode_scale=u0.coeffs.copy(),
            dtype=float,
            diag_sigma=np.array([B.sigma for B in B_list], dtype=float),
        )
    return _Channels(
        rates=A.symbol(q),
        x0=u0.coeffs.copy(),
        mode_map=np.arange(2 * Q + 1),
        mode_scale=np.ones(2 * Q + 1, complex),
        dtype=complex,
        matrices=[B.matrix(Q) for B in B_list],
    )


def solve_s_system(
    A: OperatorA,
    B_list: Sequence[OperatorB],
    noises: Sequence[NoiseSpec],
    u0: SpectralField,
    trunc: TruncationSet,
    grid: TimeGrid,
    keep=None,
    F: Optional[SpectralField] = None,
    G: Optional[Sequence[Optional[SpectralField]]] = None,
    threads: int = 1,
    chunk: int = 4096,
    memory_limit: int = DEFAULT_MEMORY_LIMIT,
    full_spectrum: Optional[bool] = None,
) -> ChaosCoefficients:
    """Solve the truncated S-system on ``grid``.

    Parameters
    ----------
    A, B_list, noises
        Operators and noises; at least ``trunc.r`` of each.
    u0 : SpectralField
        Deterministic initial condition.
    trunc : TruncationSet
    grid : TimeGrid
        Time grid; its horizon must match the noises.
    keep : sequence of int, optional
        Node indices at which coefficients are returned (default all).
    F, G : SpectralField, optional
        Time-independent deterministic forcing of the ``|alpha| = 0`` and
        ``|alpha| = 1`` equations.
    threads : int
        Worker threads for chunks of one level. Chunk boundaries do not
        depend on this value, so results are bit-identical.
    full_spectrum : bool, optional
        Force the per-mode complex representation. By default it is used
        only when some ``B`` is a multiplier or forcing is present.

    Returns
    -------
    ChaosCoefficients
    """
    r = trunc.r
    if len(B_list) < r or len(noises) < r:
        raise ValueError(f"truncation uses {r} noises but {len(B_list)} operators / {len(noises)} noises given")
    B_list, noises = list(B_list)[:r], list(noises)[:r]
    for nz in noises:
        if abs(nz.T - grid.T) > 1e-12 * grid.T:
            raise ValueError(f"noise horizon {nz.T} differs from grid horizon {grid.T}")
    if G is not None:
        G = list(G) + [None] * (r - len(G))
    forcing = F is not None or (G is not None and any(g is not None for g in G))
    if full_spectrum is None:
        full_spectrum = forcing or not all(B.is_diagonal for B in B_list)
    if forcing and not full_spectrum:
        raise ValueError("forcing requires the full-spectrum representation")
    keep = np.arange(grid.M + 1) if keep is None else np.asarray(sorted(set(int(i) for i in keep)))
    if keep.min() < 0 or keep.max() > grid.M:
        raise ValueError("keep indices outside the grid")

    ch = _channels(A, B_list, u0, full_spectrum)
    P = len(ch.rates)
    scalar_size = 2 if ch.dtype is complex else 1
    N, n = trunc.N, trunc.n
    stored = len(trunc) * len(keep) * P * scalar_size
    # level j-1 and level j live at all nodes, plus two chunk work arrays
    live = max(
        (trunc.level_size(j - 1) + (trunc.level_size(j) if j < N else 0) for j in range(1, N + 1)),
        default=1,
    )
    level_peak = (live + 2 * min(chunk, max(trunc.level_size(j) for j in range(N + 1)))) * (grid.M + 1) * P * scalar_size
    if stored + level_peak > memory_limit:
        raise NumericalGuardError(
            f"solve would hold about {stored + level_peak:.3g} scalars "
            f"(limit {memory_limit:.3g}); reduce the truncation, the grid or the kept nodes"
        )

    t = grid.nodes
    gk = np.stack([kernel_basis(nz, n, grid) for nz in noises])  # (r, n, M+1)
    E, w0, w1 = linear_step_weights(ch.rates, grid.h)
    out = np.zeros((len(trunc), len(keep), P), dtype=ch.dtype)

    # level 0: exact semigroup (plus the exact response to constant F)
    lev = np.exp(np.outer(t, ch.rates)).astype(ch.dtype) * ch.x0
    if F is not None:
        p1, _ = phi12(np.outer(t, ch.rates))
        lev = lev + (t[:, None] * p1) * F.truncate(u0.Q).coeffs
    lev = lev[None]
    out[0] = lev[0, keep]
    Gc = None
    if G is not None:
        Gc = [None if g is None else g.truncate(u0.Q).coeffs for g in G]

    for j in range(1, N + 1):
        X = trunc.levels[j]
        size = len(X)
        last = j == N
        nxt = None if last else np.empty((size, grid.M + 1, P), dtype=ch.dtype)
        bounds = [(a, min(size, a + chunk)) for a in range(0, size, chunk)]

        def work(ab, lev=lev, X=X, j=j):
            a, b = ab
            S = np.zeros((b - a, grid.M + 1, P), dtype=ch.dtype)
            for local, parent, var, mult in trunc.decompose(X[a:b]):
                k, l = var // r, var % r
                g = gk[l, k] * np.sqrt(mult)[:, None]  # (c, M+1)
                Bu = lev[parent]
                if ch.diag_sigma is not None:
                    Bu = Bu * ch.diag_sigma[l][:, None, None]
                else:
                    Bu = Bu.copy()
                    for li in np.unique(l):
                        sel = l == li
                        Bu[sel] = Bu[sel] @ ch.matrices[li].T
                S[local] += g[:, :, None] * Bu
                if j == 1 and Gc is not None:
                    for li in np.unique(l):
                        if Gc[li] is not None:
                            sel = l == li
                            S[local[sel]] += g[sel][:, :, None] * Gc[li]
            U = np.zeros_like(S)
            for i in range(grid.M):
                U[:, i + 1] = E * U[:, i] + w0 * S[:, i] + w1 * S[:, i + 1]
            return a, b, U

        def store(res):
            a, b, U = res
            out[trunc.offsets[j] + a : trunc.offsets[j] + b] = U[:, keep]
            if nxt is not None:
                nxt[a:b] = U

        if threads > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for res in pool.map(work, bounds):
                    store(res)
        else:
            for ab in bounds:
                store(work(ab))
        log.debug("level %d: %d coefficients", j, size)
        lev = nxt

    return ChaosCoefficients(
        values=out,
        times=t[keep],
        node_index=keep,
        trunc=trunc,
        Q=u0.Q,
        mode_map=ch.mode_map,
        mode_scale=ch.mode_scale,
        grid=grid,
    )

"""Colored-noise representation operators on L2((0, T)).

Three noises are supported, each given by a Volterra representation
operator ``K`` with ``X(f) = int (K* f) dW``:

* white noise, ``K = I``;
* Ornstein-Uhlenbeck noise, ``(K f)(t) = f(t) - b int_0^t e^{-b(t-s)} f(s) ds``;
* H-fractional noise, ``(K f)(t) = int_0^t c_H (t/s)^{H-1/2} (t-s)^{H-3/2} f(s) ds``
  with ``c_H = C_H (H - 1/2)``, so that ``X(chi_t)`` is fractional Brownian
  motion.

The functions ``M_k(t) = int_0^t (K m_k)(s) ds`` of the cosine basis drive the
basis-truncation error of the chaos expansion; their decay in ``k`` is
summarised by :class:`RateExponents`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.integrate import IntegrationWarning, quad
from scipy.interpolate import CubicSpline
from scipy.special import beta as beta_fn
from scipy.special import betainc, gamma, hyp2f1

from ._expint import linear_step_weights
from .basis import TimeGrid, basis_matrix, cumulative_integral

__all__ = [
    "NoiseSpec",
    "RateExponents",
    "apply_K",
    "kernel_basis",
    "m_tilde",
    "m_tilde_table",
    "m_tilde_quadrature",
    "m_tilde_parseval",
    "variance_function",
    "covariance_function",
    "operator_norm_bound",
    "rate_exponents",
    "fractional_constant",
    "decay_constants",
]

WHITE, OU, FRACTIONAL = "white", "ou", "fractional"

# quadrature grid used for fractional M_k when the caller gives none
DEFAULT_NODES_PER_UNIT_TIME = 1024


@dataclass(frozen=True)
class NoiseSpec:
    """One colored noise on ``L2((0, T))``.

    Build with :meth:`white`, :meth:`ou` or :meth:`fractional`.
    """

    kind: str
    T: float = 1.0
    b: Optional[float] = None
    H: Optional[float] = None

    def __post_init__(self):
        if self.kind not in (WHITE, OU, FRACTIONAL):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if self.kind == OU and not (self.b is not None and self.b > 0):
            raise ValueError("Ornstein-Uhlenbeck noise needs b > 0")
        if self.kind == FRACTIONAL and not (self.H is not None and 0.5 < self.H < 1):
            raise ValueError("fractional noise needs 1/2 < H < 1")

    @classmethod
    def white(cls, T: float = 1.0) -> "NoiseSpec":
        return cls(WHITE, T)

    @classmethod
    def ou(cls, b: float, T: float = 1.0) -> "NoiseSpec":
        return cls(OU, T, b=float(b))

    @classmethod
    def fractional(cls, H: float, T: float = 1.0) -> "NoiseSpec":
        return cls(FRACTIONAL, T, H=float(H))

    def with_horizon(self, T: float) -> "NoiseSpec":
        return NoiseSpec(self.kind, T, self.b, self.H)

    def default_grid(self) -> TimeGrid:
        return TimeGrid(self.T, max(64, int(math.ceil(DEFAULT_NODES_PER_UNIT_TIME * self.T))))

    def label(self) -> str:
        if self.kind == OU:
            return f"ou(b={self.b:g})"
        if self.kind == FRACTIONAL:
            return f"fractional(H={self.H:g})"
        return "white"


@dataclass(frozen=True)
class RateExponents:
    """Decay exponents of ``sup_t |M_k(t)|^2`` and ``|M_k(T)|^2``.

    ``delta1 = gamma1 = None`` flags an endpoint tail that vanishes
    identically (white noise with the cosine basis).
    """

    delta: float
    gamma: float
    delta1: Optional[float] = None
    gamma1: Optional[float] = None

    def __post_init__(self):
        if not (self.delta > 0 and self.gamma > 1):
            raise ValueError("need delta > 0 and gamma > 1")
        if (self.delta1 is None) != (self.gamma1 is None):
            raise ValueError("delta1 and gamma1 must both be set or both be None")
        if self.delta1 is not None and not (self.delta1 > 0 and self.gamma1 > 1):
            raise ValueError("need delta1 > 0 and gamma1 > 1")

    @property
    def endpoint_vanishes(self) -> bool:
        return self.delta1 is None


def fractional_constant(H: float) -> float:
    """``C_H`` normalising the fractional kernel to unit-variance fBm at t=1."""
    return math.sqrt(2 * H * gamma(1.5 - H) / (gamma(H + 0.5) * gamma(2 - 2 * H)))


def _check_grid(f, grid: TimeGrid, noise: NoiseSpec) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != grid.M + 1:
        raise ValueError(f"samples have {f.shape[-1]} nodes, grid has {grid.M + 1}")
    if abs(grid.T - noise.T) > 1e-12 * noise.T:
        raise ValueError(f"grid horizon {grid.T} differs from noise horizon {noise.T}")
    return f


@lru_cache(maxsize=6)
def _fractional_weights(H: float, T: float, M: int) -> np.ndarray:
    """Product-integration matrix ``W`` with ``(K f)(t_i) = sum_j W[i, j] f_j``.

    The kernel is integrated exactly (incomplete beta functions) against the
    piecewise-linear interpolant of ``f``; both endpoint singularities
    ``s^{1/2-H}`` and ``(t-s)^{H-3/2}`` are therefore handled analytically.
    """
    p, q = 0.5 - H, H - 1.5
    a0, a1, bq = p + 1, p + 2, q + 1
    b0, b1 = beta_fn(a0, bq), beta_fn(a1, bq)
    c = fractional_constant(H) * (H - 0.5)
    h = T / M
    s = np.arange(M + 1) * h
    W = np.zeros((M + 1, M + 1))
    block = max(1, 2_000_000 // (M + 1))
    for start in range(1, M + 1, block):
        rows = np.arange(start, min(M + 1, start + block))
        t = s[rows][:, None]
        x = np.minimum(s[None, :] / t, 1.0)
        # cumulative moments int_0^{s_j} s^p (t-s)^q ds and the same with s^{p+1}
        F0 = t ** (p + q + 1) * b0 * betainc(a0, bq, x)
        F1 = t ** (p + q + 2) * b1 * betainc(a1, bq, x)
        A0 = np.diff(F0, axis=1)
        A1 = np.diff(F1, axis=1)
        j = np.arange(M)[None, :]
        valid = j < rows[:, None]
        A0 = np.where(valid, A0, 0.0)
        A1 = np.where(valid, A1, 0.0)
        left = (s[1:][None, :] * A0 - A1) / h
        right = (A1 - s[:-1][None, :] * A0) / h
        Wr = np.zeros((len(rows), M + 1))
        Wr[:, :-1] += left
        Wr[:, 1:] += right
        W[rows] = c * t ** (H - 0.5) * Wr
    W.setflags(write=False)
    return W


def _ou_linear(f: np.ndarray, b: float, grid: TimeGrid) -> np.ndarray:
    E, w0, w1 = linear_step_weights(-b, grid.h)
    y = np.zeros_like(f)
    for i in range(grid.M):
        y[..., i + 1] = E * y[..., i] + w0 * f[..., i] + w1 * f[..., i + 1]
    return f - b * y


_GL_X, _GL_W = np.polynomial.legendre.leggauss(12)


def _ou_cubic(f: np.ndarray, b: float, grid: TimeGrid) -> np.ndarray:
    h = grid.h
    tau = 0.5 * h * (_GL_X + 1.0)
    wts = 0.5 * h * _GL_W * np.exp(-b * (h - tau))
    # mu[j] = int_0^h e^{-b(h - tau)} tau^j d tau
    mu = np.array([np.sum(wts * tau ** (3 - j)) for j in range(4)])
    coef = CubicSpline(grid.nodes, f, axis=-1).c  # (4, M, ...) highest power first
    incr = np.tensordot(mu, coef, axes=(0, 0))  # (M, ...)
    incr = np.moveaxis(incr, 0, -1)
    E = math.exp(-b * h)
    y = np.zeros_like(f)
    for i in range(grid.M):
        y[..., i + 1] = E * y[..., i] + incr[..., i]
    return f - b * y


def apply_K(noise: NoiseSpec, f, grid: Optional[TimeGrid] = None, method: str = "linear"):
    """Apply the representation operator to samples of ``f`` on ``grid``.

    Parameters
    ----------
    noise : NoiseSpec
    f : array_like
        Samples on the grid nodes; leading axes are treated as a batch.
    grid : TimeGrid, optional
        Defaults to ``noise.default_grid()``.
    method : {"linear", "cubic"}
        Interpolant of ``f`` used inside the product integration. ``"cubic"``
        is fourth order and is available for white and OU noise only.

    Returns
    -------
    ndarray
        ``(K f)(t_i)`` with the same shape as ``f``.
    """
    grid = grid or noise.default_grid()
    f = _check_grid(f, grid, noise)
    if method not in ("linear", "cubic"):
        raise ValueError(f"unknown method {method!r}")
    if noise.kind == WHITE:
        return f.copy()
    if noise.kind == OU:
        return _ou_linear(f, noise.b, grid) if method == "linear" else _ou_cubic(f, noise.b, grid)
    if method == "cubic":
        raise NotImplementedError("cubic product integration is not available for fractional noise")
    W = _fractional_weights(noise.H, grid.T, grid.M)
    return np.einsum("ij,...j->...i", W, f)


def _closed_form_m_tilde(noise: NoiseSpec, ks: np.ndarray, t: np.ndarray) -> np.ndarray:
    T = noise.T
    ks = np.asarray(ks)[:, None]
    t = np.asarray(t, dtype=float)[None, :]
    km1 = ks - 1
    if noise.kind == WHITE:
        safe = np.where(km1 == 0, 1, km1)
        out = np.sqrt(2 * T) / (np.pi * safe) * np.sin(np.pi * km1 * t / T)
        return np.where(km1 == 0, t / np.sqrt(T), out)
    b = noise.b
    w = np.pi * km1 / T
    out = (
        np.sqrt(2 * T**3)
        / (b**2 * T**2 + km1**2 * np.pi**2)
        * (b * np.cos(w * t) - b * np.exp(-b * t) + w * np.sin(w * t))
    )
    first = (1 - np.exp(-b * t)) / (b * np.sqrt(T))
    return np.where(km1 == 0, first, out)


def kernel_basis(noise: NoiseSpec, n: int, grid: Optional[TimeGrid] = None) -> np.ndarray:
    """``(K m_k)(t_i)`` for ``k = 1..n``, shape ``(n, M+1)``.

    White and OU use closed forms (for OU, ``K m_k = m_k - b M_k``); the
    fractional case uses product integration.
    """
    grid = grid or noise.default_grid()
    _check_grid(np.zeros(grid.M + 1), grid, noise)
    m = basis_matrix(n, grid)
    if noise.kind == WHITE:
        return m
    if noise.kind == OU:
        return m - noise.b * _closed_form_m_tilde(noise, np.arange(1, n + 1), grid.nodes)
    return apply_K(noise, m, grid)


def m_tilde_quadrature(
    noise: NoiseSpec, n: int, grid: Optional[TimeGrid] = None, method: str = "linear"
) -> np.ndarray:
    """``M_k(t_i)`` by quadrature of the definition, shape ``(n, M+1)``.

    Applies ``K`` to the sampled basis numerically and integrates in time;
    no closed form is used, so this serves as the independent route for white
    and OU noise.
    """
    grid = grid or noise.default_grid()
    km = apply_K(noise, basis_matrix(n, grid), grid, method=method)
    return cumulative_integral(km, grid, method=method)


def m_tilde_table(noise: NoiseSpec, n: int, grid: Optional[TimeGrid] = None) -> np.ndarray:
    """``M_k(t_i)`` for ``k = 1..n`` on the grid nodes, shape ``(n, M+1)``."""
    grid = grid or noise.default_grid()
    if noise.kind == FRACTIONAL:
        return m_tilde_quadrature(noise, n, grid)
    return _closed_form_m_tilde(noise, np.arange(1, n + 1), grid.nodes)


def _fractional_kstar_chi(H: float, t: float):
    """``(K* chi_t)(u)`` divided by ``u^{1/2-H} (t-u)^{H-1/2}``.

    ``(K* chi_t)(u) = c_H u^{H-1/2} int_{u/t}^1 y^{-2H} (1-y)^{H-3/2} dy`` is
    expressed through Gauss hypergeometric functions, expanded about the
    nearer endpoint so that neither branch overflows.
    """
    c = fractional_constant(H) * (H - 0.5)
    b, a = H - 0.5, 1.0 - 2 * H
    f_half = 0.5**b / b * hyp2f1(2 * H, b, b + 1, 0.5)
    g_half = 0.5**a / a * hyp2f1(a, 1 - b, a + 1, 0.5)

    def g(u: float) -> float:
        x = u / t
        if x >= 0.5:
            return c * u ** (2 * H - 1) * t ** (-b) * hyp2f1(2 * H, b, b + 1, 1 - x) / b
        lead = u ** (2 * H - 1) * (f_half + g_half) - t ** (2 * H - 1) / a * hyp2f1(a, 1 - b, a + 1, x)
        return c * (t - u) ** (-b) * lead

    return g


def _fractional_m_tilde_point(noise: NoiseSpec, k: int, t: float) -> float:
    """``M_k(t) = int_0^t m_k(u) (K* chi_t)(u) du`` by algebraic-weight quadrature."""
    if t <= 0:
        return 0.0
    H, T = noise.H, noise.T
    g = _fractional_kstar_chi(H, t)
    if k == 1:
        mk = lambda u: g(u) / math.sqrt(T)
    else:
        w = math.pi * (k - 1) / T
        mk = lambda u: g(u) * math.sqrt(2.0 / T) * math.cos(w * u)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        val, _ = quad(
            mk, 0.0, t, weight="alg", wvar=(0.5 - H, H - 0.5), limit=500,
            epsabs=1e-14, epsrel=1e-12,
        )
    return val


def m_tilde(noise: NoiseSpec, k: int, t):
    """``M_k(t) = int_0^t (K m_k)(s) ds``.

    Closed forms for white and OU noise. The fractional case is evaluated as
    ``int_0^t m_k(u) (K* chi_t)(u) du`` with the inner kernel integral in
    hypergeometric form and adaptive quadrature for the endpoint singularities.
    """
    if int(k) != k or k < 1:
        raise ValueError(f"basis index must be a positive integer, got {k}")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > noise.T * (1 + 1e-12)):
        raise ValueError(f"t outside [0, {noise.T}]")
    if noise.kind == FRACTIONAL:
        flat = [_fractional_m_tilde_point(noise, int(k), float(x)) for x in t_arr.ravel()]
        out = np.array(flat).reshape(t_arr.shape)
    else:
        out = _closed_form_m_tilde(noise, np.array([int(k)]), t_arr.ravel())[0].reshape(t_arr.shape)
    return float(out) if np.ndim(out) == 0 else out


def m_tilde_parseval(noise: NoiseSpec, n: int, t):
    """Partial Parseval sum ``V_n(t) = sum_{k<=n} M_k(t)^2``.

    Increases in ``n`` towards ``Var X(t)`` (see :func:`variance_function`).
    """
    t_arr = np.asarray(t, dtype=float)
    if noise.kind == FRACTIONAL:
        tab = np.array([np.atleast_1d(m_tilde(noise, k, t_arr.ravel())) for k in range(1, n + 1)])
    else:
        tab = _closed_form_m_tilde(noise, np.arange(1, n + 1), t_arr.ravel())
    out = np.sum(tab**2, axis=0).reshape(t_arr.shape)
    return float(out) if np.ndim(out) == 0 else out


def variance_function(noise: NoiseSpec, t):
    """``Var X(t) = ||K* chi_t||^2``, the Parseval limit of ``V_n(t)``."""
    t = np.asarray(t, dtype=float)
    if noise.kind == WHITE:
        out = t
    elif noise.kind == OU:
        out = -np.expm1(-2 * noise.b * t) / (2 * noise.b)
    else:
        out = t ** (2 * noise.H)
    return float(out) if out.ndim == 0 else out


def covariance_function(noise: NoiseSpec, t, s):
    """``E X(t) X(s)`` for ``X(t) = X(chi_t)`` under the representation above."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if noise.kind == WHITE:
        out = np.minimum(t, s)
    elif noise.kind == OU:
        b = noise.b
        out = (np.exp(-b * np.abs(t - s)) - np.exp(-b * (t + s))) / (2 * b)
    else:
        h2 = 2 * noise.H
        out = 0.5 * (t**h2 + s**h2 - np.abs(t - s) ** h2)
    return float(out) if out.ndim == 0 else out


def operator_norm_bound(noise: NoiseSpec) -> float:
    """Upper bound on the L2 operator norm of ``K``."""
    if noise.kind == WHITE:
        return 1.0
    if noise.kind == OU:
        return 1.0 + math.sqrt(noise.b * noise.T)
    H = noise.H
    c1 = H * (2 * H - 1) * gamma(H - 0.5) / gamma(H + 0.5)
    return math.sqrt(c1) * noise.T ** (H - 0.5)


def rate_exponents(noise: NoiseSpec) -> RateExponents:
    """Decay exponents of ``M_k`` for the cosine basis."""
    if noise.kind == WHITE:
        return RateExponents(1.0, 2.0)
    if noise.kind == OU:
        return RateExponents(1.0, 2.0, 3.0, 4.0)
    H = noise.H
    return RateExponents(2 * H, 3 - 2 * H, 2 * H, 3 - 2 * H)


@lru_cache(maxsize=64)
def decay_constants(noise: NoiseSpec, k_max: int = 64, M: int = 1024) -> tuple[float, float]:
    """Empirical constants ``(C, C1)`` in the decay assumptions on ``M_k``.

    ``C = max_k sup_t |M_k(t)|^2 k^gamma / T^delta`` and
    ``C1 = max_k |M_k(T)|^2 k^gamma1 / T^delta1`` over ``2 <= k <= k_max``,
    with the supremum in ``t`` taken over ``M + 1`` grid nodes. Truncation
    tails only involve ``k > n >= 1``, so ``k = 1`` is excluded (for OU noise
    ``M_1(T)^2 ~ T`` would otherwise spoil the ``T^3`` scaling). ``C1`` is 0
    when the endpoint tail vanishes identically.
    """
    rates = rate_exponents(noise)
    grid = TimeGrid(noise.T, M)
    tab = m_tilde_table(noise, k_max, grid)[1:]
    k = np.arange(2, k_max + 1)
    T = noise.T
    c = float(np.max(np.max(tab**2, axis=1) * k**rates.gamma) / T**rates.delta)
    if rates.endpoint_vanishes:
        return c, 0.0
    c1 = float(np.max(tab[:, -1] ** 2 * k**rates.gamma1) / T**rates.delta1)
    return c, c1

"""Cosine basis of L2((0, T)), indicator functions and grid quadrature."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicSpline

__all__ = [
    "TimeGrid",
    "BasisFunction",
    "eval_basis",
    "basis_matrix",
    "chi",
    "inner_product",
    "cumulative_integral",
    "trapezoid_convergence",
]


class GridMismatchError(ValueError):
    """Two sampled functions do not live on the same time grid."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of ``[0, T]`` into ``M`` subintervals."""

    T: float
    M: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got T={self.T}")
        if int(self.M) != self.M or self.M < 2:
            raise ValueError(f"need at least 2 subintervals, got M={self.M}")
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "T", float(self.T))

    @property
    def h(self) -> float:
        return self.T / self.M

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.M + 1) * self.h
        t[-1] = self.T
        return t

    def refine(self) -> "TimeGrid":
        return TimeGrid(self.T, 2 * self.M)

    def coarsen(self) -> "TimeGrid":
        if self.M % 2:
            raise ValueError("cannot coarsen a grid with an odd number of intervals")
        return TimeGrid(self.T, self.M // 2)

    def node_index(self, t: float) -> int:
        """Index of the node equal to ``t`` (to rounding)."""
        i = int(round(t / self.h))
        if i < 0 or i > self.M or abs(i * self.h - t) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"t={t} is not a node of {self}")
        return i


@dataclass(frozen=True)
class BasisFunction:
    k: int
    T: float

    def __call__(self, t):
        return eval_basis(self.k, t, self.T)


def eval_basis(k: int, t, T: float):
    """Evaluate the k-th cosine basis function on ``[0, T]``.

    ``m_1 = 1/sqrt(T)`` and ``m_k(t) = sqrt(2/T) cos(pi (k-1) t / T)`` for
    ``k > 1``. Accepts scalar or array ``t``; raises ``ValueError`` outside the
    interval.
    """
    if int(k) != k or k < 1:
        raise ValueError(f"basis index must be a positive integer, got {k}")
    t_arr = np.asarray(t, dtype=float)
    tol = 1e-12 * max(1.0, T)
    if np.any(t_arr < -tol) or np.any(t_arr > T + tol):
        raise ValueError(f"t outside [0, {T}]")
    if k == 1:
        out = np.full_like(t_arr, 1.0 / np.sqrt(T))
    else:
        out = np.sqrt(2.0 / T) * np.cos(np.pi * (k - 1) * t_arr / T)
    return float(out) if out.ndim == 0 else out


def basis_matrix(n: int, grid: TimeGrid) -> np.ndarray:
    """Rows ``m_1 .. m_n`` sampled on the grid nodes, shape ``(n, M+1)``."""
    t = grid.nodes
    ks = np.arange(n)[:, None]
    out = np.sqrt(2.0 / grid.T) * np.cos(np.pi * ks * t[None, :] / grid.T)
    out[0] = 1.0 / np.sqrt(grid.T)
    return out


def chi(t, s):
    """Indicator of ``[0, t]`` evaluated at ``s`` (closed at both ends)."""
    s = np.asarray(s, dtype=float)
    out = ((s >= 0) & (s <= t)).astype(float)
    return float(out) if out.ndim == 0 else out


def _check_samples(f, grid: TimeGrid) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != grid.M + 1:
        raise GridMismatchError(
            f"sampled function has {f.shape[-1]} values, grid has {grid.M + 1} nodes"
        )
    return f


def inner_product(f, g, grid: TimeGrid) -> float:
    """Composite trapezoid approximation of the L2((0, T)) pairing.

    Leading axes broadcast, so ``inner_product(m[:, None], m[None], grid)``
    is the Gram matrix of the rows of ``m``.
    """
    f = _check_samples(f, grid)
    g = _check_samples(g, grid)
    try:
        np.broadcast_shapes(f.shape, g.shape)
    except ValueError:
        raise GridMismatchError(f"sample shapes {f.shape} and {g.shape} do not broadcast") from None
    w = np.full(grid.M + 1, grid.h)
    w[0] = w[-1] = 0.5 * grid.h
    return np.sum(f * g * w, axis=-1)


def cumulative_integral(f, grid: TimeGrid, method: str = "linear") -> np.ndarray:
    """Running integral ``int_0^{t_i} f`` at every node.

    ``"linear"`` is the composite trapezoid rule; ``"cubic"`` integrates the
    not-a-knot cubic spline through the samples (fourth order for smooth f).
    """
    f = _check_samples(f, grid)
    if method == "linear":
        return cumulative_trapezoid(f, dx=grid.h, axis=-1, initial=0.0)
    if method == "cubic":
        spline = CubicSpline(grid.nodes, f, axis=-1)
        return spline.antiderivative()(grid.nodes)
    raise ValueError(f"unknown integration method {method!r}")


def trapezoid_convergence(func, T: float, M: int) -> tuple[float, float, float]:
    """Grid-doubling audit of the trapezoid rule for ``int_0^T func``.

    Returns ``(I_M, I_2M, err)`` where ``err = |I_2M - I_M| / 3`` is the
    Richardson estimate of the error left in ``I_2M``.
    """
    coarse = TimeGrid(T, M)
    fine = coarse.refine()
    i_m = float(inner_product(func(coarse.nodes), np.ones(M + 1), coarse))
    i_2m = float(inner_product(func(fine.nodes), np.ones(2 * M + 1), fine))
    return i_m, i_2m, abs(i_2m - i_m) / 3.0

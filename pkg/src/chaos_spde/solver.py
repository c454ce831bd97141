"""Moments, realizations, truncation errors, error bounds and the multistep scheme."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .basis import TimeGrid
from .chaos import (
    DEFAULT_ENUM_LIMIT,
    GaussianSample,
    TruncationLimitError,
    TruncationSet,
    enumerate_truncation,
    gaussian_block,
    truncation_cardinality,
    xi_matrix,
)
from .noise import NoiseSpec, RateExponents, decay_constants, operator_norm_bound, rate_exponents
from .propagator import (
    ChaosCoefficients,
    OperatorA,
    OperatorB,
    SpectralField,
    solve_s_system,
    sobolev_norm2,
)

__all__ = [
    "MomentReport",
    "ErrorBudget",
    "Theorem45Bound",
    "MultistepResult",
    "second_moment",
    "moment_reports",
    "sample_realization",
    "sample_realizations",
    "mc_second_moment",
    "truncation_tail",
    "build_budget",
    "bound_theorem_3_1",
    "bound_corollary_3_3",
    "bound_level",
    "bound_theorem_4_1",
    "bound_theorem_4_2",
    "bound_overall",
    "bound_theorem_4_5",
    "error_sweep",
    "multistep_solve",
    "multistep_error",
]

log = logging.getLogger(__name__)

MC_CHUNK = 1000


# ------------------------------------------------------------------ moments


@dataclass(frozen=True, eq=False)
class MomentReport:
    """Second moment ``E||u(t)||^2 = sum_alpha ||u_alpha(t)||^2`` at one time."""

    t: float
    second_moment: float
    per_level: dict
    mean_field: SpectralField


def second_moment(coeffs: ChaosCoefficients, time_index: int = -1) -> MomentReport:
    """Exact Parseval sum over the stored coefficients, grouped by ``|alpha|``."""
    norms = coeffs.norms_squared(time_index)
    off = coeffs.trunc.offsets
    per_level = {j: float(np.sum(norms[off[j] : off[j + 1]])) for j in range(coeffs.trunc.N + 1)}
    return MomentReport(
        t=float(coeffs.times[time_index]),
        second_moment=float(sum(per_level.values())),
        per_level=per_level,
        mean_field=coeffs.field(0, time_index),
    )


def moment_reports(coeffs: ChaosCoefficients) -> list[MomentReport]:
    return [second_moment(coeffs, i) for i in range(len(coeffs.times))]


def _flat_draws(coeffs: ChaosCoefficients, sample: GaussianSample) -> np.ndarray:
    tr = coeffs.trunc
    if sample.n < tr.n or sample.r < tr.r:
        raise ValueError(
            f"sample covers (n={sample.n}, r={sample.r}) but the truncation needs (n={tr.n}, r={tr.r})"
        )
    return sample.values[:, : tr.n, : tr.r].reshape(len(sample.values), tr.n * tr.r)


def sample_realizations(coeffs: ChaosCoefficients, sample: GaussianSample, time_index: int = -1) -> np.ndarray:
    """``sum_alpha u_alpha(t) xi_alpha`` for each draw, shape ``(samples, 2Q+1)``."""
    xi = xi_matrix(coeffs.trunc, _flat_draws(coeffs, sample))
    return xi @ coeffs.fields_at(time_index)


def sample_realization(coeffs: ChaosCoefficients, sample: GaussianSample, time_index: int = -1) -> SpectralField:
    """Realized field for a single-draw sample."""
    if len(sample.values) != 1:
        raise ValueError("sample_realization takes a single draw; use sample_realizations")
    return SpectralField(sample_realizations(coeffs, sample, time_index)[0], coeffs.Q)


def _chunked(total: int, chunk: int) -> list[np.ndarray]:
    return [np.arange(a, min(total, a + chunk)) for a in range(0, total, chunk)]


def _map(fn, items, threads: int):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def mc_second_moment(
    coeffs: ChaosCoefficients,
    seed: int,
    samples: int,
    time_index: int = -1,
    threads: int = 1,
    chunk: int = MC_CHUNK,
) -> tuple[float, float, np.ndarray]:
    """Monte Carlo estimate of ``E||u(t)||^2`` from realizations.

    Returns ``(mean, standard_error, mean_field_coefficients)``. Chunks are
    reduced in a fixed order, so the result does not depend on ``threads``.
    """
    tr = coeffs.trunc
    fields = coeffs.fields_at(time_index)

    def run(ids):
        z = gaussian_block(seed, 0, ids, tr.n, tr.r)
        u = xi_matrix(tr, z) @ fields
        e = 2 * np.pi * np.sum(np.abs(u) ** 2, axis=1)
        return e.sum(), (e**2).sum(), u.sum(axis=0)

    parts = _map(run, _chunked(samples, chunk), threads)
    s1 = s2 = 0.0
    mean_field = np.zeros(2 * coeffs.Q + 1, complex)
    for a, b, c in parts:
        s1, s2, mean_field = s1 + a, s2 + b, mean_field + c
    mean = s1 / samples
    var = max(s2 / samples - mean**2, 0.0) * samples / max(samples - 1, 1)
    return mean, math.sqrt(var / samples), mean_field / samples


# ------------------------------------------------------- truncation errors


def truncation_tail(coeffs: ChaosCoefficients, N: int, n: int, r: int, time_index=-1):
    """Orthogonal error components of ``u_N^{n,r}`` against a reference.

    ``coeffs`` is a solve on a reference set containing ``J_N^{n,r}``; the
    reference stands in for the exact solution. Returns
    ``(tail_N, tail_n, tail_r)``: the energy of members with ``|alpha| > N``;
    with ``|alpha| <= N`` and order ``> n``; and with ``|alpha| <= N``,
    order ``<= n`` and dimension ``> r``. ``time_index`` may be an array, in
    which case each component is an array over those times.
    """
    tr = coeffs.trunc
    if N > tr.N or n > tr.n or r > tr.r:
        raise ValueError(
            f"reference J_{tr.N}^({tr.n},{tr.r}) does not contain target J_{N}^({n},{r})"
        )
    w = coeffs.channel_weights()
    e = np.abs(coeffs.values[:, time_index, :]) ** 2 @ w
    length, order, dim = tr.lengths(), tr.orders(), tr.dimensions()
    low = length <= N
    in_n = low & (order <= n)
    return (
        e[~low].sum(axis=0),
        e[low & (order > n)].sum(axis=0),
        e[in_n & (dim > r)].sum(axis=0),
    )


# ------------------------------------------------------------------ bounds


@dataclass(frozen=True)
class ErrorBudget:
    """Constants entering the error bounds.

    ``kappa[l]`` bounds the norm of ``K_l``; ``C[l]`` and ``C1[l]`` bound
    ``B_l`` on ``L2`` and ``H^2``. ``c_tilde``/``c_tilde1`` are the empirical
    constants of the decay assumptions on ``M_k`` (per noise). ``C_o`` is 1
    without forcing and 3 otherwise.
    """

    T: float
    C_A: float
    delta_A: float
    C_02: float
    kappa: tuple
    C: tuple
    C1: tuple
    rates: tuple
    c_tilde: tuple
    c_tilde1: tuple
    u0_norm2: float
    u0_H2_norm2: Optional[float]
    I0: float
    C_o: float = 1.0

    def __post_init__(self):
        n = len(self.kappa)
        if not (len(self.C) == len(self.C1) == len(self.rates) == n):
            raise ValueError("per-noise constants have inconsistent lengths")
        if not all(math.isfinite(x) for x in self.kappa + self.C):
            raise ValueError("C_B must be finite")

    @property
    def C_B(self) -> float:
        return float(sum(k**2 * c**2 for k, c in zip(self.kappa, self.C)))

    @property
    def C_1B(self) -> float:
        return float(sum(k**2 * c**2 for k, c in zip(self.kappa, self.C1)))

    @property
    def C_bar_B(self) -> float:
        return max(self.C_B, self.C_1B)

    def eps(self, r: int) -> float:
        """``sum_{l > r} kappa_l^2 C_l^2``."""
        return float(sum(k**2 * c**2 for k, c in list(zip(self.kappa, self.C))[r:]))

    def as_dict(self) -> dict:
        return {
            "T": self.T,
            "C_A": self.C_A,
            "delta_A": self.delta_A,
            "C_02": self.C_02,
            "C_B": self.C_B,
            "C_1B": self.C_1B,
            "C_bar_B": self.C_bar_B,
            "C_o": self.C_o,
            "I0": self.I0,
            "u0_norm2": self.u0_norm2,
            "u0_H2_norm2": self.u0_H2_norm2,
        }


def build_budget(
    A: OperatorA,
    B_list: Sequence[OperatorB],
    noises: Sequence[NoiseSpec],
    u0: SpectralField,
    F: Optional[SpectralField] = None,
    G: Optional[Sequence[Optional[SpectralField]]] = None,
) -> ErrorBudget:
    """Collect every constant of the bounds for one configuration."""
    if len(B_list) != len(noises):
        raise ValueError("need one operator B per noise")
    T = noises[0].T
    if any(abs(nz.T - T) > 1e-12 * T for nz in noises):
        raise ValueError("all noises must share the horizon")
    kappa = tuple(operator_norm_bound(nz) for nz in noises)
    decay = [decay_constants(nz) for nz in noises]
    I0 = sobolev_norm2(u0, 0)
    if F is not None:
        I0 += 2 / A.delta_A * T * sobolev_norm2(F, -1)
    if G is not None:
        I0 += sum(k**2 * T * sobolev_norm2(g, 0) for k, g in zip(kappa, G) if g is not None)
    forcing = F is not None or (G is not None and any(g is not None for g in G))
    return ErrorBudget(
        T=T,
        C_A=A.C_A,
        delta_A=A.delta_A,
        C_02=A.C_02,
        kappa=kappa,
        C=tuple(B.C for B in B_list),
        C1=tuple(B.C1 for B in B_list),
        rates=tuple(rate_exponents(nz) for nz in noises),
        c_tilde=tuple(d[0] for d in decay),
        c_tilde1=tuple(d[1] for d in decay),
        u0_norm2=sobolev_norm2(u0, 0),
        u0_H2_norm2=sobolev_norm2(u0, 2),
        I0=I0,
        C_o=3.0 if forcing else 1.0,
    )


def bound_theorem_3_1(b: ErrorBudget) -> float:
    """``C_o e^{(C_A + C_B) T} I_0``."""
    return b.C_o * math.exp((b.C_A + b.C_B) * b.T) * b.I0


def _poisson_term(x: float, k: int) -> float:
    """``x^k / k!`` without overflow."""
    if x == 0:
        return 0.0 if k > 0 else 1.0
    return math.exp(k * math.log(x) - math.lgamma(k + 1))


def bound_corollary_3_3(b: ErrorBudget, N: int) -> float:
    """``(C_B T)^{N+1} / (N+1)! e^{(C_A + C_B) T} ||u0||^2``."""
    return _poisson_term(b.C_B * b.T, N + 1) * math.exp((b.C_A + b.C_B) * b.T) * b.u0_norm2


def bound_level(b: ErrorBudget, k: int) -> float:
    """Per-level bound ``C_o e^{C_A T} (C_B T)^k / k! ||u0||^2`` (no forcing)."""
    return b.C_o * math.exp(b.C_A * b.T) * _poisson_term(b.C_B * b.T, k) * b.u0_norm2


def _order_term(b: ErrorBudget, n: int, endpoint: bool, shift: float = 0.0) -> float:
    """``max_l c_l T^{delta_l + shift} / ((gamma_l - 1) n^{gamma_l - 1})``.

    The factor ``1/(gamma - 1)`` bounds ``sum_{k>n} k^{-gamma}`` by its integral.
    """
    best = 0.0
    for rates, c, c1 in zip(b.rates, b.c_tilde, b.c_tilde1):
        if endpoint:
            if rates.endpoint_vanishes:
                continue
            d, g, const = rates.delta1, rates.gamma1, c1
        else:
            d, g, const = rates.delta, rates.gamma, c
        best = max(best, const * b.T ** (d + shift) / ((g - 1) * n ** (g - 1)))
    return best


def bound_theorem_4_1(b: ErrorBudget, n: int) -> tuple[float, float]:
    """Order-truncation bounds ``(uniform in t, at t = T)``.

    ``C_1B e^{(C_A + Cbar_B) T} (C_B a(n) ||u0||^2 + C_02 C_1B b(n) ||u0||_{H^2}^2)``
    where ``a(n)``, ``b(n)`` are the decay terms ``T^delta / n^{gamma-1}`` and
    ``T^{delta+2} / n^{gamma-1}``, each multiplied by the empirical decay
    constant and the tail-sum factor ``1/(gamma-1)``. The endpoint bound uses
    ``(delta1, gamma1)`` in its first term, which vanishes for white noise.
    """
    if b.u0_H2_norm2 is None:
        raise ValueError("order-truncation bound needs ||u0||_{H^2}")
    pre = b.C_1B * math.exp((b.C_A + b.C_bar_B) * b.T)
    second = b.C_02 * b.C_1B * _order_term(b, n, False, 2.0) * b.u0_H2_norm2
    uniform = pre * (b.C_B * _order_term(b, n, False) * b.u0_norm2 + second)
    endpoint = pre * (b.C_B * _order_term(b, n, True) * b.u0_norm2 + second)
    return uniform, endpoint


def bound_theorem_4_2(b: ErrorBudget, r: int) -> float:
    """``eps(r) T e^{(C_A + C_B) T} ||u0||^2``."""
    return b.eps(r) * b.T * math.exp((b.C_A + b.C_B) * b.T) * b.u0_norm2


def bound_overall(b: ErrorBudget, N: int, n: int, r: int) -> tuple[float, float]:
    """Sum of the level, order and dimension bounds ``(uniform, endpoint)``."""
    c = bound_corollary_3_3(b, N)
    uni, end = bound_theorem_4_1(b, n)
    d = bound_theorem_4_2(b, r)
    return c + uni + d, c + end + d


@dataclass(frozen=True)
class Theorem45Bound:
    """Multistep error bounds.

    ``printed`` carries the middle term ``(tau^delta + 1) / n^{gamma-1}``,
    ``variant`` uses ``tau^{delta+1}`` instead; both are scaled by the
    unspecified constant ``C_T``. ``composed`` is fully explicit: the one-step
    endpoint bound on ``[0, tau]`` propagated through ``K`` steps with the
    moment growth factor.
    """

    printed: float
    variant: float
    composed: float
    C_T: float


def bound_theorem_4_5(b_tau: ErrorBudget, N: int, n: int, r: int, T: float, C_T: float = 1.0) -> Theorem45Bound:
    """Bounds on ``max_j E||u(t_j) - u_N^{n,r}(t_j)||^2`` for step ``tau = b_tau.T``.

    ``b_tau`` is the budget of the one-step problem on ``[0, tau]``.
    """
    tau = b_tau.T
    K = int(round(T / tau))
    if K < 1 or abs(K * tau - T) > 1e-9 * T:
        raise ValueError("T must be a positive multiple of the step")
    lvl = _poisson_term(tau * b_tau.C_B, N) / (N + 1) * b_tau.u0_norm2
    end = 0.0
    mid_p = mid_v = 0.0
    for rates in b_tau.rates:
        if not rates.endpoint_vanishes:
            end = max(end, tau ** (rates.delta1 - 1) / n ** (rates.gamma1 - 1))
        mid_p = max(mid_p, (tau**rates.delta + 1) / n ** (rates.gamma - 1))
        mid_v = max(mid_v, tau ** (rates.delta + 1) / n ** (rates.gamma - 1))
    end *= b_tau.u0_norm2
    eps = b_tau.eps(r) * b_tau.u0_norm2
    printed = C_T * (lvl + end + mid_p * b_tau.u0_H2_norm2 + eps)
    variant = C_T * (lvl + end + mid_v * b_tau.u0_H2_norm2 + eps)
    local = bound_overall(b_tau, N, n, r)[1]
    composed = K * math.exp((b_tau.C_A + b_tau.C_bar_B) * (T - tau)) * local
    return Theorem45Bound(printed, variant, composed, C_T)


# ------------------------------------------------------------------ sweeps


def error_sweep(
    A: OperatorA,
    B_list: Sequence[OperatorB],
    noises: Sequence[NoiseSpec],
    u0: SpectralField,
    Ns: Sequence[int],
    ns: Sequence[int],
    r: int,
    grid: TimeGrid,
    report: Optional[Sequence[int]] = None,
    threads: int = 1,
    enum_limit: Optional[int] = None,
    memory_limit: Optional[int] = None,
) -> list[dict]:
    """Measured truncation errors and bounds over a grid of ``(N, n)``.

    Enriched references replace the exact solution: ``(max N + 2, n_l)`` for
    the level and dimension tails and ``(max N, 2 n)`` for the order tail at
    each swept ``n``, all with every noise. ``n_l`` is the largest order up to
    ``max n`` whose set fits ``enum_limit``; level energies grow with the order, so a smaller
    ``n_l`` slightly underestimates the level tail. The dimension tail at
    orders above ``n_l`` is taken at ``n_l``.
    Errors are reported at ``t = T`` and as a maximum over the ``report``
    node indices (default: nine equispaced nodes).
    """
    r_full = len(noises)
    report = np.linspace(0, grid.M, 9).round().astype(int) if report is None else np.asarray(report)
    kw = {} if memory_limit is None else {"memory_limit": memory_limit}
    Nmax, nmax = max(Ns), max(ns)
    limit = DEFAULT_ENUM_LIMIT if enum_limit is None else enum_limit
    lim = {"limit": limit}
    fits = [m for m in range(nmax, 0, -1) if truncation_cardinality(Nmax + 2, m, r_full) <= limit]
    if not fits:
        raise TruncationLimitError(f"no level reference J_{Nmax + 2}^(n,{r_full}) fits the limit {limit}")
    n_lvl = fits[0]
    ref_N = solve_s_system(
        A, B_list, noises, u0, enumerate_truncation(Nmax + 2, n_lvl, r_full, **lim), grid,
        keep=report, threads=threads, **kw,
    )
    ref_n = {
        m: solve_s_system(
            A, B_list, noises, u0, enumerate_truncation(Nmax, 2 * m, r_full, **lim), grid,
            keep=report, threads=threads, **kw,
        )
        for m in sorted(set(ns))
    }
    budget = build_budget(A, B_list, noises, u0)
    idx = np.arange(len(report))
    sup_moment = max(second_moment(ref_N, i).second_moment for i in idx)
    rows = []
    for N in Ns:
        for n in ns:
            tN, _, tr_ = truncation_tail(ref_N, N, min(n, n_lvl), r, idx)
            _, tn, _ = truncation_tail(ref_n[n], N, n, r_full, idx)
            ou, oe = bound_overall(budget, N, n, r)
            uni41, end41 = bound_theorem_4_1(budget, n)
            rows.append(
                {
                    "N": N,
                    "n": n,
                    "r": r,
                    "tail_N_T": float(tN[-1]),
                    "tail_N_sup": float(tN.max()),
                    "tail_n_T": float(tn[-1]),
                    "tail_n_sup": float(tn.max()),
                    "tail_r_T": float(tr_[-1]),
                    "tail_r_sup": float(tr_.max()),
                    "error_T": float(tN[-1] + tn[-1] + tr_[-1]),
                    "error_sup": float((tN + tn + tr_).max()),
                    "moment_sup": sup_moment,
                    "bound_3_1": bound_theorem_3_1(budget),
                    "bound_3_3": bound_corollary_3_3(budget, N),
                    "bound_4_1_uniform": uni41,
                    "bound_4_1_endpoint": end41,
                    "bound_4_2": bound_theorem_4_2(budget, r),
                    "bound_overall_uniform": ou,
                    "bound_overall_endpoint": oe,
                }
            )
    return rows


# --------------------------------------------------------------- multistep


@dataclass(frozen=True, eq=False)
class MultistepResult:
    """Per-step results of the step-by-step scheme at ``t_j = j tau``.

    ``exact`` holds ``E||u(t_j)||^2`` from the moment recursion (diagonal
    operators only, else ``None``); ``mc_mean``/``mc_stderr`` the Monte Carlo
    estimate; ``mc_mean_field`` the sample mean of the realized fields;
    ``final_fields`` the realized spectra at ``T``.
    """

    times: np.ndarray
    exact: Optional[np.ndarray]
    mc_mean: Optional[np.ndarray]
    mc_stderr: Optional[np.ndarray]
    mc_mean_field: Optional[np.ndarray]
    final_fields: Optional[np.ndarray]
    transfer: np.ndarray
    diagonal: bool
    Q: int


def _transfer(A, B_list, noises_tau, u0, trunc, grid_tau, threads):
    """One-step maps ``f -> u_alpha(tau; f)``.

    Diagonal case: ``(|J|, 2Q+1)`` multipliers per mode, zero off the
    support of ``u0``. Otherwise a
    ``(|J|, 2Q+1, 2Q+1)`` matrix per member.
    """
    Q = u0.Q
    diagonal = all(B.is_diagonal for B in B_list)
    if diagonal:
        # modes outside the support of u0 stay zero under diagonal operators
        unit = SpectralField((u0.coeffs != 0).astype(complex), Q)
        c = solve_s_system(A, B_list, noises_tau, unit, trunc, grid_tau, keep=[grid_tau.M], threads=threads)
        return c.fields_at(-1).real, True
    cols = []
    for q in range(2 * Q + 1):
        e = np.zeros(2 * Q + 1, complex)
        e[q] = 1.0
        c = solve_s_system(
            A, B_list, noises_tau, SpectralField(e, Q), trunc, grid_tau, keep=[grid_tau.M], threads=threads
        )
        cols.append(c.fields_at(-1))
    return np.stack(cols, axis=2), False


def multistep_solve(
    A: OperatorA,
    B_list: Sequence[OperatorB],
    noises: Sequence[NoiseSpec],
    u0: SpectralField,
    trunc: TruncationSet,
    K: int,
    T: float,
    M: int,
    samples: int = 0,
    seed: int = 0,
    exact: bool = True,
    threads: int = 1,
    keep_fields: int = 0,
) -> MultistepResult:
    """Step-by-step approximation on a uniform partition with ``K`` steps.

    Every step solves the S-system on ``[0, tau]`` (noises restarted with
    horizon ``tau``, ``M`` subintervals) and contracts with a fresh Gaussian
    block; block ``j`` uses counter ``step = j`` of the generator.

    Parameters
    ----------
    samples : int
        Monte Carlo sample count (0 skips the MC path).
    exact : bool
        Run the exact moment recursion; needs diagonal operators.
    keep_fields : int
        Number of final realized spectra to return.
    """
    if K < 1:
        raise ValueError("need at least one step")
    r = trunc.r
    B_list, noises = list(B_list)[:r], list(noises)[:r]
    tau = T / K
    noises_tau = [nz.with_horizon(tau) for nz in noises]
    L, diagonal = _transfer(A, B_list, noises_tau, u0, trunc, TimeGrid(tau, M), threads)
    if exact and not diagonal:
        raise ValueError("the exact-moment path needs diagonal operators B")
    times = tau * np.arange(K + 1)
    Q = u0.Q
    w0 = 2 * np.pi * np.abs(u0.coeffs) ** 2

    ex = None
    if exact:
        rho = np.sum(L**2, axis=0)
        ex = np.array([float(np.sum(w0 * rho**j)) for j in range(K + 1)])

    mc_mean = mc_se = mc_field = finals = None
    if samples > 0:

        def run(ids):
            U = np.broadcast_to(u0.coeffs, (len(ids), 2 * Q + 1)).copy()
            e1 = np.zeros(K + 1)
            e2 = np.zeros(K + 1)
            mf = np.zeros((K + 1, 2 * Q + 1), complex)
            en = 2 * np.pi * np.sum(np.abs(U) ** 2, axis=1)
            e1[0], e2[0], mf[0] = en.sum(), (en**2).sum(), U.sum(axis=0)
            for j in range(1, K + 1):
                xi = xi_matrix(trunc, gaussian_block(seed, j, ids, trunc.n, r))
                if diagonal:
                    U = (xi @ L) * U
                else:
                    U = np.einsum("sa,aqp,sp->sq", xi, L, U)
                en = 2 * np.pi * np.sum(np.abs(U) ** 2, axis=1)
                e1[j], e2[j], mf[j] = en.sum(), (en**2).sum(), U.sum(axis=0)
            return e1, e2, mf, U[: max(0, keep_fields - int(ids[0]))]

        parts = _map(run, _chunked(samples, MC_CHUNK), threads)
        s1 = sum(p[0] for p in parts)
        s2 = sum(p[1] for p in parts)
        mc_field = sum(p[2] for p in parts) / samples
        mc_mean = s1 / samples
        var = np.maximum(s2 / samples - mc_mean**2, 0.0) * samples / max(samples - 1, 1)
        mc_se = np.sqrt(var / samples)
        finals = np.concatenate([p[3] for p in parts])[:keep_fields] if keep_fields else None

    return MultistepResult(times, ex, mc_mean, mc_se, mc_field, finals, L, diagonal, Q)


def multistep_error(
    A: OperatorA,
    B_list: Sequence[OperatorB],
    noises: Sequence[NoiseSpec],
    u0: SpectralField,
    N: int,
    n: int,
    r: int,
    K: int,
    T: float,
    M: int,
    threads: int = 1,
    enum_limit: Optional[int] = DEFAULT_ENUM_LIMIT,
) -> float:
    """``E||u(T) - u_N^{n,r}(T)||^2`` of the multistep scheme, diagonal operators.

    The reference is the same scheme on ``J_N^{2n,r}``. Per mode the
    second moments compose multiplicatively, so the error is
    ``sum_q w_q (rho_ref^K - rho^K)`` with the per-step factors ``rho``.
    """
    small = enumerate_truncation(N, n, r, limit=enum_limit)
    ref = enumerate_truncation(N, 2 * n, r, limit=enum_limit)
    a = multistep_solve(A, B_list, noises, u0, small, K, T, M, threads=threads)
    b = multistep_solve(A, B_list, noises, u0, ref, K, T, M, threads=threads)
    p = np.sum(a.transfer**2, axis=0)
    d = np.sum(b.transfer**2, axis=0) - p
    w = 2 * np.pi * np.abs(u0.coeffs) ** 2
    live = (p > 0) & (w > 0)
    # p^K ((1 + d/p)^K - 1) without cancellation
    e = p[live] ** K * np.expm1(K * np.log1p(d[live] / p[live]))
    return float(np.sum(w[live] * e))

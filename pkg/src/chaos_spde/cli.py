"""Command-line driver: ``chaos-spde <command> [--config ...] [--out ...]``.

Every command writes one CSV table (header row, LF line endings, reals
with 17 significant digits) to ``--out`` or standard output.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .basis import TimeGrid, basis_matrix
from .chaos import TruncationLimitError, enumerate_truncation, gaussian_block, xi_matrix
from .config import ConfigError, ExperimentConfig, load_config
from .noise import (
    NoiseSpec,
    apply_K,
    m_tilde,
    m_tilde_quadrature,
    m_tilde_table,
    operator_norm_bound,
    variance_function,
)
from .propagator import NumericalGuardError, solve_s_system
from .solver import (
    MC_CHUNK,
    _chunked,
    _map,
    bound_theorem_4_5,
    build_budget,
    error_sweep,
    multistep_error,
    multistep_solve,
    second_moment,
)

log = logging.getLogger("chaos_spde")

EXIT_OK, EXIT_CONFIG, EXIT_GUARD, EXIT_IO = 0, 2, 3, 4

Table = tuple[list, list]


# ------------------------------------------------------------------ output


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if not math.isfinite(v):
            raise NumericalGuardError(f"non-finite value {v} in output")
        return "%.17g" % v
    return str(v)


def render_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _report_nodes(cfg: ExperimentConfig) -> np.ndarray:
    return np.unique(np.linspace(0, cfg.M, cfg.report_times).round().astype(int))


def _inputs(cfg: ExperimentConfig, T: Optional[float] = None):
    r = cfg.r
    return cfg.operator_A(), cfg.operators_B()[:r], cfg.noise_specs(T)[:r], cfg.initial_field()


def _slope(x, y) -> Optional[float]:
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = (y > 0) & np.isfinite(y)
    if ok.sum() < 2 or np.ptp(x[ok]) == 0:
        return None
    return float(np.polyfit(x[ok], np.log(y[ok]), 1)[0])


# ----------------------------------------------------------------- commands


def cmd_validate_basis(cfg: ExperimentConfig, threads: int = 1) -> Table:
    """Basis and noise invariant checks as ``(check_name, residual, tolerance, pass)``."""
    T = cfg.T
    rows = []

    def add(name, residual, tol):
        rows.append([name, float(residual), float(tol), bool(residual <= tol)])

    fine = TimeGrid(T, 4096)
    m = basis_matrix(64, fine)
    w = np.full(fine.M + 1, fine.h)
    w[[0, -1]] /= 2
    add("gram_matrix", np.abs((m * w) @ m.T - np.eye(64)).max(), 1e-7)

    ks = np.arange(1, 65)
    for nz in (NoiseSpec.white(T), NoiseSpec.ou(0.5, T), NoiseSpec.ou(1.0, T), NoiseSpec.ou(2.0, T)):
        quad = m_tilde_quadrature(nz, 64, fine, method="cubic")
        add(f"m_tilde_closed_form_{nz.label()}", np.abs(quad - m_tilde_table(nz, 64, fine)).max(), 1e-6)
    add("white_endpoint_zero", max(abs(m_tilde(NoiseSpec.white(T), k, T)) for k in range(2, 65)), 1e-12)

    frac_ks = np.arange(8, 65)
    for H in (0.6, 0.75, 0.9):
        nz = NoiseSpec.fractional(H, T)
        v = np.array([m_tilde(nz, int(k), T) for k in frac_ks])
        slope = np.polyfit(np.log(frac_ks), np.log(np.abs(v)), 1)[0]
        target = -(1.5 - H)
        add(f"fractional_slope_{nz.label()}", abs(slope - target) / abs(target), 0.1)

    for nz in (NoiseSpec.white(T), NoiseSpec.ou(1.0, T), NoiseSpec.fractional(0.75, T)):
        if nz.kind == "fractional":
            tab = np.array([m_tilde(nz, int(k), T) for k in ks])
        else:
            tab = m_tilde_table(nz, 64, TimeGrid(T, 64))[:, -1]
        V = np.cumsum(tab**2)
        excess = max(float(np.max(V) - variance_function(nz, T)), 0.0)
        add(f"parseval_below_variance_{nz.label()}", excess, 1e-9)

    grid = TimeGrid(T, 1024)
    rng = np.random.default_rng(cfg.seed)
    f = np.vstack([basis_matrix(16, grid), rng.standard_normal((16, 16)) @ basis_matrix(16, grid)])
    w = np.full(grid.M + 1, grid.h)
    w[[0, -1]] /= 2
    for nz in (NoiseSpec.white(T), NoiseSpec.ou(1.0, T), NoiseSpec.fractional(0.75, T)):
        kf = apply_K(nz, f, grid)
        ratio = np.sqrt(((kf**2) @ w) / ((f**2) @ w)).max() / operator_norm_bound(nz)
        add(f"operator_norm_{nz.label()}", ratio, 1.0)
    return ["check_name", "residual", "tolerance", "pass"], rows


def cmd_moments(cfg: ExperimentConfig, threads: int = 1) -> Table:
    """Second moment, per-level energies and the a priori bound at report times."""
    A, B, noises, u0 = _inputs(cfg)
    trunc = enumerate_truncation(cfg.N, cfg.n, cfg.r, limit=cfg.enum_limit)
    grid = TimeGrid(cfg.T, cfg.M)
    nodes = _report_nodes(cfg)
    log.info("moments: |J| = %d, M = %d", len(trunc), cfg.M)
    coeffs = solve_s_system(A, B, noises, u0, trunc, grid, keep=nodes, threads=threads)
    budget = build_budget(A, B, noises, u0)
    rows = []
    for i in range(len(nodes)):
        rep = second_moment(coeffs, i)
        bound = budget.C_o * math.exp((budget.C_A + budget.C_B) * rep.t) * budget.I0
        levels = [rep.per_level[k] for k in range(cfg.N + 1)]
        rows.append([rep.t, rep.second_moment, *levels, rep.mean_field.norm(), bound])
    header = ["t", "second_moment", *[f"level_{k}" for k in range(cfg.N + 1)], "mean_field_norm", "bound_3_18"]
    return header, rows


def cmd_sample(cfg: ExperimentConfig, threads: int = 1) -> Table:
    """Realizations of ``u(T, x)`` on an equispaced grid plus pointwise statistics.

    Rows ``0..sample_rows-1`` are individual draws; ``mean`` and ``variance``
    are Monte Carlo estimates over ``mc_samples`` draws; ``exact_mean`` and
    ``exact_variance`` come from the chaos coefficients.
    """
    A, B, noises, u0 = _inputs(cfg)
    trunc = enumerate_truncation(cfg.N, cfg.n, cfg.r, limit=cfg.enum_limit)
    coeffs = solve_s_system(A, B, noises, u0, trunc, TimeGrid(cfg.T, cfg.M), keep=[cfg.M], threads=threads)
    fields = coeffs.fields_at(-1)
    x = 2 * np.pi * np.arange(cfg.x_points) / cfg.x_points
    q = np.arange(-cfg.Q, cfg.Q + 1)
    E = np.exp(1j * np.outer(q, x))
    phys = (fields @ E).real  # (|J|, P)

    total = max(cfg.mc_samples, cfg.sample_rows)

    def run(ids):
        z = gaussian_block(cfg.seed, 0, ids, trunc.n, trunc.r)
        u = xi_matrix(trunc, z) @ phys
        return u.sum(axis=0), (u**2).sum(axis=0), u[: max(0, cfg.sample_rows - int(ids[0]))]

    parts = _map(run, _chunked(total, MC_CHUNK), threads)
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    shown = np.concatenate([p[2] for p in parts])[: cfg.sample_rows]
    mean = s1 / total
    var = np.maximum(s2 / total - mean**2, 0.0) * total / max(total - 1, 1)

    rows = [["x", *x]]
    rows += [[i, *shown[i]] for i in range(len(shown))]
    rows.append(["mean", *mean])
    rows.append(["variance", *var])
    rows.append(["exact_mean", *phys[0]])
    rows.append(["exact_variance", *np.sum(phys[1:] ** 2, axis=0)])
    return ["sample_id", *[f"x_{j}" for j in range(cfg.x_points)]], rows


_SWEEP_DEFAULTS = {"N": (1, 2, 3, 4), "n": (4, 8, 16, 32), "tau": (2, 4, 8, 16)}


def _sweep_values(cfg: ExperimentConfig, axis: str) -> list[int]:
    vals = cfg.sweep_values or (tuple(range(1, len(cfg.noises) + 1)) if axis == "r" else _SWEEP_DEFAULTS[axis])
    out = []
    for v in vals:
        if v != int(v) or v < (0 if axis == "N" else 1):
            raise ConfigError(f"sweep.values for axis {axis} must be {'non-negative' if axis == 'N' else 'positive'} integers")
        out.append(int(v))
    if axis == "r" and max(out) > len(cfg.noises):
        raise ConfigError("sweep over r exceeds the number of noises")
    return out


def cmd_sweep(cfg: ExperimentConfig, axis: str, threads: int = 1) -> Table:
    """Measured truncation error against its bound along one axis.

    ``N``: level tail (max over report times) vs the level bound.
    ``n``: order tail at ``T`` vs the endpoint order bound.
    ``r``: dimension tail (max over report times) vs the dimension bound.
    ``tau``: multistep error at ``T`` with ``K = T / tau`` steps vs the
    composed multistep bound (values are step counts ``K``).
    The footer row holds fitted slopes of ``log(value)`` against the axis
    value (``N``, ``r``) or its logarithm (``n``, ``tau``).
    """
    values = _sweep_values(cfg, axis)
    A = cfg.operator_A()
    B_all, noises_all, u0 = cfg.operators_B(), cfg.noise_specs(), cfg.initial_field()
    grid = TimeGrid(cfg.T, cfg.M)
    nodes = _report_nodes(cfg)
    common = dict(grid=grid, report=nodes, threads=threads, enum_limit=cfg.enum_limit)
    extra_cols: list = []
    rows = []
    if axis == "N":
        sweep = error_sweep(A, B_all, noises_all, u0, values, [cfg.n], cfg.r, **common)
        rows = [[s["N"], s["tail_N_sup"], s["bound_3_3"]] for s in sweep]
    elif axis == "n":
        sweep = error_sweep(A, B_all, noises_all, u0, [cfg.N], values, cfg.r, **common)
        rows = [[s["n"], s["tail_n_T"], s["bound_4_1_endpoint"]] for s in sweep]
    elif axis == "r":
        for r in values:
            s = error_sweep(A, B_all, noises_all, u0, [cfg.N], [cfg.n], r, **common)[0]
            rows.append([r, s["tail_r_sup"], s["bound_4_2"]])
    else:
        A, B, noises, u0 = _inputs(cfg)
        if not all(b.is_diagonal for b in B):
            raise ConfigError("the tau sweep needs diagonal operators B")
        extra_cols = ["K", "bound_printed", "bound_variant"]
        for K in values:
            tau = cfg.T / K
            err = multistep_error(
                A, B, noises, u0, cfg.N, cfg.n, cfg.r, K, cfg.T, cfg.M,
                threads=threads, enum_limit=cfg.enum_limit,
            )
            b_tau = build_budget(A, B, [nz.with_horizon(tau) for nz in noises], u0)
            bd = bound_theorem_4_5(b_tau, cfg.N, cfg.n, cfg.r, cfg.T)
            rows.append([tau, err, bd.composed, K, bd.printed, bd.variant])
    x = np.array([row[0] for row in rows], float)
    xs = np.log(x) if axis in ("n", "tau") else x
    footer = ["fitted_slope", _slope(xs, [r[1] for r in rows]), _slope(xs, [r[2] for r in rows])]
    if extra_cols:
        footer += [None, _slope(xs, [r[4] for r in rows]), _slope(xs, [r[5] for r in rows])]
    rows.append(footer)
    return ["axis_value", "measured_tail", "theoretical_bound", *extra_cols], rows


def cmd_multistep(cfg: ExperimentConfig, threads: int = 1) -> Table:
    """Step-by-step scheme: Monte Carlo and exact moments at ``t_j`` with the bound."""
    A, B, noises, u0 = _inputs(cfg)
    trunc = enumerate_truncation(cfg.N, cfg.n, cfg.r, limit=cfg.enum_limit)
    K = cfg.K_steps
    diagonal = all(b.is_diagonal for b in B)
    res = multistep_solve(
        A, B, noises, u0, trunc, K, cfg.T, cfg.M,
        samples=cfg.mc_samples, seed=cfg.seed, exact=diagonal, threads=threads,
    )
    tau = cfg.T / K
    b_tau = build_budget(A, B, [nz.with_horizon(tau) for nz in noises], u0)
    rows = []
    for j, t in enumerate(res.times):
        mc = se = None
        if res.mc_mean is not None:
            mc, se = float(res.mc_mean[j]), float(res.mc_stderr[j])
        ex = float(res.exact[j]) if res.exact is not None else None
        if j == 0:
            bd, bp = 0.0, 0.0
        else:
            b = bound_theorem_4_5(b_tau, cfg.N, cfg.n, cfg.r, j * tau)
            bd, bp = b.composed, b.printed
        rows.append([j, float(t), mc, se, ex, bd, bp])
    return ["j", "t_j", "mc_moment", "mc_stderr", "exact_moment", "bound_4_45", "bound_4_45_printed"], rows


# --------------------------------------------------------------------- main


def _setup_logging() -> None:
    level = os.environ.get("CHAOS_SPDE_LOG", "off").strip().lower()
    levels = {"off": None, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"CHAOS_SPDE_LOG must be off, info or debug, got {level!r}")
    if levels[level] is None:
        log.setLevel(logging.CRITICAL + 1)
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(levels[level])


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment configuration file")
    common.add_argument("--out", help="output CSV path (default: config 'out', else stdout)")
    common.add_argument("--seed", type=int, help="override the random seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p = argparse.ArgumentParser(prog="chaos-spde", description="Wiener chaos solver for linear parabolic SPDEs")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("validate-basis", "moments", "sample", "multistep"):
        sub.add_parser(name, parents=[common])
    sw = sub.add_parser("sweep", parents=[common])
    sw.add_argument("--axis", required=True, choices=["N", "n", "r", "tau"])
    return p


def run(argv: Optional[Sequence[str]] = None, stdout=None) -> int:
    """Run one command; returns the process exit code."""
    stdout = stdout or sys.stdout
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        _setup_logging()
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed).validate()
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cmd = args.command
        if cmd == "sweep":
            header, rows = cmd_sweep(cfg, args.axis, threads=args.threads)
        else:
            fn = {"validate-basis": cmd_validate_basis, "moments": cmd_moments,
                  "sample": cmd_sample, "multistep": cmd_multistep}[cmd]
            header, rows = fn(cfg, threads=args.threads)
        text = render_csv(header, rows)
        out = args.out or cfg.out
        if out:
            with open(out, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        else:
            stdout.write(text)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TruncationLimitError, NumericalGuardError) as exc:
        print(f"numerical guard: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

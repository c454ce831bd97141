import math

import numpy as np
import pytest

from chaos_spde.basis import TimeGrid
from chaos_spde.chaos import GaussianSample, enumerate_truncation, xi_alpha
from chaos_spde.noise import NoiseSpec, RateExponents, m_tilde_parseval
from chaos_spde.propagator import OperatorA, OperatorB, SpectralField, solve_s_system
from chaos_spde.solver import (
    ErrorBudget,
    _order_term,
    bound_corollary_3_3,
    bound_level,
    bound_overall,
    bound_theorem_3_1,
    bound_theorem_4_1,
    bound_theorem_4_2,
    bound_theorem_4_5,
    build_budget,
    error_sweep,
    mc_second_moment,
    moment_reports,
    multistep_error,
    multistep_solve,
    sample_realization,
    sample_realizations,
    second_moment,
    truncation_tail,
)

A = OperatorA()
SIN = SpectralField.from_trig(4, sin=[1.0])
SIGMA = 0.5
NOISES = [NoiseSpec.white(), NoiseSpec.ou(1.0), NoiseSpec.fractional(0.75)]
IDS = ["white", "ou", "fractional"]


def _diag_moment(nz, N, n, t, sigma=SIGMA, lo=0):
    V = m_tilde_parseval(nz, n, t)
    return math.pi * math.exp(-2 * t) * sum(sigma ** (2 * k) * V**k / math.factorial(k) for k in range(lo, N + 1))


def _budget(**kw):
    base = dict(
        T=1.0, C_A=1.0, delta_A=1.0, C_02=1.0, kappa=(1.0,), C=(1.0,), C1=(1.0,),
        rates=(RateExponents(1, 2, 3, 4),), c_tilde=(1.0,), c_tilde1=(1.0,),
        u0_norm2=1.0, u0_H2_norm2=4.0, I0=1.0,
    )
    base.update(kw)
    return ErrorBudget(**base)


def test_second_moment_heat_only():
    grid = TimeGrid(1.0, 16)
    c = solve_s_system(A, [OperatorB.diagonal(SIGMA)], [NoiseSpec.white()], SIN, enumerate_truncation(0, 2, 1), grid)
    for rep in moment_reports(c):
        assert rep.second_moment == pytest.approx(math.pi * math.exp(-2 * rep.t), rel=1e-14)
        assert rep.per_level == {0: rep.second_moment}


@pytest.mark.parametrize("nz", NOISES, ids=IDS)
def test_second_moment_diagonal_closed_form(nz):
    N, n, M = 4, 8, 1024
    grid = TimeGrid(1.0, M)
    keep = [M // 4, M // 2, M]
    c = solve_s_system(A, [OperatorB.diagonal(SIGMA)], [nz], SIN, enumerate_truncation(N, n, 1), grid, keep=keep)
    for i, node in enumerate(keep):
        t = grid.nodes[node]
        rep = second_moment(c, i)
        assert rep.second_moment == pytest.approx(_diag_moment(nz, N, n, t), rel=1e-4)
        V = m_tilde_parseval(nz, n, t)
        # the fractional kernel is only Hoelder (grid error O(h^{H+1/2})); level k scales like V^k
        rel = 3e-3 if nz.kind == "fractional" else 5e-4
        for k in range(N + 1):
            expect = math.pi * math.exp(-2 * t) * SIGMA ** (2 * k) * V**k / math.factorial(k)
            assert rep.per_level[k] == pytest.approx(expect, rel=rel * max(k, 1), abs=1e-12)


def test_truncation_tail_identities():
    grid = TimeGrid(1.0, 128)
    nz = NoiseSpec.ou(1.0)
    ref = solve_s_system(A, [OperatorB.diagonal(SIGMA)], [nz], SIN, enumerate_truncation(5, 8, 1), grid, keep=[64, 128])
    assert truncation_tail(ref, 5, 8, 1) == (0.0, 0.0, 0.0)
    tN, tn, tr = truncation_tail(ref, 2, 4, 1)
    assert tr == 0.0 and tN > 0 and tn > 0
    V = m_tilde_parseval(nz, 8, 1.0)
    expect = math.pi * math.exp(-2) * sum(SIGMA ** (2 * k) * V**k / math.factorial(k) for k in range(3, 6))
    assert tN == pytest.approx(expect, rel=1e-4)
    arr = truncation_tail(ref, 2, 4, 1, np.array([0, 1]))
    assert arr[0].shape == (2,) and arr[0][1] == pytest.approx(tN)
    with pytest.raises(ValueError):
        truncation_tail(ref, 6, 4, 1)


def test_pythagorean_split_sums_to_total():
    grid = TimeGrid(1.0, 64)
    B = [OperatorB.diagonal(0.5), OperatorB.diagonal(0.3)]
    noises = [NoiseSpec.white(), NoiseSpec.ou(2.0)]
    ref = solve_s_system(A, B, noises, SIN, enumerate_truncation(4, 6, 2), grid, keep=[64])
    small = solve_s_system(A, B, noises, SIN, enumerate_truncation(2, 3, 1), grid, keep=[64])
    total = second_moment(ref).second_moment - second_moment(small).second_moment
    assert sum(truncation_tail(ref, 2, 3, 1)) == pytest.approx(total, rel=1e-12)


@pytest.mark.parametrize("nz", NOISES, ids=IDS)
def test_mc_second_moment_within_three_se(nz):
    c = solve_s_system(
        A, [OperatorB.diagonal(1.0)], [nz], SIN, enumerate_truncation(3, 4, 1), TimeGrid(1.0, 128), keep=[128]
    )
    mean, se, field = mc_second_moment(c, seed=2024, samples=10_000)
    assert abs(mean - second_moment(c).second_moment) <= 3 * se
    # mean field: per-mode SE from the realizations themselves
    z = sample_realizations(c, GaussianSample_from(c, 2024, 10_000))
    q = SIN.Q + 1
    se_q = z[:, q].std(ddof=1) / math.sqrt(len(z))
    assert abs(field[q] - c.field(0).coeffs[q]) <= 3 * se_q


def GaussianSample_from(c, seed, samples):
    from chaos_spde.chaos import sample_gaussians

    return sample_gaussians(c.trunc.n, c.trunc.r, seed, samples)


def test_mc_is_thread_invariant():
    c = solve_s_system(
        A, [OperatorB.diagonal(1.0)], [NoiseSpec.white()], SIN, enumerate_truncation(2, 3, 1), TimeGrid(1.0, 32), keep=[32]
    )
    a = mc_second_moment(c, 5, 4500, threads=1)
    b = mc_second_moment(c, 5, 4500, threads=4)
    assert a[0] == b[0] and a[1] == b[1] and np.array_equal(a[2], b[2])


def test_realization_at_zero_sample():
    J = enumerate_truncation(4, 2, 1)
    c = solve_s_system(A, [OperatorB.diagonal(1.0)], [NoiseSpec.ou(1.0)], SIN, J, TimeGrid(1.0, 32), keep=[32])
    zero = GaussianSample(np.zeros((1, 2, 1)), 0, np.array([0]))
    got = sample_realization(c, zero).coeffs
    direct = sum(xi_alpha(a, zero)[0] * c.field(i).coeffs for i, a in enumerate(J.members))
    np.testing.assert_allclose(got, direct, atol=1e-15)
    # only even levels survive: H_1(0) = 0, H_2(0) = -1
    odd = [i for i, a in enumerate(J.members) if a.length % 2]
    assert all(xi_alpha(J.members[i], zero)[0] == 0 for i in odd)
    with pytest.raises(ValueError):
        sample_realization(c, GaussianSample(np.zeros((1, 1, 1)), 0, np.array([0])))


def test_bound_theorem_3_1_arithmetic():
    assert bound_theorem_3_1(_budget()) == pytest.approx(math.e**2)
    assert bound_theorem_3_1(_budget(I0=0.0)) == 0.0
    b = build_budget(A, [OperatorB.diagonal(0.5)], [NoiseSpec.white()], SIN)
    assert bound_theorem_3_1(b) == pytest.approx(math.exp(1.25) * math.pi)


def test_budget_surfaces_constants():
    h = SpectralField.from_trig(1, cos=[1.0, 0.3])
    b = build_budget(A, [OperatorB.multiplier(h), OperatorB.diagonal(0.5)], [NoiseSpec.ou(1.0), NoiseSpec.white()], SIN)
    assert b.kappa == (2.0, 1.0)
    assert b.C_B == pytest.approx(4 * 1.3**2 + 0.25, rel=1e-9)
    assert b.C_1B == pytest.approx(4 * 3.2**2 + 0.25, rel=1e-9)
    assert b.C_o == 1.0 and b.u0_H2_norm2 == pytest.approx(4 * math.pi)
    forced = build_budget(A, [OperatorB.diagonal(0.5)], [NoiseSpec.white()], SIN, F=SIN)
    assert forced.C_o == 3.0 and forced.I0 == pytest.approx(math.pi + 2 * math.pi / 2)
    assert set(b.as_dict()) >= {"C_A", "C_B", "C_1B", "C_o", "I0"}


def test_bound_corollary_3_3():
    b = build_budget(A, [OperatorB.diagonal(0.5)], [NoiseSpec.white()], SIN)
    assert bound_corollary_3_3(b, 0) == pytest.approx(0.25 * math.exp(1.25) * math.pi)
    assert bound_corollary_3_3(b, 3) == pytest.approx(0.25**4 / 24 * math.exp(1.25) * math.pi)
    assert bound_corollary_3_3(b, 400) == 0.0 or bound_corollary_3_3(b, 400) < 1e-300


def test_bound_level_arithmetic():
    b = _budget(C=(2.0,))
    assert bound_level(b, 3) == pytest.approx(math.e * 4**3 / 6)


def test_order_terms():
    b = _budget(rates=(RateExponents(1, 2),), c_tilde1=(0.0,))
    assert _order_term(b, 10, True) == 0.0
    ou = _budget()
    # endpoint first term: T^3 / n^3 with the tail factor 1/3
    assert _order_term(ou, 10, True) == pytest.approx(1 / (3 * 1000))
    assert _order_term(ou, 10, True) / _order_term(ou, 20, True) == pytest.approx(8.0)
    assert _order_term(_budget(T=0.5), 10, True) / _order_term(ou, 10, True) == pytest.approx(0.125)
    frac = _budget(rates=(RateExponents(1.5, 1.5, 1.5, 1.5),))
    assert _order_term(frac, 16, False) / _order_term(frac, 64, False) == pytest.approx(2.0)


def test_bound_theorem_4_1_structure():
    b = _budget()
    uni, end = bound_theorem_4_1(b, 10)
    pre = math.exp(2.0)
    second = 1.0 * (1 / 10) * 4.0
    assert uni == pytest.approx(pre * (1 / 10 + second))
    assert end == pytest.approx(pre * (1 / 3000 + second))
    with pytest.raises(ValueError):
        bound_theorem_4_1(_budget(u0_H2_norm2=None), 4)


def test_bound_theorem_4_2():
    assert bound_theorem_4_2(_budget(), 1) == 0.0
    two = _budget(
        kappa=(1.0, 2.0), C=(1.0, 0.5), C1=(1.0, 0.5),
        rates=(RateExponents(1, 2), RateExponents(1, 2)), c_tilde=(1.0, 1.0), c_tilde1=(0.0, 0.0),
    )
    assert bound_theorem_4_2(two, 1) == pytest.approx(1.0 * math.exp(3.0))
    assert bound_theorem_4_2(two, 2) == 0.0


def test_bound_overall_is_sum():
    b = build_budget(A, [OperatorB.diagonal(0.5)], [NoiseSpec.ou(1.0)], SIN)
    uni, end = bound_overall(b, 3, 8, 1)
    u41, e41 = bound_theorem_4_1(b, 8)
    assert uni == pytest.approx(bound_corollary_3_3(b, 3) + u41)
    assert end == pytest.approx(bound_corollary_3_3(b, 3) + e41)


def test_bound_theorem_4_5_shapes():
    b_tau = _budget(T=0.25)
    bd = bound_theorem_4_5(b_tau, 2, 10, 1, 1.0)
    lvl = 0.25**2 / 2 / 3
    end = 0.25**2 / 1000
    assert bd.printed == pytest.approx(lvl + end + (0.25 + 1) / 10 * 4.0)
    assert bd.variant == pytest.approx(lvl + end + 0.25**2 / 10 * 4.0)
    K = 4
    assert bd.composed == pytest.approx(K * math.exp(2.0 * 0.75) * bound_overall(b_tau, 2, 10, 1)[1])
    with pytest.raises(ValueError):
        bound_theorem_4_5(b_tau, 2, 10, 1, 0.9)


def test_multistep_single_step_equals_one_step():
    J = enumerate_truncation(2, 4, 1)
    B, nz = [OperatorB.diagonal(SIGMA)], [NoiseSpec.ou(1.0)]
    c = solve_s_system(A, B, nz, SIN, J, TimeGrid(1.0, 64))
    r = multistep_solve(A, B, nz, SIN, J, 1, 1.0, 64)
    assert abs(r.exact[-1] - second_moment(c).second_moment) < 1e-14


@pytest.mark.parametrize("K", [2, 4, 8])
def test_multistep_exact_and_mc_agree(K):
    J = enumerate_truncation(2, 4, 1)
    B, nz = [OperatorB.diagonal(SIGMA)], [NoiseSpec.fractional(0.75)]
    r = multistep_solve(A, B, nz, SIN, J, K, 1.0, 64, samples=10_000, seed=11)
    assert np.all(np.abs(r.mc_mean[1:] - r.exact[1:]) <= 3 * r.mc_stderr[1:])


def test_multistep_fractional_product_formula():
    N, n, K = 2, 4, 4
    nz = NoiseSpec.fractional(0.75)
    J = enumerate_truncation(N, n, 1)
    r = multistep_solve(A, [OperatorB.diagonal(SIGMA)], [nz], SIN, J, K, 1.0, 1024)
    V = m_tilde_parseval(nz.with_horizon(0.25), n, 0.25)
    per_step = sum(SIGMA ** (2 * k) * V**k / math.factorial(k) for k in range(N + 1))
    for j, t in enumerate(r.times):
        assert r.exact[j] == pytest.approx(math.pi * math.exp(-2 * t) * per_step**j, rel=1e-3)


def test_multistep_moment_growth():
    J = enumerate_truncation(3, 4, 2)
    B = [OperatorB.diagonal(0.8), OperatorB.diagonal(0.4)]
    noises = [NoiseSpec.ou(1.0), NoiseSpec.white()]
    r = multistep_solve(A, B, noises, SIN, J, 8, 1.0, 32)
    b = build_budget(A, B, [nz.with_horizon(1 / 8) for nz in noises], SIN)
    growth = math.exp((b.C_A + b.C_B) / 8)
    assert np.all(r.exact[1:] <= growth * r.exact[:-1])


def test_multistep_non_diagonal():
    J = enumerate_truncation(2, 3, 1)
    B = [OperatorB.multiplier(SpectralField.from_trig(1, cos=[1.0, 0.3]))]
    nz = [NoiseSpec.white()]
    with pytest.raises(ValueError):
        multistep_solve(A, B, nz, SIN, J, 2, 1.0, 32)
    r = multistep_solve(A, B, nz, SIN, J, 2, 1.0, 32, samples=2000, seed=3, exact=False, keep_fields=5)
    assert r.exact is None and r.final_fields.shape == (5, 2 * SIN.Q + 1)
    # K=1 MC mean field equals the heat solution in expectation
    one = multistep_solve(A, B, nz, SIN, J, 1, 1.0, 32, samples=4000, seed=3, exact=False)
    q = SIN.Q + 1
    assert abs(one.mc_mean_field[-1][q] - math.exp(-1) * SIN.coeffs[q]) < 0.05
    with pytest.raises(ValueError):
        multistep_solve(A, B, nz, SIN, J, 0, 1.0, 32)


def test_multistep_mc_thread_invariant():
    J = enumerate_truncation(2, 3, 1)
    B, nz = [OperatorB.diagonal(SIGMA)], [NoiseSpec.white()]
    a = multistep_solve(A, B, nz, SIN, J, 3, 1.0, 16, samples=2500, seed=9, threads=1)
    b = multistep_solve(A, B, nz, SIN, J, 3, 1.0, 16, samples=2500, seed=9, threads=3)
    assert np.array_equal(a.mc_mean, b.mc_mean) and np.array_equal(a.mc_stderr, b.mc_stderr)


def test_multistep_error_is_dominated():
    B, nz = [OperatorB.diagonal(SIGMA)], [NoiseSpec.ou(1.0)]
    err = multistep_error(A, B, nz, SIN, 2, 4, 1, 8, 1.0, 32)
    b_tau = build_budget(A, B, [nz[0].with_horizon(1 / 8)], SIN)
    assert 0 < err <= bound_theorem_4_5(b_tau, 2, 4, 1, 1.0).composed


def test_error_sweep_dominance_small():
    B, nz = [OperatorB.diagonal(SIGMA)], [NoiseSpec.ou(1.0)]
    rows = error_sweep(A, B, nz, SIN, [1, 2], [4, 8], 1, TimeGrid(1.0, 64))
    assert len(rows) == 4
    for row in rows:
        assert row["tail_N_sup"] <= row["bound_3_3"]
        assert row["tail_n_T"] <= row["bound_4_1_endpoint"]
        assert row["tail_n_sup"] <= row["bound_4_1_uniform"]
        assert row["error_sup"] <= row["bound_overall_uniform"]
        assert row["moment_sup"] <= row["bound_3_1"]

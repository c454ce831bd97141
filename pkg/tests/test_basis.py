import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chaos_spde.basis import (
    BasisFunction,
    GridMismatchError,
    TimeGrid,
    basis_matrix,
    chi,
    cumulative_integral,
    eval_basis,
    inner_product,
    trapezoid_convergence,
)


@pytest.mark.parametrize(
    "k,t,T,expected",
    [(1, 0.3, 1.0, 1.0), (2, 0.0, 1.0, math.sqrt(2)), (2, 1.0, 1.0, -math.sqrt(2))],
)
def test_eval_basis_values(k, t, T, expected):
    assert eval_basis(k, t, T) == pytest.approx(expected, abs=1e-15)


def test_eval_basis_domain_errors():
    with pytest.raises(ValueError):
        eval_basis(0, 0.5, 1.0)
    with pytest.raises(ValueError):
        eval_basis(2, 1.5, 1.0)
    with pytest.raises(ValueError):
        eval_basis(2, -0.1, 1.0)


def test_basis_function_and_matrix_agree():
    grid = TimeGrid(2.0, 64)
    m = basis_matrix(5, grid)
    for k in range(1, 6):
        np.testing.assert_allclose(m[k - 1], BasisFunction(k, 2.0)(grid.nodes), rtol=0, atol=1e-14)


@pytest.mark.parametrize("t,s,expected", [(1, 0.5, 1), (1, 1.5, 0), (1, 1, 1), (1, -0.1, 0)])
def test_chi(t, s, expected):
    assert chi(t, s) == expected


def test_inner_product_examples():
    grid = TimeGrid(1.0, 1024)
    m = basis_matrix(3, grid)
    assert inner_product(m[0], m[0], grid) == pytest.approx(1.0, abs=1e-8)
    assert inner_product(m[1], m[2], grid) == pytest.approx(0.0, abs=1e-8)
    g2 = TimeGrid(2.0, 1024)
    c = chi(2.0, g2.nodes)
    assert inner_product(c, c, g2) == pytest.approx(2.0, abs=1e-8)


def test_inner_product_grid_mismatch():
    with pytest.raises(GridMismatchError):
        inner_product(np.ones(10), np.ones(10), TimeGrid(1.0, 16))


def test_gram_matrix_identity():
    grid = TimeGrid(1.0, 4096)
    m = basis_matrix(64, grid)
    gram = inner_product(m[:, None, :], m[None, :, :], grid)
    assert np.abs(gram - np.eye(64)).max() < 1e-7


def test_grid_refine_coarsen_and_nodes():
    g = TimeGrid(1.5, 6)
    assert g.refine().M == 12 and g.refine().coarsen() == g
    assert g.nodes[-1] == 1.5
    assert g.node_index(0.75) == 3
    with pytest.raises(ValueError):
        g.node_index(0.1)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 7).coarsen()
    with pytest.raises(ValueError):
        TimeGrid(0.0, 8)


def test_trapezoid_convergence_is_second_order():
    i_m, i_2m, err = trapezoid_convergence(np.exp, 1.0, 64)
    exact = math.e - 1
    assert abs(i_2m - exact) < 2 * err
    assert abs(i_m - exact) / abs(i_2m - exact) == pytest.approx(4.0, rel=0.01)


def test_cumulative_integral_cubic_is_more_accurate():
    grid = TimeGrid(1.0, 128)
    f = np.sin(3 * grid.nodes)
    exact = (1 - np.cos(3 * grid.nodes)) / 3
    lin = np.abs(cumulative_integral(f, grid) - exact).max()
    cub = np.abs(cumulative_integral(f, grid, method="cubic") - exact).max()
    assert lin < 1e-4 and cub < lin / 100


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.floats(0.1, 5.0))
def test_basis_norm_is_one(k, T):
    # exact quadrature of cos^2 over whole half-periods with enough points
    grid = TimeGrid(T, 512)
    m = eval_basis(k, grid.nodes, T)
    assert inner_product(m, m, grid) == pytest.approx(1.0, abs=1e-10)

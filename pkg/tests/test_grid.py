import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmelab.grid import (EllipticSolveError, Grid, GridMismatchError, boundary_flux,
                         boundary_pairing, div_gamma_grad, operator_matrix, solve_elliptic)


def manufactured(n):
    g = Grid.rectangle(n, n)
    X, Y = g.coords
    gamma = 1.0 + X ** 2
    U = np.sin(np.pi * X) * np.sin(np.pi * Y)
    # div((1 + x^2) grad U) = 2x U_x + (1 + x^2) lap U
    rhs = (2 * X * np.pi * np.cos(np.pi * X) * np.sin(np.pi * Y)
           - 2 * np.pi ** 2 * (1 + X ** 2) * U)
    Uh = solve_elliptic(g, gamma, rhs, np.zeros(g.n_boundary))
    return np.abs(Uh - U).max()


def test_div_linear_vanishes():
    g = Grid.interval(17)
    x = g.coords[0]
    out = div_gamma_grad(g, x, np.ones(g.shape))
    assert np.abs(out[g.interior]).max() < 1e-12


def test_div_quadratic_exact():
    g = Grid.interval(21, length=2.0)
    x = g.coords[0]
    out = div_gamma_grad(g, x ** 2, np.ones(g.shape))
    np.testing.assert_allclose(out[g.interior], 2.0, atol=1e-11)


@pytest.mark.parametrize("n", [17, 33, 65])
def test_div_variable_gamma(n):
    g = Grid.interval(n)
    x = g.coords[0]
    out = div_gamma_grad(g, x, 1.0 + x)
    assert np.abs(out[g.interior] - 1.0).max() <= 2.0 * g.spacing[0] ** 2 + 1e-12


def test_solve_linear_exact():
    g = Grid.rectangle(21, 17)
    X = g.coords[0]
    U = solve_elliptic(g, np.ones(g.shape), np.zeros(g.shape), g.trace(X))
    np.testing.assert_allclose(U, X, atol=1e-9)


def test_solve_harmonic_polynomial():
    g = Grid.rectangle(33, 33)
    X, Y = g.coords
    P = X ** 2 - Y ** 2
    U = solve_elliptic(g, np.ones(g.shape), np.zeros(g.shape), P)
    # second differences are exact on quadratics
    assert np.abs(U - P).max() < 1e-9


def test_manufactured_order():
    errs = [manufactured(n) for n in (17, 33, 65, 129)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert errs[-1] < 1e-3
    assert orders.min() >= 1.9, orders


def test_flux_linear():
    g = Grid.interval(11)
    fl = boundary_flux(g, g.coords[0], np.ones(g.shape))
    np.testing.assert_allclose(fl, [-1.0, 1.0], atol=1e-12)


def test_flux_constant_zero():
    g = Grid.rectangle(9, 9)
    assert np.abs(boundary_flux(g, np.full(g.shape, 3.5), np.ones(g.shape))).max() < 1e-12


def test_flux_harmonic_square():
    g = Grid.rectangle(41, 41)
    X, Y = g.coords
    fl = boundary_flux(g, X ** 2 - Y ** 2, np.ones(g.shape))
    xb, yb = g.trace(X), g.trace(Y)
    edge = lambda a: np.isclose(a, 0.0) | np.isclose(a, 1.0)  # noqa: E731
    # exclude corners, where the normal is ambiguous
    side = edge(xb) ^ edge(yb)
    exact = np.where(np.isclose(xb, 1.0), 2 * xb, 0.0) + np.where(np.isclose(yb, 1.0), -2 * yb, 0.0)
    assert np.abs(fl - exact)[side].max() < 1e-9


def test_flux_order1_two_point():
    g = Grid.interval(11)
    x = g.coords[0]
    fl = boundary_flux(g, x ** 2, np.ones(g.shape), order=1)
    # (x1^2 - x0^2)/h at the right end is 2 - h
    h = g.spacing[0]
    np.testing.assert_allclose(fl, [-h, 2.0 - h], atol=1e-12)
    with pytest.raises(ValueError):
        boundary_flux(g, x, np.ones(g.shape), order=3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_maximum_principle(seed):
    rng = np.random.default_rng(seed)
    g = Grid.rectangle(15, 13)
    gamma = 0.5 + rng.random(g.shape)
    rhs = -rng.random(g.shape)
    bc = rng.normal(size=g.n_boundary)
    U = solve_elliptic(g, gamma, rhs, bc)
    assert U[g.interior].max() <= bc.max() + 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_symmetry(seed):
    rng = np.random.default_rng(seed)
    g = Grid.rectangle(12, 10)
    gamma = 0.5 + rng.random(g.shape)
    U, W = rng.normal(size=(2,) + g.shape) * g.interior
    vol = g.cell_volume
    a = np.sum(U * div_gamma_grad(g, W, gamma) * vol)
    b = np.sum(W * div_gamma_grad(g, U, gamma) * vol)
    assert abs(a - b) <= 1e-10 * max(abs(a), abs(b), 1e-300)


def test_disk_max_principle():
    g = Grid.disk(41, radius=1.0)
    X, Y = g.coords
    exact = X + (1 - X ** 2 - Y ** 2) / 4
    U = solve_elliptic(g, np.ones(g.shape), -np.ones(g.shape), exact)
    assert U[g.interior].max() <= g.trace(exact).max() + 1e-12
    # lap U = -1 with quadratic data: the staircase solve is exact
    assert np.abs(U - exact)[g.inside].max() < 1e-9


def test_operator_matrix_rows_sum_zero():
    g = Grid.rectangle(8, 9)
    L = operator_matrix(g, np.ones(g.shape))
    s = np.asarray(L.sum(axis=1)).ravel()
    assert np.abs(s[g.interior_index]).max() < 1e-10


def test_boundary_pairing_length():
    g = Grid.rectangle(11, 11)
    one = np.ones(g.n_boundary)
    assert boundary_pairing(g, one, one) == pytest.approx(4.0, rel=1e-12)


def test_shape_mismatch():
    g = Grid.interval(9)
    with pytest.raises(GridMismatchError):
        solve_elliptic(g, np.ones(g.shape), np.zeros(5), np.zeros(2))


def test_gamma_must_be_positive():
    g = Grid.interval(9)
    with pytest.raises(ValueError):
        div_gamma_grad(g, g.coords[0], np.zeros(g.shape))


def test_solver_nonconvergence_reported():
    g = Grid.rectangle(40, 40)
    with pytest.raises(EllipticSolveError):
        solve_elliptic(g, np.ones(g.shape), np.ones(g.shape), np.zeros(g.n_boundary),
                       rtol=1e-30, maxiter=1)

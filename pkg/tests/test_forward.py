import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmelab.forward import (BoundViolation, CoefficientSet, NewtonDivergence, ProblemParams,
                            RegularizationSchedule, SpaceTimeField, dtn_pm, energy_bound_data,
                            energy_norm, regularized_coefficients, solve_forward, solve_weak,
                            step_implicit, time_grid, weak_residual)
from pmelab.grid import Grid, boundary_flux

P = ProblemParams(2.0, 1.2)

# sup ||grad u^m|| / data-norm over random 1D data was 0.059 at calibration
ENERGY_C = 0.1


def wave_data(t, c=1.0):
    return np.stack([0.5 * c * c * t, 0.5 * c * np.clip(c * t - 1.0, 0.0, None)], 1)


def wave_exact(t, x, c=1.0):
    return 0.5 * c * np.clip(c * t[:, None] - x[None, :], 0.0, None)


def time_weights(t):
    w = np.full(t.size, t[1] - t[0])
    w[[0, -1]] *= 0.5
    return w


@pytest.mark.parametrize("m,q", [(2.0, 2.0), (2.0, 0.5), (3.0, 0.2), (4.0, 2.5)])
def test_params_reject(m, q):
    with pytest.raises(ValueError, match="m⁻¹<q<√m"):
        ProblemParams(m, q)


@pytest.mark.parametrize("m", [1.0, 0.5])
def test_params_need_m_above_one(m):
    with pytest.raises(ValueError, match="m > 1"):
        ProblemParams(m, 1.0)


def test_params_sigma():
    assert P.sigma == pytest.approx(0.6)
    assert ProblemParams(2.0, 0.8).sigma == pytest.approx(0.5)
    assert P.mprime == pytest.approx(2.0)


def test_regularized_maps():
    g = Grid.interval(5)
    c = CoefficientSet.constant(g, lam=1.0)
    maps = regularized_coefficients(P, c, RegularizationSchedule(10.0, 1.0))
    np.testing.assert_allclose(maps.a(0.5), 1.0)
    np.testing.assert_allclose(maps.a(0.01), maps.a(0.1))
    np.testing.assert_allclose(maps.b(0.25), 0.25 ** 1.2)
    assert 0.25 ** 1.2 == pytest.approx(0.18946, abs=1e-5)


def test_schedule_empty_window():
    with pytest.raises(ValueError):
        RegularizationSchedule(1.0, 0.5)


def test_coefficients_validate():
    g = Grid.interval(5)
    with pytest.raises(ValueError):
        CoefficientSet(np.zeros(5), np.ones(5), np.zeros(5)).validate(g)
    with pytest.raises(ValueError):
        CoefficientSet(np.ones(5), np.ones(5), -np.ones(5)).validate(g)


def test_step_steady_floor():
    g = Grid.interval(17)
    c = CoefficientSet.constant(g)
    k = 100.0
    maps = regularized_coefficients(P, c, RegularizationSchedule(k, 1.0))
    U = step_implicit(g, np.full(g.shape, 1 / k), 0.1, maps, c, 0.0, np.full(2, 1 / k))
    np.testing.assert_allclose(U, 1 / k, atol=1e-12)


def test_step_tracks_constant_solution():
    g = Grid.interval(9)
    c = CoefficientSet.constant(g, lam=1.0)
    k = 1e4
    t = time_grid(1.0, 32)
    maps = regularized_coefficients(P, c, RegularizationSchedule(k, 4.0))
    U = np.full(g.shape, 1 / k)
    errs = []
    for n in range(1, t.size):
        w = t[n] + 1 / k
        U = step_implicit(g, U, t[n] - t[n - 1], maps, c, 1.0 + w ** 1.2, np.full(2, w))
        errs.append(np.abs(U - w).max())
    assert max(errs) <= 2 * (t[1] - t[0])


def test_step_failure_modes():
    g = Grid.interval(33)
    c = CoefficientSet.constant(g, lam=1.0)
    maps = regularized_coefficients(P, c, RegularizationSchedule(100.0, 1.0))
    state = np.full(g.shape, 0.01)
    with pytest.raises(BoundViolation):
        step_implicit(g, state, 1.0, maps, c, 1e8, np.full(2, 0.01))
    with pytest.raises(NewtonDivergence):
        step_implicit(g, state, 1.0, maps, c, 1e8, np.full(2, 0.01), max_newton=1)


def test_zero_data_between_floor_and_drift():
    # the regularized source is f + 1/k, so the floor drifts by at most t/k
    g = Grid.interval(17)
    c = CoefficientSet.constant(g)
    t = time_grid(1.0, 16)
    u = solve_forward(g, P, c, np.zeros((t.size, 2)), None, 1e3, t)
    assert u.values.min() >= 1e-3 * (1 - 1e-12)
    assert np.all(u.values.max(axis=1) <= 1e-3 * (1 + t) * (1 + 1e-12))
    np.testing.assert_allclose(g.trace(u.values[-1]), 1e-3, rtol=1e-12)


def test_zero_data_with_absorption_stays_below_floor():
    g = Grid.interval(17)
    c = CoefficientSet.constant(g, lam=1.0)
    t = time_grid(1.0, 16)
    u = solve_forward(g, P, c, np.zeros((t.size, 2)), None, 1e3, t)
    assert u.values.max() <= 1e-3 * (1 + 1.0) + 1e-12
    assert u.values.min() >= 0.0


def test_weak_zero_limit():
    g = Grid.interval(17)
    c = CoefficientSet.constant(g)
    t = time_grid(1.0, 16)
    sol = solve_weak(g, P, c, np.zeros((t.size, 2)), None, t, ks=(1e3, 1e4, 1e5))
    assert sol.u.values.max() <= 2e-5 + 1e-12
    assert sol.error_bound <= 2e-5


def test_weak_constant_oracle():
    g = Grid.interval(33)
    c = CoefficientSet.constant(g, lam=1.0)
    t = time_grid(1.0, 64)
    phi = np.outer(t, np.ones(2))
    f = (1 + t ** 1.2)[:, None] * np.ones(g.shape)
    sol = solve_weak(g, P, c, phi, f, t, ks=(1e3, 1e4))
    err = np.abs(sol.u.values - t[:, None]).max()
    # frozen from the computed value 2.1e-3 (dt = 1/64)
    assert err <= 3e-3


@pytest.mark.parametrize("n,nt,tol", [(65, 128, 0.03), (129, 256, 0.02)])
def test_traveling_wave(n, nt, tol):
    g = Grid.interval(n)
    c = CoefficientSet.constant(g)
    t = time_grid(1.0, nt)
    u = solve_forward(g, P, c, wave_data(t), None, 1e4, t)
    assert np.abs(u.values - wave_exact(t, g.coords[0])).max() <= tol


def test_wave_l1_order():
    errs = []
    for n, nt in [(33, 64), (65, 128), (129, 256)]:
        g = Grid.interval(n)
        c = CoefficientSet.constant(g)
        t = time_grid(1.0, nt)
        u = solve_forward(g, P, c, wave_data(t), None, 1e6, t)
        e = np.abs(u.values[-1] - wave_exact(t, g.coords[0])[-1])
        errs.append(np.sum(e * g.cell_volume))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    # computed orders 0.89, 0.93; the finer pairs used in acceptance give 0.93, 0.95
    assert errs[0] > errs[1] > errs[2]
    assert orders[-1] >= 0.9, orders


def test_bound_with_source():
    g = Grid.interval(33)
    rng = np.random.default_rng(3)
    c = CoefficientSet(1.0 + rng.random(g.shape), 1.0 + rng.random(g.shape), rng.random(g.shape))
    t = time_grid(0.5, 32)
    phi = np.stack([t, 0.3 * t], 1)
    f = 0.7 * np.ones(g.shape)
    k = 1e3
    u = solve_forward(g, P, c, phi, f, k, t)
    assert u.values.min() >= 0
    bound = phi.max() + t * (0.7 + 1 / k) / 1.0 + 1 / k + 1e-8
    assert np.all(u.values.max(axis=1) <= bound)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_comparison(seed):
    rng = np.random.default_rng(seed)
    g = Grid.interval(17)
    c = CoefficientSet(0.5 + rng.random(g.shape), 0.5 + rng.random(g.shape), rng.random(g.shape))
    t = time_grid(0.5, 16)
    a = rng.random((2, 2))
    phi1 = np.outer(t, a[0]) + np.outer(t ** 2, a[1])
    phi2 = phi1 + np.outer(t, rng.random(2))
    f1 = rng.random() * np.ones(g.shape)
    f2 = f1 + rng.random() * rng.random(g.shape)
    u1 = solve_forward(g, P, c, phi1, f1, 1e3, t)
    u2 = solve_forward(g, P, c, phi2, f2, 1e3, t)
    assert np.all(u1.values <= u2.values + 1e-8)


def test_k_monotone():
    g = Grid.interval(33)
    c = CoefficientSet.constant(g, lam=0.5)
    t = time_grid(1.0, 32)
    sol = solve_weak(g, P, c, wave_data(t), None, t, ks=(1e2, 1e3, 1e4), keep=True)
    for ua, ub in zip(sol.trajectories, sol.trajectories[1:]):
        assert np.all(ub.values <= ua.values + 1e-8)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_energy_regression(seed):
    rng = np.random.default_rng(seed)
    g = Grid.interval(33)
    t = time_grid(1.0, 32)
    a, b = rng.random(2)
    phi = np.stack([a * t, b * t ** 2], 1)
    f = rng.random() * np.ones((t.size,) + g.shape)
    c = CoefficientSet.constant(g, lam=rng.random())
    u = solve_forward(g, P, c, phi, f, 1e3, t)
    assert energy_norm(g, u, P.m) <= ENERGY_C * energy_bound_data(g, phi, t, P, f)


def test_weak_residual_zero():
    g = Grid.interval(9)
    t = time_grid(1.0, 8)
    u = SpaceTimeField(t, np.zeros((t.size,) + g.shape))
    psi = SpaceTimeField(t, np.outer(1 - t, np.sin(np.pi * g.coords[0])))
    assert weak_residual(g, u, psi, P, CoefficientSet.constant(g)) == 0.0


def test_weak_residual_exact_constant():
    g = Grid.interval(33)
    c = CoefficientSet.constant(g, lam=1.0)
    t = time_grid(1.0, 256)
    u = SpaceTimeField(t, np.outer(t, np.ones(g.shape)))
    f = (1 + t ** 1.2)[:, None] * np.ones(g.shape)
    psi = SpaceTimeField(t, np.outer(1 - t, np.sin(np.pi * g.coords[0])))
    # quadrature error of the trapezoid rule only
    assert weak_residual(g, u, psi, P, c, f) < 1e-4


def test_weak_residual_rejects_bad_testfn():
    g = Grid.interval(9)
    t = time_grid(1.0, 8)
    u = SpaceTimeField(t, np.zeros((t.size,) + g.shape))
    with pytest.raises(ValueError):
        weak_residual(g, u, SpaceTimeField(t, np.ones((t.size,) + g.shape)), P,
                      CoefficientSet.constant(g))


def test_weak_residual_decreases():
    res = []
    for n, nt in [(33, 64), (65, 128), (129, 256)]:
        g = Grid.interval(n)
        c = CoefficientSet.constant(g)
        t = time_grid(1.5, nt)
        u = solve_forward(g, P, c, wave_data(t), None, 1e4, t)
        psi = SpaceTimeField(t, np.outer(t[-1] - t, np.sin(np.pi * g.coords[0])))
        res.append(weak_residual(g, u, psi, P, c))
    assert res[0] > res[1] > res[2]
    # first order in spacing + dt (computed 3.9e-3, 2.0e-3, 1.1e-3)
    assert res[2] <= 1.5e-3


def test_dtn_zero():
    g = Grid.interval(9)
    t = time_grid(1.0, 8)
    u = SpaceTimeField(t, np.zeros((t.size,) + g.shape))
    psi = SpaceTimeField(t, np.outer(1 - t, g.coords[0]))
    assert dtn_pm(g, u, psi, P, CoefficientSet.constant(g)) == 0.0


@pytest.mark.parametrize("n,nt", [(65, 192), (129, 384)])
def test_dtn_matches_flux(n, nt):
    # horizon 3 keeps the arrival of the degenerate front at x = 1 a small share of the pairing
    T = 3.0
    g = Grid.interval(n)
    c = CoefficientSet.constant(g)
    t = time_grid(T, nt)
    u = solve_forward(g, P, c, wave_data(t), None, 1e4, t)
    psi = SpaceTimeField(t, np.outer(T - t, g.coords[0]))
    d = dtn_pm(g, u, psi, P, c)
    fl = np.array([boundary_flux(g, u[k] ** 2, c.gamma)[1] for k in range(t.size)])
    ref = np.sum(time_weights(t) * (T - t) * fl)
    assert abs(d - ref) <= 0.02 * abs(ref)
    exact = -0.5 * (T - 1) ** 3 / 6
    assert abs(d - exact) <= 0.01 * abs(exact)


def test_dtn_space_independent_psi():
    g = Grid.interval(17)
    rng = np.random.default_rng(0)
    c = CoefficientSet(1 + rng.random(g.shape), np.ones(g.shape), rng.random(g.shape))
    t = time_grid(1.0, 16)
    u = SpaceTimeField(t, rng.random((t.size,) + g.shape))
    psi_t = 1 - t ** 2
    psi = SpaceTimeField(t, np.outer(psi_t, np.ones(g.shape)))
    w = time_weights(t)
    dpsi = np.gradient(psi.values, t, axis=0, edge_order=2)
    vol = g.cell_volume
    expect = np.sum(w[:, None] * vol * (c.lam * psi.values * u.values ** 1.2
                                       - c.eps * dpsi * u.values))
    assert dtn_pm(g, u, psi, P, c) == pytest.approx(expect, rel=1e-12)


def test_2d_symmetric_data_symmetric_solution():
    g = Grid.rectangle(17, 17)
    c = CoefficientSet.constant(g)
    t = time_grid(0.5, 16)
    X, Y = g.coords
    phi = np.array([tt * (1 + X + Y) for tt in t])
    u = solve_forward(g, P, c, phi, None, 1e3, t)
    np.testing.assert_allclose(u.values[-1], u.values[-1].T, atol=1e-8)

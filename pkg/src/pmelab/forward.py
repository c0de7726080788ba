"""
Forward solver for  eps u_t - div(gamma grad u^m) + lam u^q = f.

The degenerate problem is approximated by the non-degenerate regularized
problems

    eps d_t u_k - div(a_k(x, u_k) grad u_k) + b_k(x, u_k) = f + 1/k,
    u_k(0) = 1/k,   u_k = phi + 1/k on the lateral boundary,

whose solutions decrease to the weak solution as k grows.  Each regularized
problem is integrated with backward Euler; the nonlinear step is solved by a
damped Newton iteration written in the Kirchhoff variable Phi_k(u), so that
inside the regularization window the discrete diffusion term is exactly the
discrete div(gamma grad u^m).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .grid import gradient_energy, split_operator

logger = logging.getLogger(__name__)


class NewtonDivergence(RuntimeError):
    """Newton iteration failed; the caller should reduce the time step."""


class BoundViolation(RuntimeError):
    pass


class MaximumPrincipleViolation(AssertionError):
    pass


class MonotonicityViolation(AssertionError):
    pass


@dataclass(frozen=True)
class ProblemParams:
    m: float
    q: float

    def __post_init__(self):
        if not self.m > 1:
            raise ValueError(f"need m > 1, got m={self.m}")
        if not (1.0 / self.m < self.q < np.sqrt(self.m)):
            raise ValueError(
                f"need m⁻¹<q<√m (1/m < q < sqrt(m)), got m={self.m}, q={self.q}")

    @property
    def mprime(self):
        return self.m / (self.m - 1.0)

    @property
    def sigma(self):
        return max(1.0, self.q) / self.m


@dataclass(frozen=True)
class CoefficientSet:
    """Node fields eps, gamma (positive lower bounds) and lam (>= 0)."""

    eps: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        for name in ("eps", "gamma", "lam"):
            arr = np.asarray(getattr(self, name), float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, arr)
        if self.eps.shape != self.gamma.shape or self.lam.shape != self.gamma.shape:
            raise ValueError("coefficient fields must share one shape")

    def validate(self, grid):
        for name in ("eps", "gamma", "lam"):
            grid.check_field(getattr(self, name), name)
        inside = grid.inside
        if np.any(self.eps[inside] <= 0) or np.any(self.gamma[inside] <= 0):
            raise ValueError("eps and gamma need strictly positive lower bounds")
        if np.any(self.lam[inside] < 0):
            raise ValueError("lam must be nonnegative")
        return self

    @classmethod
    def constant(cls, grid, eps=1.0, gamma=1.0, lam=0.0):
        one = np.ones(grid.shape)
        return cls(eps * one, gamma * one, lam * one)


@dataclass
class SpaceTimeField:
    """Node fields on a uniform time grid; ``values[n]`` lives at ``t[n]``."""

    t: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, float)
        self.values = np.asarray(self.values, float)
        if self.values.shape[0] != self.t.size:
            raise ValueError("one field per time level required")

    @property
    def T(self):
        return float(self.t[-1])

    @property
    def dt(self):
        return float(self.t[1] - self.t[0])

    def __getitem__(self, n):
        return self.values[n]

    def map(self, fn):
        return SpaceTimeField(self.t.copy(), fn(self.values))


def time_grid(T, n_steps):
    return np.linspace(0.0, float(T), int(n_steps) + 1)


@dataclass(frozen=True)
class RegularizationSchedule:
    """Window [floor, ceiling] on which the regularized maps equal the true ones."""

    k: float
    ceiling: float

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("k must be positive")
        if not self.floor < self.ceiling:
            raise ValueError("regularization window is empty (floor >= ceiling)")

    @property
    def floor(self):
        return 1.0 / self.k

    @classmethod
    def for_data(cls, k, phi_sup, f_sup, T, eps_min=1.0):
        """Window from the a-priori bound of the regularized problem.

        With eps_min = 1 this is  sup phi + T sup f + (1+T)/k.
        """
        ceiling = 1.0 / k + phi_sup + T * (f_sup + 1.0 / k) / min(float(eps_min), 1.0)
        return cls(k, ceiling)


class RegularizedMaps:
    """The maps a_k(x, z) = m gamma z^(m-1) and b_k(x, z) = lam z^q, cut off outside the window.

    ``a`` is clamped (constant in z) outside [floor, ceiling].  ``b`` is
    clamped above the ceiling and continued linearly to b(0) = 0 below the
    floor, which keeps 0 a subsolution of the regularized problem.
    ``phi`` is the Kirchhoff transform with a = gamma * phi'.
    """

    def __init__(self, params, coeffs, sched):
        self.m, self.q = params.m, params.q
        self.gamma, self.lam = coeffs.gamma, coeffs.lam
        self.lo, self.hi = sched.floor, sched.ceiling

    def clamp(self, z):
        return np.clip(z, self.lo, self.hi)

    def a(self, z):
        return self.m * self.gamma * self.clamp(z) ** (self.m - 1)

    def b(self, z):
        z = np.asarray(z, float)
        zc = self.clamp(z)
        return self.lam * np.where(z < self.lo, self.lo ** (self.q - 1) * z, zc ** self.q)

    def db(self, z):
        z = np.asarray(z, float)
        inside = (z >= self.lo) & (z <= self.hi)
        below = z < self.lo
        zc = self.clamp(z)
        return self.lam * np.where(inside, self.q * zc ** (self.q - 1),
                                   np.where(below, self.lo ** (self.q - 1), 0.0))

    def phi(self, z):
        m, lo, hi = self.m, self.lo, self.hi
        z = np.asarray(z, float)
        zc = self.clamp(z)
        return zc ** m + m * zc ** (m - 1) * (z - zc)

    def dphi(self, z):
        return self.m * self.clamp(z) ** (self.m - 1)


def regularized_coefficients(params, coeffs, sched):
    """Return the regularized maps (diffusivity ``.a``, absorption ``.b``)."""
    return RegularizedMaps(params, coeffs, sched)


def step_implicit(grid, state, dt, maps, coeffs, f, dirichlet, *, tol=1e-9,
                  max_newton=60, check_bounds=True):
    """One backward Euler step of the regularized problem.

    Solves  eps (U - state)/dt - div(gamma grad Phi_k(U)) + b_k(U) = f  at
    interior nodes with U = dirichlet on the boundary, by damped Newton with a
    backtracking line search.  ``f`` is a node field (or scalar).

    Raises :class:`NewtonDivergence` if the scaled residual does not drop
    below ``tol``, and :class:`BoundViolation` if the result leaves
    [0, ceiling] by more than 1e-10 (relative).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    state = grid.check_field(state, "state")
    Lii, Lib = split_operator(grid, coeffs.gamma)
    ii, bi = grid.interior_index, grid.boundary_index
    eps = coeffs.eps.ravel()[ii]
    f = np.broadcast_to(np.asarray(f, float), grid.shape).ravel()[ii]
    prev = state.ravel()[ii]
    g = np.asarray(dirichlet, float)
    g = grid.trace(g) if g.shape == grid.shape else g

    sub = _SubMaps(maps, ii)
    phib = Lib @ maps.phi(g)

    def residual(u):
        return eps * (u - prev) / dt - (Lii @ sub.phi(u) + phib) + sub.b(u) - f

    u = prev.copy()
    r = residual(u)
    scale = max(np.max(np.abs(eps * prev / dt)), np.max(np.abs(f)), np.max(np.abs(sub.b(u))),
                np.max(np.abs(phib)), 1e-300)
    res = np.max(np.abs(r)) / scale
    for _ in range(max_newton):
        if res <= 1e-14:
            break
        J = sp.diags(eps / dt + sub.db(u)) - Lii @ sp.diags(sub.dphi(u))
        du = spsolve(J.tocsc(), -r)
        if not np.all(np.isfinite(du)):
            raise NewtonDivergence("singular Newton system")
        rn = np.linalg.norm(r)
        step = 1.0
        for _ in range(40):
            u_new = u + step * du
            r_new = residual(u_new)
            if np.linalg.norm(r_new) <= (1 - 1e-4 * step) * rn:
                break
            step *= 0.5
        else:
            break
        u, r = u_new, r_new
        new = np.max(np.abs(r)) / scale
        stalled = new > 0.5 * res
        res = new
        if stalled and res <= tol:
            break
    if not res <= tol:
        raise NewtonDivergence(f"Newton residual {res:.2e} exceeds {tol:.1e}")

    U = np.zeros(grid.size)
    U[ii] = u
    U[bi] = g
    U = U.reshape(grid.shape)
    if check_bounds:
        top = maps.hi
        slack = 1e-10 * max(1.0, top)
        if U[grid.inside].min() < -slack or U[grid.inside].max() > top + slack:
            raise BoundViolation(
                f"step left [0, {top:.3g}]: range [{U.min():.3g}, {U.max():.3g}]")
    return U


class _SubMaps:
    """RegularizedMaps restricted to a set of flat node indices."""

    def __init__(self, maps, index):
        self.maps = maps
        self.gamma = maps.gamma.ravel()[index]
        self.lam = maps.lam.ravel()[index]

    def phi(self, u):
        return self.maps.phi(u)

    def dphi(self, u):
        return self.maps.dphi(u)

    def b(self, u):
        m = self.maps
        zc = m.clamp(u)
        return self.lam * np.where(u < m.lo, m.lo ** (m.q - 1) * u, zc ** m.q)

    def db(self, u):
        m = self.maps
        inside = (u >= m.lo) & (u <= m.hi)
        zc = m.clamp(u)
        return self.lam * np.where(inside, m.q * zc ** (m.q - 1),
                                   np.where(u < m.lo, m.lo ** (m.q - 1), 0.0))


def _boundary_levels(grid, phi, t):
    phi = np.asarray(phi, float)
    if phi.shape == (t.size,) + grid.shape:
        phi = phi.reshape(t.size, -1)[:, grid.boundary_index]
    if phi.shape != (t.size, grid.n_boundary):
        raise ValueError("phi must hold one boundary trace (or node field) per time level")
    return phi


def _source_levels(grid, f, t):
    if f is None:
        return np.zeros((t.size,) + grid.shape)
    f = np.asarray(f, float)
    return np.broadcast_to(f, (t.size,) + grid.shape) if f.ndim <= grid.dim else f


def solve_forward(grid, params, coeffs, phi, f, k, t, *, tol=1e-9, max_halvings=8,
                  check=True):
    """Trajectory u_k of the regularized problem with index k.

    Parameters
    ----------
    phi : array, shape (len(t), n_boundary) or (len(t),) + grid.shape
        Dirichlet data per time level (phi >= 0, phi(0) = 0).
    f : array or None
        Source per time level, shape (len(t),) + grid.shape, or a node
        field / scalar constant in time.  Must be >= 0.
    k : float
        Regularization index; floor 1/k.
    t : array
        Uniform time levels starting at 0.

    The node-wise bounds 0 <= u_k <= 1/k + sup phi + t sup(f_k / eps) are
    checked to 1e-8 unless ``check`` is False.
    """
    coeffs.validate(grid)
    t = np.asarray(t, float)
    phi = _boundary_levels(grid, phi, t)
    fl = _source_levels(grid, f, t)
    if np.any(phi < 0) or np.any(fl < 0):
        raise ValueError("phi and f must be nonnegative")
    eps_min = float(coeffs.eps[grid.inside].min())
    sched = RegularizationSchedule.for_data(k, float(phi.max()), float(fl.max()), float(t[-1]),
                                            eps_min)
    maps = RegularizedMaps(params, coeffs, sched)
    floor = sched.floor

    out = np.empty((t.size,) + grid.shape)
    out[0] = np.where(grid.inside, floor, 0.0)
    for n in range(1, t.size):
        out[n] = _advance(grid, out[n - 1], t[n - 1], t[n], maps, coeffs,
                          (fl[n - 1], fl[n]), (phi[n - 1] + floor, phi[n] + floor),
                          floor, tol, max_halvings)
    u = SpaceTimeField(t, out)
    if check:
        ratio = ((fl + floor) / np.where(grid.inside, coeffs.eps, np.inf))
        rate = np.maximum.accumulate(ratio.reshape(t.size, -1).max(axis=1))
        upper = floor + phi.max() + t * rate
        over = (out.reshape(t.size, -1) - upper[:, None]).max()
        under = out[:, grid.inside].min()
        if under < -1e-8 or over > 1e-8:
            raise MaximumPrincipleViolation(
                f"bounds violated: min {under:.3e}, excess over bound {over:.3e}")
    return u


def _advance(grid, state, t0, t1, maps, coeffs, f_pair, g_pair, floor, tol, depth):
    f1 = f_pair[1] + floor
    try:
        return step_implicit(grid, state, t1 - t0, maps, coeffs, f1, g_pair[1], tol=tol)
    except NewtonDivergence:
        if depth == 0:
            raise
        logger.debug("halving dt at t=%g", t1)
        tm = 0.5 * (t0 + t1)
        fm = 0.5 * (f_pair[0] + f_pair[1])
        gm = 0.5 * (g_pair[0] + g_pair[1])
        mid = _advance(grid, state, t0, tm, maps, coeffs, (f_pair[0], fm), (g_pair[0], gm),
                       floor, tol, depth - 1)
        return _advance(grid, mid, tm, t1, maps, coeffs, (fm, f_pair[1]), (gm, g_pair[1]),
                        floor, tol, depth - 1)


@dataclass
class WeakSolution:
    """Finest-k trajectory of a k-schedule with a monotone-limit error bar."""

    u: SpaceTimeField
    ks: tuple
    error_estimate: np.ndarray
    trajectories: list = field(default_factory=list, repr=False)

    @property
    def error_bound(self):
        return float(self.error_estimate.max())


def solve_weak(grid, params, coeffs, phi, f, t, ks=(1e2, 1e3, 1e4), *, tol=1e-9,
               keep=False):
    """Run the k-schedule and return the finest-k solution.

    Asserts u_{k'} <= u_k + 1e-8 node-wise for consecutive k < k'.  The error
    estimate extrapolates the last two members assuming an O(1/k) gap.
    """
    ks = tuple(sorted(float(k) for k in ks))
    runs = [solve_forward(grid, params, coeffs, phi, f, k, t, tol=tol) for k in ks]
    for (ka, ua), (kb, ub) in zip(zip(ks, runs), zip(ks[1:], runs[1:])):
        excess = float((ub.values - ua.values).max())
        if excess > 1e-8:
            raise MonotonicityViolation(
                f"u_k not decreasing in k: k={kb:g} exceeds k={ka:g} by {excess:.2e}")
    if len(ks) > 1:
        ka, kb = ks[-2], ks[-1]
        gap = runs[-2].values - runs[-1].values
        est = gap * (1.0 / kb) / (1.0 / ka - 1.0 / kb)
    else:
        est = np.full_like(runs[-1].values, 1.0 / ks[-1])
    return WeakSolution(runs[-1], ks, np.abs(est), runs if keep else [])


def _time_weights(t):
    w = np.full(t.size, t[1] - t[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _space_time_terms(grid, u, psi, params, coeffs, f):
    m, q = params.m, params.q
    t = u.t
    wt = _time_weights(t)
    dpsi = np.gradient(psi.values, t, axis=0, edge_order=2)
    vol = grid.cell_volume
    grad = sum(wt[n] * gradient_energy(grid, psi[n], u[n] ** m, coeffs.gamma)
               for n in range(t.size))
    absorb = float(np.sum(wt[:, None] * (vol * coeffs.lam * psi.values * u.values ** q)
                          .reshape(t.size, -1)))
    accum = float(np.sum(wt[:, None] * (vol * coeffs.eps * dpsi * u.values).reshape(t.size, -1)))
    src = 0.0
    if f is not None:
        fl = _source_levels(grid, f, t)
        src = float(np.sum(wt[:, None] * (vol * psi.values * fl).reshape(t.size, -1)))
    return grad, absorb, accum, src


def weak_residual(grid, u, testfn, params, coeffs, f=None):
    """|LHS - RHS| of the weak formulation for one test function.

    The test function must vanish on the lateral boundary and at t = T.
    """
    psi = testfn.values
    bmax = np.abs(psi.reshape(psi.shape[0], -1)[:, grid.boundary_index]).max()
    scale = max(np.abs(psi).max(), 1e-300)
    if bmax > 1e-12 * scale or np.abs(psi[-1]).max() > 1e-12 * scale:
        raise ValueError("test function must vanish on the lateral boundary and at t = T")
    grad, absorb, accum, src = _space_time_terms(grid, u, testfn, params, coeffs, f)
    return abs(grad + absorb - accum - src)


def dtn_pm(grid, u, psi, params, coeffs, f=None):
    """Neumann data of u paired with psi, computed as a volume integral.

    <gamma d_nu u^m, psi> = int gamma grad psi . grad u^m + lam psi u^q - eps psi_t u  (- psi f).
    """
    scale = max(np.abs(psi.values).max(), 1e-300)
    if np.abs(psi.values[-1]).max() > 1e-12 * scale:
        raise ValueError("psi must vanish at t = T")
    grad, absorb, accum, src = _space_time_terms(grid, u, psi, params, coeffs, f)
    return grad + absorb - accum - src


def energy_norm(grid, u, m):
    """Discrete ||grad u^m||_{L^2(Q_T)}."""
    wt = _time_weights(u.t)
    total = sum(wt[n] * gradient_energy(grid, u[n] ** m, u[n] ** m) for n in range(u.t.size))
    return float(np.sqrt(total))


def energy_bound_data(grid, phi, t, params, f=None):
    """(1+T)^(1/2) (||phi^(m+q)||_{C^{0,1}} + ||phi||_C + ||f||_inf) for boundary data per level."""
    t = np.asarray(t, float)
    phi = _boundary_levels(grid, phi, t)
    p = phi ** (params.m + params.q)
    lip_t = np.abs(np.diff(p, axis=0)).max() / (t[1] - t[0]) if t.size > 1 else 0.0
    lip = lip_t
    if grid.dim == 2 and grid.n_boundary > 1:
        X, Y = grid.coords
        pts = np.stack([X.ravel()[grid.boundary_index], Y.ravel()[grid.boundary_index]], 1)
        dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        near = (dist > 0) & (dist <= 1.5 * max(grid.spacing))
        i, j = np.nonzero(near)
        if i.size:
            lip = max(lip, (np.abs(p[:, i] - p[:, j]) / dist[i, j]).max())
    fsup = 0.0 if f is None else float(np.max(f))
    return float(np.sqrt(1 + t[-1]) * (p.max() + lip + phi.max() + fsup))

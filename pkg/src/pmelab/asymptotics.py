"""Large-amplitude asymptotics of the transformed boundary map.

For boundary data v = h t^m g the transform behaves like

    V = h c V0 + h^(1/m) V_t + h^(q/m) V_a + R2,

so the scaled Neumann map h^-1 gamma d_nu V has the expansion

    c d_nu V0 + h^(1/m - 1) d_nu V_t + h^(q/m - 1) d_nu V_a + O(h^(sigma^2 - 1)).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .forward import solve_weak, time_grid
from .grid import boundary_flux, solve_elliptic
from .transform import moments, time_weight_constant, transform_V, transform_weights

logger = logging.getLogger(__name__)


class IllConditionedFit(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeWeights:
    """c = int (T-t)^alpha t^m,  w_t = alpha int (T-t)^(alpha-1) t,  w_a = int (T-t)^alpha t^q."""

    c: float
    w_t: float
    w_a: float


def time_weights(T, alpha, m, q, t=None):
    """Weights of the expansion terms.

    With a time grid ``t`` the weights are the discrete ones matching the
    trapezoid transform and the implicit moments, which makes the
    expansion consistent at the discrete level.  Otherwise they are the
    exact integrals (log-Beta for c and w_a, quadrature for w_t).
    """
    if t is None:
        w_t, _ = integrate.quad(lambda s: alpha * (T - s) ** (alpha - 1) * s, 0.0, T,
                                epsabs=0.0, epsrel=1e-13)
        return TimeWeights(time_weight_constant(T, alpha, m), float(w_t),
                           time_weight_constant(T, alpha, q))
    t = np.asarray(t, float)
    W = transform_weights(t, T, alpha)
    return TimeWeights(float(np.sum(W * t ** m)), float(np.sum(W[1:])),
                       float(np.sum(W[1:] * t[1:] ** q)))


def solve_V0(grid, gamma, g):
    """gamma-harmonic extension of g >= 0."""
    g = np.asarray(g, float)
    if np.any(g < 0):
        raise ValueError("g must be nonnegative")
    return solve_elliptic(grid, gamma, np.zeros(grid.shape), g)


def _correction(grid, gamma, weight, power, V0):
    if np.any(V0 < -1e-12):
        raise ValueError("V0 must be nonnegative")
    rhs = weight * np.clip(V0, 0.0, None) ** power * grid.interior.astype(float)
    return solve_elliptic(grid, gamma, rhs, np.zeros(grid.n_boundary))


def solve_Vt(grid, gamma, eps, V0, T, alpha, m, t=None):
    """Solve div(gamma grad V_t) = eps w_t V0^(1/m), V_t = 0 on the boundary."""
    w = time_weights(T, alpha, m, 1.0, t).w_t
    return _correction(grid, gamma, eps * w, 1.0 / m, V0)


def solve_Va(grid, gamma, lam, V0, T, alpha, m, q, t=None):
    """Solve div(gamma grad V_a) = lam w_a V0^(q/m), V_a = 0 on the boundary."""
    w = time_weights(T, alpha, m, q, t).w_a
    return _correction(grid, gamma, lam * w, q / m, V0)


@dataclass
class LambdaSample:
    """One point of an h-sweep."""

    h: float
    trace: np.ndarray
    V: np.ndarray
    N_t: np.ndarray
    N_a: np.ndarray
    k_error: float


def boundary_data(grid, g, h, m, t):
    """Dirichlet data phi = (h t^m g)^(1/m) per time level."""
    g = np.asarray(g, float)
    if g.shape == grid.shape:
        g = grid.trace(g)
    return (h ** (1.0 / m)) * np.outer(t, g ** (1.0 / m))


def lambda_h(grid, params, coeffs, g, h, tparams, n_steps=128, ks=(1e6, 1e7, 1e8)):
    """h^-1 gamma d_nu V for boundary data v = h t^m g, from the full forward pipeline."""
    t = time_grid(tparams.T, n_steps)
    phi = boundary_data(grid, g, h, params.m, t)
    sol = solve_weak(grid, params, coeffs, phi, None, t, ks=ks)
    v = sol.u.map(lambda a: a ** params.m)
    V = transform_V(v, tparams)
    Nt, Na = moments(v, coeffs, tparams, params.m, params.q, rule="implicit")
    trace = boundary_flux(grid, V, coeffs.gamma) / h
    return LambdaSample(float(h), trace, V, Nt, Na, sol.error_bound)


def sweep(grid, params, coeffs, g, hs, tparams, n_steps=128, ks=(1e6, 1e7, 1e8)):
    out = []
    for h in hs:
        logger.info("h-sweep: h=%g", h)
        out.append(lambda_h(grid, params, coeffs, g, h, tparams, n_steps, ks))
    return out


@dataclass
class ExpansionFit:
    """Per-boundary-node fit of the scaled map after removing the leading term.

    ``traces`` maps each fitted exponent of h to its coefficient trace;
    ``leading`` is the subtracted (or fitted) coefficient of h^0.
    """

    hs: np.ndarray
    exponents: tuple
    traces: dict
    leading: np.ndarray
    residuals: np.ndarray
    condition: float
    remainder_exponent: float = np.nan
    notes: list = field(default_factory=list)

    def trace(self, exponent):
        for e, tr in self.traces.items():
            if abs(e - exponent) < 1e-12:
                return tr
        raise KeyError(exponent)


def loglog_slope(x, y):
    """Least-squares slope of log y against log x (y > 0)."""
    x = np.log(np.asarray(x, float))
    y = np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


def second_order_exponents(m, q):
    """Exponents of h in the next terms of the scaled map: 2/m - 2, (1+q)/m - 2, 2q/m - 2."""
    return tuple(sorted({2.0 / m - 2.0, (1.0 + q) / m - 2.0, 2.0 * q / m - 2.0}))


def fit_expansion(hs, traces, m, q, leading=None, extra_exponents=None, max_condition=1e6):
    """Fit A h^(1/m-1) + B h^(q/m-1) (+ remainder terms) per boundary node.

    Parameters
    ----------
    hs : sequence of h values (at least 6, geometrically spaced).
    traces : array, shape (len(hs), n_boundary)
        Scaled Neumann traces h^-1 gamma d_nu V.
    leading : array or None
        Known coefficient of h^0 (c gamma d_nu V0).  If None it is fitted as
        an extra column.
    extra_exponents : sequence or None
        Exponents of additional remainder columns.  Defaults to the
        second-order exponents of the formal expansion; pass ``()`` for the
        bare two-term model.

    The columns h^e are scaled to unit norm before the least-squares solve;
    the condition number of the scaled design is reported and a fit above
    ``max_condition`` raises.  ``remainder_exponent`` is the log-log slope of
    the part of the data not explained by the leading and two correction
    terms.
    """
    hs = np.asarray(hs, float)
    Y = np.asarray(traces, float)
    if hs.size < 6:
        raise ValueError("need at least 6 h values")
    if q == 1.0:
        raise ValueError("q = 1 merges the two correction exponents; use the two-T recovery")
    if extra_exponents is None:
        extra_exponents = second_order_exponents(m, q)
    main = [1.0 / m - 1.0, q / m - 1.0]
    exps = main + list(extra_exponents)
    if leading is None:
        exps = [0.0] + exps
    else:
        Y = Y - np.asarray(leading, float)[None, :]
    X = np.column_stack([hs ** e for e in exps])
    norms = np.linalg.norm(X, axis=0)
    Xs = X / norms
    cond = float(np.linalg.cond(Xs))
    if cond > max_condition:
        raise IllConditionedFit(f"design condition number {cond:.2e} exceeds {max_condition:.0e}")
    coef, *_ = np.linalg.lstsq(Xs, Y, rcond=None)
    coef = coef / norms[:, None]
    resid = Y - X @ coef
    traces_out = {e: coef[i] for i, e in enumerate(exps) if e != 0.0}
    lead = coef[0] if leading is None else np.asarray(leading, float)
    rest = np.asarray(traces, float) - lead[None, :]
    for e in main:
        rest = rest - np.outer(hs ** e, traces_out[e])
    rnorm = np.linalg.norm(rest, axis=1)
    rexp = loglog_slope(hs, rnorm) if np.all(rnorm > 0) else -np.inf
    fit = ExpansionFit(hs, tuple(exps), traces_out, lead, resid, cond, rexp)
    for e in fit.exponents:
        if not -1.0 <= e <= 0.0:
            fit.notes.append(f"exponent {e:.3f} outside [-1, 0]")
    return fit


def remainder_norms(samples, c, V0, Vt, Va, m, q):
    """sup norms of R1 = V - h c V0 and R2 = R1 - h^(1/m) V_t - h^(q/m) V_a over the sweep."""
    hs = np.array([s.h for s in samples])
    r1 = np.array([np.abs(s.V - s.h * c * V0).max() for s in samples])
    r2 = np.array([np.abs(s.V - s.h * c * V0 - s.h ** (1.0 / m) * Vt - s.h ** (q / m) * Va).max()
                   for s in samples])
    return hs, r1, r2


def sign_chain(grid, samples, c, V0, Vt, Va, tol=1e-10):
    """Node-wise V0 >= 0, V_t <= 0, V_a <= 0 and R1 <= 0.

    R1 is subharmonic, so its maximum sits on the boundary, where it only
    carries the 1/k shift of the regularized data.  The check on R1 is that
    the largest interior value does not exceed the largest boundary value.
    """
    out = {"V0_nonneg": bool(V0.min() >= -tol * max(1.0, np.abs(V0).max())),
           "Vt_nonpos": bool(Vt.max() <= tol * max(1e-300, np.abs(Vt).max())),
           "Va_nonpos": bool(Va.max() <= tol * max(1e-300, np.abs(Va).max()))}
    worst = -np.inf
    for s in samples:
        R1 = (s.V - s.h * c * V0).ravel()
        shift = max(float(R1[grid.boundary_index].max()), 0.0)
        scale = max(np.abs(R1).max(), 1e-300)
        worst = max(worst, (float(R1[grid.interior_index].max()) - shift) / scale)
    out["R1_nonpos"] = bool(worst <= tol)
    out["R1_interior_excess"] = float(worst)
    return out


def supersolution_check(v0, v, tol=1e-8):
    """Report whether v0 >= v node-wise (+tol) and the largest violation."""
    a = np.asarray(getattr(v0, "values", v0), float)
    b = np.asarray(getattr(v, "values", v), float)
    if a.shape != b.shape:
        raise ValueError("v0 and v must live on the same grid")
    viol = float(max((b - a).max(), 0.0))
    return {"passed": viol <= tol, "max_violation": viol}


def leading_envelope(V0, h, m, t):
    """v0(t, x) = h t^m V0(x) on the time grid."""
    return h * np.multiply.outer(np.asarray(t, float) ** m, V0)

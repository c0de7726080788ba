"""
The substitution v = u^m and the time-integral transform

    V(x) = int_0^T (T - t)^alpha v(t, x) dt,

which turns the evolution into the elliptic identity
div(gamma grad V) = N_t + N_a with the moments

    N_t = eps * alpha * int_0^T (T - t)^(alpha - 1) v^(1/m) dt,
    N_a = lam * int_0^T (T - t)^alpha v^(q/m) dt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import gammaln

from .forward import SpaceTimeField


class InequalityViolation(AssertionError):
    pass


@dataclass(frozen=True)
class TransformParams:
    T: float
    alpha: float
    h: float = 2.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not self.h > 1:
            raise ValueError("h must exceed 1")

    def check(self, m):
        """Raise unless alpha > m' - 1 = 1/(m - 1)."""
        if not self.alpha > 1.0 / (m - 1.0):
            raise ValueError(f"need alpha > 1/(m-1) = {1.0 / (m - 1.0):.4g}, got {self.alpha}")
        return self

    def constant(self, m):
        return time_weight_constant(self.T, self.alpha, m)


def auto_alpha(m):
    return max(2.0, 1.0 / (m - 1.0) + 1.0)


def auto_T(m, q, alpha, threshold=0.1, T0=1.0, max_halvings=60):
    """Halve T from T0 until T^(alpha/m' - 1/m) and T^(alpha + m/(m-q)) are both <= threshold."""
    mprime = m / (m - 1.0)
    e1 = alpha / mprime - 1.0 / m
    e2 = alpha + m / (m - q)
    if e1 <= 0 or e2 <= 0:
        raise ValueError("absorption exponents must be positive (alpha too small)")
    T = float(T0)
    for _ in range(max_halvings):
        if T ** e1 <= threshold and T ** e2 <= threshold:
            return T
        T *= 0.5
    raise RuntimeError("no admissible T found")


def time_weight_constant(T, alpha, p):
    """int_0^T (T - t)^alpha t^p dt = T^(1+alpha+p) Gamma(1+alpha) Gamma(1+p) / Gamma(2+alpha+p)."""
    if not T > 0:
        raise ValueError("T must be positive")
    if not (alpha > -1 and p > -1):
        raise ValueError("exponents must exceed -1")
    return float(np.exp((1 + alpha + p) * np.log(T) + gammaln(1 + alpha) + gammaln(1 + p)
                        - gammaln(2 + alpha + p)))


def quadrature_time_weight(T, alpha, p):
    """Adaptive-quadrature value of int_0^T (T - t)^alpha t^p dt (independent check)."""
    val, _ = integrate.quad(lambda s: (1.0 - s) ** alpha * s ** p, 0.0, 1.0,
                            epsabs=0.0, epsrel=1e-13, limit=200)
    return val * T ** (1 + alpha + p)


def v_of_u(u, m):
    """v = u^m node-wise."""
    if np.any(u.values < 0):
        raise ValueError("u must be nonnegative")
    return u.map(lambda a: a ** m)


def _trapezoid(t):
    dt = np.diff(t)
    w = np.zeros(t.size)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def _check_time(v, T):
    if abs(v.t[0]) > 1e-14 or abs(v.t[-1] - T) > 1e-12 * max(1.0, T):
        raise ValueError("time grid must run from 0 to T")


def transform_weights(t, T, alpha):
    """Trapezoid weights times (T - t)^alpha."""
    return _trapezoid(t) * np.clip(T - t, 0.0, None) ** alpha


def transform_V(v, params):
    """Weighted trapezoid quadrature of (T - t)^alpha v(t, .)."""
    T, alpha = params.T, params.alpha
    _check_time(v, T)
    if np.any(v.values < 0):
        raise ValueError("v must be nonnegative")
    w = transform_weights(v.t, T, alpha)
    return np.tensordot(w, v.values, axes=1)


def _singular_power(s, e):
    with np.errstate(divide="ignore"):
        out = np.where(s > 0, s ** e, 0.0) if e < 0 else s ** e
    return out


def moments(v, coeffs, params, m, q, rule="trapezoid"):
    """Moments (N_t, N_a) of a trajectory v = u^m.

    ``rule="trapezoid"`` applies the trapezoid rule to both integrals.
    ``rule="implicit"`` uses the summation-by-parts form that matches a
    backward Euler trajectory exactly, so that
    div(gamma grad V) = N_t + N_a - (source moment) holds to solver precision:

        N_t = eps * sum_{n>=1} W_n (u^n - u^(n-1)) / dt,   N_a = lam * sum_{n>=1} W_n (u^n)^q,

    with W_n the transform weights and u = v^(1/m).  Summation by parts shows
    the implicit N_t omits the term eps T^alpha u(0) of the trapezoid one
    (of size eps T^alpha / k on regularized trajectories).
    """
    T, alpha = params.T, params.alpha
    _check_time(v, T)
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if np.any(v.values < 0):
        raise ValueError("v must be nonnegative")
    t = v.t
    u = v.values ** (1.0 / m)
    if rule == "trapezoid":
        wt = _trapezoid(t)
        kt = wt * alpha * _singular_power(np.clip(T - t, 0, None), alpha - 1.0)
        ka = wt * np.clip(T - t, 0, None) ** alpha
        Nt = coeffs.eps * np.tensordot(kt, u, axes=1)
        Na = coeffs.lam * np.tensordot(ka, v.values ** (q / m), axes=1)
    elif rule == "implicit":
        W = transform_weights(t, T, alpha)
        dt = np.diff(t)
        du = np.diff(u, axis=0)
        Nt = coeffs.eps * np.tensordot(W[1:] / dt, du, axes=1)
        Na = coeffs.lam * np.tensordot(W[1:], u[1:] ** q, axes=1)
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return Nt, Na


def source_moment(f, t, params):
    """sum_{n>=1} W_n f^n, the source contribution under the implicit rule."""
    W = transform_weights(np.asarray(t, float), params.T, params.alpha)
    f = np.asarray(f, float)
    return np.tensordot(W[1:], f[1:], axes=1)


@dataclass
class TransformBundle:
    V: np.ndarray
    N_t: np.ndarray
    N_a: np.ndarray
    source: SpaceTimeField
    params: TransformParams
    rule: str = "trapezoid"

    @property
    def T(self):
        return self.params.T

    @property
    def alpha(self):
        return self.params.alpha


def transform_bundle(v, coeffs, params, m, q, rule="trapezoid"):
    V = transform_V(v, params)
    Nt, Na = moments(v, coeffs, params, m, q, rule=rule)
    return TransformBundle(V, Nt, Na, v, params, rule)


def holder_constants(T, alpha, m, q, t=None):
    """Constants of the two Hoelder bounds N_t <= K_t eps V^(1/m), N_a <= K_a lam V^(q/m).

    With ``t`` given, the constants are the discrete (trapezoid) versions,
    for which the bounds hold exactly for trapezoid moments.  Otherwise the
    closed forms are returned:

        K_t = T^(alpha/m' - 1/m) alpha (alpha - m' + 1)^(-1/m'),
        K_a = (T^(alpha+1) / (alpha+1))^((m - q)/m).
    """
    mprime = m / (m - 1.0)
    if t is None:
        Kt = T ** (alpha / mprime - 1.0 / m) * alpha * (alpha - mprime + 1.0) ** (-1.0 / mprime)
        Ka = (T ** (alpha + 1) / (alpha + 1)) ** ((m - q) / m)
        return Kt, Ka
    t = np.asarray(t, float)
    w = _trapezoid(t)
    s = np.clip(T - t, 0, None)
    keep = s > 0
    Kt = alpha * np.sum(w[keep] * s[keep] ** (alpha - mprime)) ** (1.0 / mprime)
    Ka = np.sum(w * s ** alpha) ** ((m - q) / m)
    return float(Kt), float(Ka)


def printed_absorption_constant(T, alpha, m, q):
    """The N_a constant T^(alpha + m/(m-q)) (alpha(1 - q/m) + 1)^(-m/(m-q)), kept for comparison."""
    return T ** (alpha + m / (m - q)) * (alpha * (1 - q / m) + 1) ** (-m / (m - q))


def verify_inequality(bundle, coeffs, m, q, mprime=None, *, tol=1e-6, raise_on_violation=True):
    """Check 0 <= N_t <= K_t eps V^(1/m) and 0 <= N_a <= K_a lam V^(q/m) node-wise.

    Returns a report with the smallest slack of each inequality (negative
    means violated), the constants used and whether the printed N_a
    constant would also hold.
    """
    if mprime is not None and abs(mprime - m / (m - 1.0)) > 1e-12:
        raise ValueError("mprime inconsistent with m")
    T, alpha = bundle.T, bundle.alpha
    Kt, Ka = holder_constants(T, alpha, m, q, t=bundle.source.t)
    Kt_c, Ka_c = holder_constants(T, alpha, m, q)
    V = np.clip(bundle.V, 0.0, None)
    bound_t = Kt * coeffs.eps * V ** (1.0 / m)
    bound_a = Ka * coeffs.lam * V ** (q / m)
    scale_t = max(np.abs(bound_t).max(), np.abs(bundle.N_t).max(), 1e-300)
    scale_a = max(np.abs(bound_a).max(), np.abs(bundle.N_a).max(), 1e-300)
    slack = {
        "N_t_nonneg": float(bundle.N_t.min()),
        "N_t_upper": float((bound_t - bundle.N_t).min()),
        "N_a_nonneg": float(bundle.N_a.min()),
        "N_a_upper": float((bound_a - bundle.N_a).min()),
    }
    scales = {"N_t_nonneg": scale_t, "N_t_upper": scale_t,
              "N_a_nonneg": scale_a, "N_a_upper": scale_a}
    ok = {k: v >= -tol * scales[k] for k, v in slack.items()}
    printed = printed_absorption_constant(T, alpha, m, q) * coeffs.lam * V ** (q / m)
    report = {
        "slack": slack,
        "passed": ok,
        "verdict": all(ok.values()),
        "K_t": Kt, "K_a": Ka, "K_t_closed_form": Kt_c, "K_a_closed_form": Ka_c,
        "printed_K_a": printed_absorption_constant(T, alpha, m, q),
        "printed_N_a_bound_holds": bool((printed - bundle.N_a).min() >= -tol * scale_a),
    }
    if raise_on_violation and not report["verdict"]:
        bad = [k for k, v in ok.items() if not v]
        raise InequalityViolation(f"violated: {bad}; slack {slack}")
    return report

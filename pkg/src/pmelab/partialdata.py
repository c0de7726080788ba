"""Local partial-data test in the normalized disk geometry.

Omega is the disk |x + e1| < 1, tangent to the origin; the inaccessible
boundary part is Gamma = {x1 <= -2c}.  The module builds the harmonic
barrier U0 vanishing on Gamma, the density F = delta_eps U0^(1/m - 1),
complex geometrical optics (CGO) harmonic functions, the Segal-Bargmann
transform of F and a decay-rate detector for a vanishing slab
{|x1| <= delta}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .grid import Grid, boundary_flux, div_gamma_grad, solve_elliptic


class CoverageError(RuntimeError):
    pass


SIGMA_CGO = np.array([1j, 1.0])


@dataclass(frozen=True)
class NullVector:
    """Complex 2-vector zeta with zeta . zeta = 0 (bilinear)."""

    zeta: np.ndarray
    a: float = 1.0

    def __post_init__(self):
        z = np.asarray(self.zeta, complex)
        if z.shape != (2,):
            raise ValueError("only n = 2 is supported")
        object.__setattr__(self, "zeta", z)
        scale = max(np.abs(z).max(), 1.0) ** 2
        if abs(self.residual) > 1e-12 * scale:
            raise ValueError(f"not a null vector: zeta.zeta = {self.residual:.3e}")

    @property
    def residual(self):
        return complex(self.zeta @ self.zeta)

    @classmethod
    def model(cls, a):
        """a * sigma_cgo with sigma_cgo = i e1 + e2."""
        return cls(a * SIGMA_CGO, a)


def nullvector_decompose(z, a, eps_r):
    """Split z = zeta + eta with zeta, eta null, zeta near a sigma and eta near -a conj(sigma).

    In 2D the null lines are spanned by (1, -i) and (1, i), so
    zeta = p (1, -i) with p = (z1 + i z2)/2 and eta = r (1, i) with
    r = (z1 - i z2)/2.
    """
    z = np.asarray(z, complex)
    if z.shape != (2,):
        raise ValueError("only n = 2 is supported")
    if not a > 0 or not eps_r > 0:
        raise ValueError("a and eps_r must be positive")
    target = np.array([2j * a, 0.0])
    if np.linalg.norm(z - target) >= 2.0 * eps_r * a:
        raise ValueError("z lies outside the ball |z - 2ia e1| < 2 eps_r a")
    p = 0.5 * (z[0] + 1j * z[1])
    r = 0.5 * (z[0] - 1j * z[1])
    zeta = p * np.array([1.0, -1j])
    eta = r * np.array([1.0, 1j])
    # the swapped assignment is the other branch; keep the one near a sigma
    if np.linalg.norm(eta - a * SIGMA_CGO) < np.linalg.norm(zeta - a * SIGMA_CGO):
        zeta, eta = eta, zeta
    return NullVector(zeta, a), NullVector(eta, a)


def smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


@dataclass
class NormalizedGeometry:
    """Disk grid with Gamma = {x1 <= -2c} and a cutoff chi (1 on Gamma, 0 for x1 >= -c)."""

    grid: Grid
    c: float
    chi: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, n=201, c=0.1):
        if not c > 0:
            raise ValueError("c must be positive")
        base = Grid.disk(n, center=(-1.0, 0.0), radius=1.0)
        X = base.coords[0]
        gamma_part = base.boundary & (X <= -2.0 * c)
        grid = base.with_sigma(base.boundary & ~gamma_part)
        chi = smoothstep((-c - X) / c)
        return cls(grid, float(c), np.where(grid.inside, chi, 0.0))

    @property
    def gamma_mask(self):
        return self.grid.boundary & ~self.grid.sigma

    def check(self):
        X = self.grid.coords[0]
        g = self.gamma_mask
        ok_gamma = bool(np.all(X[g] <= -2 * self.c + 1e-12))
        ok_chi = bool(np.all(self.chi[g] == 1.0)) and bool(np.all(self.chi[X >= -self.c] == 0.0))
        return ok_gamma and ok_chi


def sigma_bump_traces(geom, count=12):
    """Nonnegative bumps in arc length on Sigma, vanishing on Gamma, ordered from the origin outward."""
    grid = geom.grid
    idx = grid.boundary_index
    X, Y = grid.coords
    theta = np.arctan2(Y.ravel()[idx], X.ravel()[idx] + 1.0)
    sig = grid.trace(grid.sigma).astype(bool)
    lo, hi = theta[sig].min(), theta[sig].max()
    centres = np.linspace(lo, hi, count + 2)[1:-1]
    centres = centres[np.argsort(np.abs(centres), kind="stable")]
    width = 2.0 * (hi - lo) / (count + 1)
    out = []
    for t0 in centres:
        b = np.clip(1.0 - ((theta - t0) / width) ** 2, 0.0, None) ** 2
        out.append(np.where(sig, b, 0.0))
    return out


@dataclass
class Barrier:
    U0: np.ndarray
    used: int
    flux_gamma_max: float


def barrier_U0(geom, traces=None, delta0=1e-6):
    """Harmonic U0 >= 0 with U0 = 0 on Gamma and d_nu U0 < 0 on all of Gamma.

    Accumulates harmonic extensions of the trial traces until the outward
    flux on every Gamma node is below -delta0 * scale.  The flux uses
    two-point differences (see ``boundary_flux``).
    """
    grid = geom.grid
    traces = sigma_bump_traces(geom) if traces is None else list(traces)
    gmask = grid.trace(geom.gamma_mask).astype(bool)
    one = np.ones(grid.shape)
    zero = np.zeros(grid.shape)
    total = np.zeros(grid.n_boundary)
    U0 = None
    for j, f in enumerate(traces):
        f = np.asarray(f, float)
        if np.any(f < 0) or np.any(f[gmask] != 0):
            raise ValueError("trial traces must be nonnegative and vanish on Gamma")
        total = total + f
        U0 = solve_elliptic(grid, one, zero, total)
        if not gmask.any():
            return Barrier(U0, j + 1, -np.inf)
        flux = boundary_flux(grid, U0, one, order=1)[gmask]
        scale = max(np.abs(U0).max(), 1e-300)
        if flux.max() < -delta0 * scale:
            return Barrier(U0, j + 1, float(flux.max()))
    raise CoverageError("trial traces exhausted before the flux was negative on all of Gamma")


@dataclass
class FDensity:
    values: np.ndarray
    l1: float
    flagged: np.ndarray
    flagged_mass: float


def f_density(grid, delta_eps, U0, m, floor=None):
    """F = delta_eps U0^(1/m - 1) on interior nodes; nodes with U0 < floor are flagged and capped."""
    if np.any(U0 < -1e-12):
        raise ValueError("U0 must be nonnegative")
    floor = min(grid.spacing) if floor is None else float(floor)
    p = 1.0 / m - 1.0
    de = np.where(grid.interior, np.asarray(delta_eps, float), 0.0)
    flagged = grid.interior & (U0 < floor)
    F = de * np.maximum(U0, floor) ** p
    absF = np.abs(F) * grid.cell_volume
    return FDensity(F, float(absF.sum()), flagged, float(absF[flagged].sum()))


def plane_exponent(grid, zeta, h):
    """-(i/h) x . zeta on the nodes."""
    X, Y = grid.coords
    return -(1j / h) * (X * zeta[0] + Y * zeta[1])


def cgo_solution(geom, zeta, h, chi=None):
    """U = exp(-(i/h) x.zeta) + R with R harmonic and R = -(exp(...) chi) on the boundary.

    Returns ``(U, sup |R|)``.
    """
    z = zeta.zeta if isinstance(zeta, NullVector) else np.asarray(zeta, complex)
    if z[0].imag < 0:
        raise ValueError("need Im zeta_1 >= 0")
    if not h > 0:
        raise ValueError("h must be positive")
    grid = geom.grid
    chi = geom.chi if chi is None else chi
    E = np.exp(plane_exponent(grid, z, h))
    data = -(E * chi).ravel()[grid.boundary_index]
    one = np.ones(grid.shape)
    zero = np.zeros(grid.shape)
    if np.any(data != 0):
        R = (solve_elliptic(grid, one, zero, data.real)
             + 1j * solve_elliptic(grid, one, zero, data.imag))
    else:
        R = np.zeros(grid.shape, complex)
    R = np.where(grid.inside, R, 0.0)
    return np.where(grid.inside, E, 0.0) + R, float(np.abs(R).max())


def discrete_harmonicity(geom, U):
    """Largest |div grad Re U|, |div grad Im U| over interior nodes."""
    one = np.ones(geom.grid.shape)
    lr = div_gamma_grad(geom.grid, U.real, one)
    li = div_gamma_grad(geom.grid, U.imag, one)
    return float(max(np.abs(lr).max(), np.abs(li).max()))


@dataclass
class DecayFit:
    """log y = A + k log(1/h) - s/h."""

    s: float
    k: float
    A: float
    s_ci: tuple


def fit_exponential_decay(hs, values, level=0.95):
    hs = np.asarray(hs, float)
    y = np.log(np.asarray(values, float))
    X = np.column_stack([np.ones_like(hs), np.log(1.0 / hs), -1.0 / hs])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    ci = _coef_ci(X, y, coef, 2, level)
    return DecayFit(float(coef[2]), float(coef[1]), float(coef[0]), ci)


def _coef_ci(X, y, coef, j, level):
    n, p = X.shape
    dof = n - p
    resid = y - X @ coef
    if dof <= 0:
        return (float(coef[j]), float(coef[j]))
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    half = stats.t.ppf(0.5 + level / 2, dof) * np.sqrt(max(cov[j, j], 0.0))
    return (float(coef[j] - half), float(coef[j] + half))


def fourier_functional(grid, F, z, h):
    """int exp(-(i/h) x.z) F(x) dx by cell-volume quadrature."""
    vals = F.values if isinstance(F, FDensity) else np.asarray(F, float)
    z = np.asarray(z, complex)
    E = plane_exponent(grid, z, h)
    w = vals * grid.cell_volume
    nz = w != 0
    return complex(np.sum(w[nz] * np.exp(E[nz])))


def sb_weight(z1):
    """Phi(z1) = |Im z1|^2 - |Re z1|^2 for Re z1 >= 0 and |Im z1|^2 otherwise."""
    z1 = complex(z1)
    return z1.imag ** 2 - (z1.real ** 2 if z1.real >= 0 else 0.0)


def segal_bargmann(grid, F, z, h, weighted=False):
    """T F(z) = int exp(-(z - y)^2 / 2h) F(y) dy, with (z - y)^2 the bilinear square.

    With ``weighted=True`` returns exp(-Phi(z1)/2h) T F(z); the combined
    exponent is formed before exponentiating so no overflow occurs.
    """
    vals = F.values if isinstance(F, FDensity) else np.asarray(F, float)
    z = np.asarray(z, complex)
    w = vals * grid.cell_volume
    nz = w != 0
    if not nz.any():
        return 0j
    X, Y = grid.coords
    expo = -((z[0] - X[nz]) ** 2 + (z[1] - Y[nz]) ** 2) / (2.0 * h)
    if weighted:
        expo = expo - sb_weight(z[0]) / (2.0 * h)
    return complex(np.sum(w[nz] * np.exp(expo)))


def sb_bounds(grid, F, z, h):
    """The two a priori bounds: exp(|Im z|^2/2h) ||F||_1 and, for Re z1 >= 0, the sharper one."""
    vals = F.values if isinstance(F, FDensity) else np.asarray(F, float)
    l1 = float(np.sum(np.abs(vals) * grid.cell_volume))
    z = np.asarray(z, complex)
    im2 = float(np.sum(z.imag ** 2))
    b1 = np.exp(im2 / (2 * h)) * l1
    b2 = np.exp((im2 - z[0].real ** 2) / (2 * h)) * l1 if z[0].real >= 0 else np.nan
    return b1, b2


@dataclass
class SlabReport:
    verdict: str
    rate: float
    rate_ci: tuple
    statistic_ci: tuple
    delta: float
    delta_min: float
    hs: np.ndarray
    weighted: np.ndarray
    local_slopes: np.ndarray
    notes: list = field(default_factory=list)


def _delta_from_rate(rate, s):
    """Solve d^2/2 + s d + rate = 0 for d >= 0 (rate = -(s d + d^2/2))."""
    return float(max(-s + np.sqrt(max(s * s - 2.0 * rate, 0.0)), 0.0))


def vanishing_slab_detect(geom, F, hs, a, eps_r, n_test=5, delta_min=0.05, level=0.95):
    """Decay-rate test for F = 0 on the slab {|x1| <= delta} near the origin.

    For z1 = s real (s near 2a) and x' real, exp(-Phi/2h)|T F| equals
    |int exp((2 s y1 - y1^2 - (x'-y')^2)/2h) F dy|, which decays like
    exp(r/h) with r = -(s d + d^2/2) when F vanishes on {y1 > -d}.  The
    weighted transform is maximized over the test set, log of it is fitted
    as A + beta log h + r/h, and the statistic r + s delta_min + delta_min^2/2
    decides the verdict: "vanishing" (F = 0 on a slab at least delta_min
    wide) if its confidence interval lies below 0, "non-vanishing" (F has
    mass within delta_min of the origin) if above, "inconclusive" otherwise.
    delta_min should span several grid spacings; finer slabs are not
    resolved by the node sums at moderate h.
    """
    grid = geom.grid
    vals = F.values if isinstance(F, FDensity) else np.asarray(F, float)
    X = grid.coords[0]
    width = float(X[grid.inside].max() - X[grid.inside].min())
    delta_min = float(delta_min)
    hs = np.asarray(hs, float)
    notes = []
    if delta_min < 4.0 * max(grid.spacing):
        notes.append("delta_min below four grid spacings; verdict may be grid-limited")
    s = 2.0 * a
    if not np.any(vals != 0):
        return SlabReport("vanishing", -np.inf, (-np.inf, -np.inf), (-np.inf, -np.inf), width,
                          delta_min, hs, np.zeros(hs.size), np.full(hs.size, -np.inf),
                          ["F vanishes identically"])
    xp = np.linspace(-0.5 * eps_r * a, 0.5 * eps_r * a, n_test)
    z1s = s * (1.0 + np.linspace(-0.5, 0.5, 3) * eps_r)
    Wv = np.array([max(abs(segal_bargmann(grid, vals, (z1, x2), h, weighted=True))
                       for z1 in z1s for x2 in xp) for h in hs])
    if np.any(Wv <= 0):
        raise ValueError("weighted transform underflowed; use larger h")
    Xd = np.column_stack([np.ones_like(hs), np.log(hs), 1.0 / hs])
    y = np.log(Wv)
    coef, *_ = np.linalg.lstsq(Xd, y, rcond=None)
    rate = float(coef[2])
    ci = _coef_ci(Xd, y, coef, 2, level)
    shift = s * delta_min + 0.5 * delta_min ** 2
    stat_ci = (ci[0] + shift, ci[1] + shift)
    if stat_ci[1] < 0:
        verdict = "vanishing"
    elif stat_ci[0] > 0:
        verdict = "non-vanishing"
    else:
        verdict = "inconclusive"
    slopes = np.gradient(y, 1.0 / hs)
    return SlabReport(verdict, rate, ci, stat_ci, _delta_from_rate(rate, s), delta_min, hs, Wv,
                      slopes, notes)


def identity_pairings(grid, F, basis):
    """Matrix int F U_i U_j dx over the partial-data basis."""
    vals = F.values if isinstance(F, FDensity) else np.asarray(F, float)
    B = np.array([f.ravel() for f in basis.fields])
    w = (vals * grid.cell_volume).ravel()
    return (B * w) @ B.T

"""Recovery of eps and lam from the linearized boundary pairings.

The correction term of the boundary map determines, for gamma-harmonic
H and W,

    m d/ds|_{s=0} <gamma d_nu V_t(1 + sH), W> / w_t = int eps H W dx,

so the data are the moments M_ij = int eps H_i W_j dx.  The field is recovered
from these moments by Tikhonov-regularized least squares on a coarse
tensor-product hat-function representation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .asymptotics import solve_Vt, time_weights
from .grid import boundary_flux, boundary_pairing, div_gamma_grad, solve_elliptic


class RecoveryError(RuntimeError):
    pass


@dataclass
class HarmonicBasis:
    fields: list
    traces: list
    labels: list
    nonnegative: list = field(default_factory=list)

    def __len__(self):
        return len(self.fields)


def _polynomial_traces(grid, count):
    """Traces of 1, Re z^k, Im z^k (k = 1, 2, ...) about the grid centre."""
    if grid.dim == 1:
        if count > 2:
            raise ValueError("a 1D grid carries only two harmonic functions")
        x = grid.coords[0]
        xc = x - 0.5 * (x.min() + x.max())
        out = [("1", np.ones_like(x)), ("x", xc)]
        return out[:count]
    X, Y = grid.coords
    mask = grid.inside
    z = (X - 0.5 * (X[mask].min() + X[mask].max())) + 1j * (Y - 0.5 * (Y[mask].min() + Y[mask].max()))
    out = [("1", np.ones(grid.shape))]
    k = 1
    while len(out) < count:
        zk = z ** k
        out.append((f"Re z^{k}", zk.real))
        if len(out) < count:
            out.append((f"Im z^{k}", zk.imag))
        k += 1
    return out


def _sigma_bumps(grid, count):
    """Nonnegative smooth traces supported on the accessible part of the boundary."""
    idx = grid.boundary_index
    sig = grid.trace(grid.sigma).astype(bool)
    pts = np.stack([c.ravel()[idx] for c in grid.coords], 1)
    if grid.dim == 2:
        ctr = pts.mean(axis=0)
        ang = np.arctan2(pts[:, 1] - ctr[1], pts[:, 0] - ctr[0])
    else:
        ang = pts[:, 0]
    a_sig = np.sort(ang[sig])
    centres = a_sig[np.linspace(0, a_sig.size - 1, count + 2).astype(int)[1:-1]]
    width = 2.0 * (a_sig[-1] - a_sig[0]) / (count + 1)
    out = []
    for j, a0 in enumerate(centres):
        d = np.angle(np.exp(1j * (ang - a0))) if grid.dim == 2 else ang - a0
        s = np.clip(1.0 - (d / width) ** 2, 0.0, None) ** 2
        out.append((f"bump{j}", np.where(sig, s, 0.0)))
    return out


def build_basis(gamma, grid, count, partial=False, normalize=True):
    """gamma-harmonic functions with prescribed boundary traces.

    Full-data mode extends the traces of harmonic polynomials.  With
    ``partial=True`` the traces are nonnegative bumps on Sigma (the grid's
    accessible boundary) that vanish on Gamma.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    items = _sigma_bumps(grid, count) if partial else _polynomial_traces(grid, count)
    zero = np.zeros(grid.shape)
    fields, traces, labels, nonneg = [], [], [], []
    for name, data in items:
        tr = grid.trace(data) if np.shape(data) == grid.shape else np.asarray(data, float)
        U = solve_elliptic(grid, gamma, zero, tr)
        if normalize:
            nrm = np.sqrt(grid.integrate(U * U))
            U, tr = U / nrm, tr / nrm
        fields.append(U)
        traces.append(tr)
        labels.append(name)
        nonneg.append(bool(U.min() >= -1e-12))
    return HarmonicBasis(fields, traces, labels, nonneg)


def pairing_t(grid, Vt, W, gamma, eps, V0, w_t, m, rtol=0.02):
    """Boundary pairing <gamma d_nu V_t, W> and its volume counterpart w_t int eps V0^(1/m) W.

    Returns ``(boundary, volume)``; raises if they differ by more than ``rtol``
    relative to the larger magnitude, or if W is not harmonic.
    """
    lw = div_gamma_grad(grid, W, gamma)[grid.interior]
    if np.abs(lw).max() > 1e-6 * max(np.abs(W).max(), 1e-300) / min(grid.spacing) ** 2:
        raise ValueError("W is not gamma-harmonic")
    flux = boundary_flux(grid, Vt, gamma)
    bnd = boundary_pairing(grid, flux, grid.trace(W))
    vol = w_t * grid.integrate(eps * np.clip(V0, 0, None) ** (1.0 / m) * W * grid.inside)
    scale = max(abs(bnd), abs(vol))
    if scale > 0 and abs(bnd - vol) > rtol * scale + 1e-14:
        raise AssertionError(f"pairing mismatch: boundary {bnd:.6e} vs volume {vol:.6e}")
    return bnd, vol


def linearized_rows(grid, weight, basis, basis_w=None):
    """M[i, j] = int weight H_i W_j dx by cell-volume quadrature."""
    basis_w = basis if basis_w is None else basis_w
    vol = grid.cell_volume * np.asarray(weight, float)
    H = np.array([f.ravel() for f in basis.fields])
    W = np.array([f.ravel() for f in basis_w.fields])
    return (H * vol.ravel()) @ W.T


def dtn_pairings(grid, gamma, eps, basis, T, alpha, m, s=1e-3, t=None):
    """Linearized pairings through the correction term of the boundary map.

    For each H_i solves for V_t with V0 = 1 +- s H_i, pairs the flux with
    every W_j on the boundary and differentiates in s by central
    differences; the result approximates int eps H_i W_j dx.
    """
    w_t = time_weights(T, alpha, m, 1.0, t).w_t
    n = len(basis)
    M = np.empty((n, n))
    one = np.ones(grid.shape)
    for i, H in enumerate(basis.fields):
        if 1.0 - s * np.abs(H).max() <= 0:
            raise ValueError("s too large: 1 + sH must stay positive")
        row = []
        for sign in (1.0, -1.0):
            V0 = one + sign * s * H
            flux = boundary_flux(grid, solve_Vt(grid, gamma, eps, V0, T, alpha, m, t), gamma)
            row.append([boundary_pairing(grid, flux, tr) for tr in basis.traces])
        M[i] = m * (np.array(row[0]) - np.array(row[1])) / (2.0 * s * w_t)
    return M


def hat_matrix(grid, shape):
    """Interpolation matrix from coarse tensor hat-function coefficients to grid nodes."""
    coords = grid.coords
    mask = grid.inside.ravel()
    cols = []
    for d, nc in enumerate(shape):
        x = coords[d].ravel()
        lo, hi = x[mask].min(), x[mask].max()
        knots = np.linspace(lo, hi, nc)
        hk = knots[1] - knots[0]
        B = np.clip(1.0 - np.abs(x[:, None] - knots[None, :]) / hk, 0.0, None)
        cols.append(B)
    P = cols[0]
    for B in cols[1:]:
        P = (P[:, :, None] * B[:, None, :]).reshape(P.shape[0], -1)
    return P * mask[:, None]


def difference_operator(shape):
    """First differences along each axis of a coarse coefficient array (constants in the kernel)."""
    n = int(np.prod(shape))
    idx = np.arange(n).reshape(shape)
    rows = []
    for d in range(len(shape)):
        a = np.moveaxis(idx, d, 0)
        for i0, i1 in zip(a[:-1].ravel(), a[1:].ravel()):
            r = np.zeros(n)
            r[i0], r[i1] = -1.0, 1.0
            rows.append(r)
    return np.array(rows)


@dataclass
class RecoveryResult:
    field: np.ndarray
    coefficients: np.ndarray
    mu: float
    mu_path: np.ndarray
    residual_path: np.ndarray
    seminorm_path: np.ndarray
    residual: float
    singular_values: np.ndarray

    @property
    def smallest_singular_value(self):
        return float(self.singular_values.min())


def _pair_index(n):
    return np.triu_indices(n)


def forward_design(grid, basis, coarse):
    """Design matrix mapping coarse coefficients to the upper-triangle pairings."""
    P = hat_matrix(grid, coarse)
    vol = grid.cell_volume.ravel()
    H = np.array([f.ravel() for f in basis.fields])
    i, j = _pair_index(len(basis))
    prod = H[i] * H[j] * vol
    return prod @ P, P


def _lcurve_corner(rho, eta):
    """Index of maximum curvature of the curve (log rho, log eta)."""
    x, y = np.log(rho), np.log(eta)
    dx, dy = np.gradient(x), np.gradient(y)
    ddx, ddy = np.gradient(dx), np.gradient(dy)
    kappa = (dx * ddy - dy * ddx) / np.maximum((dx ** 2 + dy ** 2) ** 1.5, 1e-300)
    kappa[[0, -1]] = -np.inf
    return int(np.argmax(kappa))


def recover_field(grid, pairings, basis, mu=None, coarse=None, mu_grid=None):
    """Tikhonov least-squares recovery of a field from its pairings.

    Parameters
    ----------
    pairings : array (n, n)
        Symmetric moments int f H_i W_j dx for the basis members.
    mu : float or None
        Regularization weight (relative to ||G||^2).  None selects the
        L-curve corner over ``mu_grid``.
    coarse : tuple
        Shape of the coarse hat-function representation; the default has
        at most as many coefficients as independent pairings.
    """
    n = len(basis)
    M = np.asarray(pairings, float)
    if M.shape != (n, n):
        raise ValueError("pairings do not match the basis")
    if coarse is None:
        side = int(np.floor(np.sqrt(n * (n + 1) / 2))) if grid.dim == 2 else n * (n + 1) // 2
        coarse = (min(side, 8),) * grid.dim
    if int(np.prod(coarse)) > n * (n + 1) // 2:
        raise ValueError("more coefficients than independent pairings")
    G, P = forward_design(grid, basis, coarse)
    d = M[_pair_index(n)]
    D = difference_operator(coarse)
    sv = np.linalg.svd(G, compute_uv=False)
    scale = sv[0] ** 2
    if mu_grid is None:
        mu_grid = np.logspace(-14, 0, 57)
    def solve(mu_rel):
        A = np.vstack([G, np.sqrt(mu_rel * scale) * D])
        rhs = np.concatenate([d, np.zeros(D.shape[0])])
        return np.linalg.lstsq(A, rhs, rcond=None)[0]

    mus = np.array([mu] if mu is not None else mu_grid, float)
    sols = [solve(mr) for mr in mus]
    rho = np.array([np.linalg.norm(G @ c - d) for c in sols])
    eta = np.array([np.linalg.norm(D @ c) for c in sols])
    if mu is None:
        if not np.any(np.abs(d) > 0):
            best = 0
        else:
            ok = (rho > 0) & (eta > 0)
            best = int(np.flatnonzero(ok)[_lcurve_corner(rho[ok], eta[ok])]) if ok.sum() > 3 else 0
    else:
        best = 0
    c = sols[best]
    if sv[-1] < 1e-14 * sv[0] and mus[best] == 0:
        raise RecoveryError("rank deficient design without regularization")
    fieldv = (P @ c).reshape(grid.shape)
    return RecoveryResult(fieldv, c, float(mus[best]), mus, rho, eta, float(rho[best]), sv)


def q1_weight_matrix(T1, T2, alpha, m, t1=None, t2=None):
    """[[w_t(T1), w_a(T1)], [w_t(T2), w_a(T2)]] for q = 1."""
    a = time_weights(T1, alpha, m, 1.0, t1)
    b = time_weights(T2, alpha, m, 1.0, t2)
    return np.array([[a.w_t, a.w_a], [b.w_t, b.w_a]])


def disambiguate_q1(grid, pairings_T1, pairings_T2, basis, T1, T2, alpha, m, mu=None,
                    coarse=None, min_det=1e-12):
    """Split combined q = 1 pairings at two horizons into eps and lam pairings, then recover both.

    The combined pairings are w_t(T) E + w_a(T) L with E, L the eps and lam
    moments.
    """
    A = q1_weight_matrix(T1, T2, alpha, m)
    det = np.linalg.det(A)
    if abs(det) < min_det * np.abs(A).max() ** 2:
        raise RecoveryError(f"observation times too close (det {det:.2e})")
    P1, P2 = np.asarray(pairings_T1, float), np.asarray(pairings_T2, float)
    E = (A[1, 1] * P1 - A[0, 1] * P2) / det
    L = (A[0, 0] * P2 - A[1, 0] * P1) / det
    eps_hat = recover_field(grid, E, basis, mu=mu, coarse=coarse)
    lam_hat = recover_field(grid, L, basis, mu=mu, coarse=coarse)
    return eps_hat, lam_hat

"""
Structured 1D/2D grids and the variable-coefficient operator div(gamma grad .).

Fields are plain numpy arrays of shape ``grid.shape`` holding one value per
node; nodes outside a masked domain carry 0.  Boundary traces are 1D arrays
ordered like ``grid.boundary_index`` (flat node indices, ascending).

The operator uses the standard 3/5-point stencil with harmonic averaging of
gamma on cell faces.  Dirichlet values are eliminated and the resulting SPD
system is solved by conjugate gradients with an algebraic multigrid
preconditioner.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

try:
    import pyamg
except ImportError:  # pragma: no cover - optional accelerator
    pyamg = None


class GridMismatchError(ValueError):
    pass


class EllipticSolveError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform node grid, optionally masked to a non-rectangular domain.

    Parameters
    ----------
    shape : tuple of int
        Node counts per axis (each >= 3).
    spacing : tuple of float
        Node spacing per axis.
    origin : tuple of float
        Coordinates of node ``(0, ..., 0)``.
    inside : ndarray of bool, optional
        Closed-domain mask.  Defaults to every node.
    sigma : ndarray of bool, optional
        Accessible boundary nodes.  Defaults to the whole boundary; the
        remaining boundary nodes form the inaccessible part Gamma.
    normals : ndarray, optional
        Geometric outward unit normals, shape ``shape + (dim,)``; used for
        fluxes on masked (staircase) boundaries.
    """

    shape: tuple
    spacing: tuple
    origin: tuple
    inside: np.ndarray = None
    sigma: np.ndarray = None
    normals: np.ndarray = None
    kind: str = "box"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        spacing = tuple(float(h) for h in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(shape) not in (1, 2):
            raise ValueError("only 1D and 2D grids are supported")
        if len(spacing) != len(shape) or len(origin) != len(shape):
            raise ValueError("shape, spacing and origin must have equal length")
        if any(s < 3 for s in shape):
            raise ValueError("each axis needs at least 3 nodes")
        if any(not h > 0 for h in spacing):
            raise ValueError("spacing must be positive on each axis")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

        inside = np.ones(shape, bool) if self.inside is None else np.asarray(self.inside, bool)
        if inside.shape != shape:
            raise ValueError("inside mask has wrong shape")
        interior = inside.copy()
        for d in range(len(shape)):
            fwd = np.zeros(shape, bool)
            bwd = np.zeros(shape, bool)
            sl = [slice(None)] * len(shape)
            sl_p = list(sl)
            sl[d] = slice(0, -1)
            sl_p[d] = slice(1, None)
            fwd[tuple(sl)] = inside[tuple(sl_p)]
            bwd[tuple(sl_p)] = inside[tuple(sl)]
            interior &= fwd & bwd
        boundary = inside & ~interior
        if not boundary.any():
            raise ValueError("grid has no boundary nodes")

        sigma = boundary.copy() if self.sigma is None else np.asarray(self.sigma, bool) & boundary
        if not sigma.any():
            raise ValueError("accessible boundary part Sigma must be nonempty")

        for name, arr in (("inside", inside), ("interior", interior),
                          ("boundary", boundary), ("sigma", sigma)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # -- construction -----------------------------------------------------

    @classmethod
    def interval(cls, n, length=1.0, origin=0.0):
        return cls((n,), (length / (n - 1),), (origin,))

    @classmethod
    def rectangle(cls, nx, ny, lx=1.0, ly=1.0, origin=(0.0, 0.0)):
        return cls((nx, ny), (lx / (nx - 1), ly / (ny - 1)), origin)

    @classmethod
    def disk(cls, n, center=(0.0, 0.0), radius=1.0):
        """Square grid of ``n x n`` nodes masked to the closed disk."""
        h = 2.0 * radius / (n - 1)
        origin = (center[0] - radius, center[1] - radius)
        x = origin[0] + h * np.arange(n)
        y = origin[1] + h * np.arange(n)
        X, Y = np.meshgrid(x, y, indexing="ij")
        dx, dy = X - center[0], Y - center[1]
        r = np.hypot(dx, dy)
        inside = r <= radius * (1.0 + 1e-12)
        with np.errstate(invalid="ignore", divide="ignore"):
            normals = np.stack([dx / r, dy / r], axis=-1)
        normals[~np.isfinite(normals)] = 0.0
        return cls((n, n), (h, h), origin, inside=inside, normals=normals, kind="disk")

    def with_sigma(self, sigma):
        """Copy of the grid with a new accessible boundary part."""
        return Grid(self.shape, self.spacing, self.origin, inside=self.inside,
                    sigma=sigma, normals=self.normals, kind=self.kind)

    # -- geometry ---------------------------------------------------------

    @property
    def dim(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def gamma_mask(self):
        """Inaccessible boundary nodes."""
        return self.boundary & ~self.sigma

    @property
    def coords(self):
        axes = [o + h * np.arange(n) for o, h, n in zip(self.origin, self.spacing, self.shape)]
        return np.meshgrid(*axes, indexing="ij")

    @property
    def boundary_index(self):
        return np.flatnonzero(self.boundary.ravel())

    @property
    def interior_index(self):
        return np.flatnonzero(self.interior.ravel())

    @property
    def n_boundary(self):
        return self.boundary_index.size

    def trace(self, values):
        """Restriction of a node field to the boundary nodes."""
        return np.asarray(values, float).ravel()[self.boundary_index]

    def extend(self, trace):
        """Node field equal to ``trace`` on the boundary and 0 elsewhere."""
        out = np.zeros(self.size)
        out[self.boundary_index] = np.asarray(trace, float)
        return out.reshape(self.shape)

    def check_field(self, values, name="field"):
        values = np.asarray(values, float)
        if values.shape != self.shape:
            raise GridMismatchError(f"{name} has shape {values.shape}, grid is {self.shape}")
        return values

    def _axis_weights(self, d):
        n, h = self.shape[d], self.spacing[d]
        if self.kind == "disk":
            return np.full(n, h)
        w = np.full(n, h)
        w[0] = w[-1] = 0.5 * h
        return w

    @property
    def cell_volume(self):
        """Nodal quadrature weights: trapezoid on boxes, h^2 on masked grids."""
        if "cell_volume" not in self._cache:
            ws = [self._axis_weights(d) for d in range(self.dim)]
            w = ws[0] if self.dim == 1 else np.multiply.outer(ws[0], ws[1])
            w = np.where(self.inside, w, 0.0)
            w.setflags(write=False)
            self._cache["cell_volume"] = w
        return self._cache["cell_volume"]

    def face_weights(self, d):
        """Quadrature weights of the axis-``d`` faces (between node i and i+e_d)."""
        key = ("face", d)
        if key not in self._cache:
            h = self.spacing[d]
            if self.dim == 1:
                w = np.full(self.shape[0] - 1, h)
            else:
                other = 1 - d
                wo = self._axis_weights(other)
                n = self.shape[d] - 1
                w = h * (np.tile(wo, (n, 1)) if d == 0 else np.tile(wo[:, None], (1, n)))
                both = _face_pair_mask(self.inside, d)
                w = np.where(both, w, 0.0)
            self._cache[key] = w
        return self._cache[key]

    @property
    def boundary_weights(self):
        """Arc-length quadrature weights on boundary nodes (1 per point in 1D)."""
        if "bweights" in self._cache:
            return self._cache["bweights"]
        idx = self.boundary_index
        if self.dim == 1:
            w = np.ones(idx.size)
        elif self.kind == "disk":
            X, Y = self.coords
            cx = self.origin[0] + 0.5 * self.spacing[0] * (self.shape[0] - 1)
            cy = self.origin[1] + 0.5 * self.spacing[1] * (self.shape[1] - 1)
            xb, yb = X.ravel()[idx] - cx, Y.ravel()[idx] - cy
            theta = np.arctan2(yb, xb)
            radius = np.hypot(xb, yb).mean()
            order = np.argsort(theta, kind="stable")
            th = theta[order]
            gaps = np.diff(np.concatenate([th[-1:] - 2 * np.pi, th, th[:1] + 2 * np.pi]))
            ws = 0.5 * radius * (gaps[:-1] + gaps[1:])
            w = np.empty(idx.size)
            w[order] = ws
        else:
            wx = self._axis_weights(0)
            wy = self._axis_weights(1)
            full = np.zeros(self.shape)
            full[0, :] += wy
            full[-1, :] += wy
            full[:, 0] += wx
            full[:, -1] += wx
            w = full.ravel()[idx]
        self._cache["bweights"] = w
        return w

    def integrate(self, values):
        return float(np.sum(self.cell_volume * np.asarray(values)))


def _face_pair_mask(inside, d):
    sl_a = [slice(None)] * inside.ndim
    sl_b = [slice(None)] * inside.ndim
    sl_a[d] = slice(0, -1)
    sl_b[d] = slice(1, None)
    return inside[tuple(sl_a)] & inside[tuple(sl_b)]


def _face_values(gamma, d):
    sl_a = [slice(None)] * gamma.ndim
    sl_b = [slice(None)] * gamma.ndim
    sl_a[d] = slice(0, -1)
    sl_b[d] = slice(1, None)
    ga, gb = gamma[tuple(sl_a)], gamma[tuple(sl_b)]
    with np.errstate(divide="ignore", invalid="ignore"):
        hm = 2.0 * ga * gb / (ga + gb)
    return np.where(ga + gb > 0, hm, 0.0)


def _check_gamma(grid, gamma):
    gamma = grid.check_field(gamma, "gamma")
    g = gamma[grid.inside]
    if not np.all(np.isfinite(g)) or np.any(g <= 0):
        raise ValueError("gamma must be positive and finite on the domain")
    return np.where(grid.inside, gamma, 0.0)


def _digest(arr):
    return hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=16).hexdigest()


def operator_matrix(grid, gamma):
    """Sparse matrix of div(gamma grad .) acting on all nodes.

    Rows of non-interior nodes are zero.
    """
    gamma = _check_gamma(grid, gamma)
    key = ("L", _digest(gamma))
    if key in grid._cache:
        return grid._cache[key]
    n = grid.size
    idx = np.arange(n).reshape(grid.shape)
    interior = grid.interior
    rows, cols, vals = [], [], []
    diag = np.zeros(grid.shape)
    for d in range(grid.dim):
        h2 = grid.spacing[d] ** 2
        gf = _face_values(gamma, d) / h2
        sl_a = [slice(None)] * grid.dim
        sl_b = [slice(None)] * grid.dim
        sl_a[d] = slice(0, -1)
        sl_b[d] = slice(1, None)
        ia, ib = idx[tuple(sl_a)], idx[tuple(sl_b)]
        int_a, int_b = interior[tuple(sl_a)], interior[tuple(sl_b)]
        # row a couples to b, row b couples to a
        rows += [ia[int_a], ib[int_b]]
        cols += [ib[int_a], ia[int_b]]
        vals += [gf[int_a], gf[int_b]]
        da = np.zeros(grid.shape)
        da[tuple(sl_a)] += gf
        da[tuple(sl_b)] += gf
        diag -= da
    rows.append(idx[interior])
    cols.append(idx[interior])
    vals.append(diag[interior])
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    grid._cache[key] = L
    return L


def split_operator(grid, gamma):
    """Interior-interior and interior-boundary blocks of the operator matrix."""
    L = operator_matrix(grid, gamma)
    key = ("split", id(L))
    if key not in grid._cache:
        ii, bi = grid.interior_index, grid.boundary_index
        Li = L[ii]
        grid._cache[key] = (Li[:, ii].tocsr(), Li[:, bi].tocsr())
    return grid._cache[key]


def div_gamma_grad(grid, field, gamma):
    """Discrete div(gamma grad field) at interior nodes, 0 elsewhere."""
    field = grid.check_field(field)
    L = operator_matrix(grid, gamma)
    return (L @ field.ravel()).reshape(grid.shape)


def _interior_solver(grid, gamma):
    gamma = _check_gamma(grid, gamma)
    key = ("solver", _digest(gamma))
    if key in grid._cache:
        return grid._cache[key]
    L = operator_matrix(grid, gamma)
    ii = grid.interior_index
    A = (-L[ii][:, ii]).tocsr()
    if pyamg is not None and ii.size > 64:
        # "local" weighting avoids the randomized spectral-radius estimate
        ml = pyamg.smoothed_aggregation_solver(A, symmetry="symmetric",
                                               smooth=("jacobi", {"weighting": "local"}))
        M = ml.aspreconditioner(cycle="V")
    else:
        d = A.diagonal()
        M = sp.diags(1.0 / d)
    grid._cache[key] = (L, A, M)
    return grid._cache[key]


def solve_elliptic(grid, gamma, rhs, dirichlet, rtol=1e-10, maxiter=2000):
    """Solve div(gamma grad U) = rhs in the interior with U = dirichlet on the boundary.

    ``dirichlet`` is either a boundary trace or a full node field (only its
    boundary values are used).  Raises :class:`EllipticSolveError` if the
    relative residual does not reach ``rtol``.
    """
    rhs = grid.check_field(rhs, "rhs")
    if not np.all(np.isfinite(rhs)):
        raise ValueError("rhs must be finite")
    dirichlet = np.asarray(dirichlet, float)
    if dirichlet.shape == grid.shape:
        g = grid.trace(dirichlet)
    elif dirichlet.shape == (grid.n_boundary,):
        g = dirichlet
    else:
        raise GridMismatchError("dirichlet data must be a boundary trace or a node field")
    L, A, M = _interior_solver(grid, gamma)
    ii, bi = grid.interior_index, grid.boundary_index
    U = np.zeros(grid.size)
    U[bi] = g
    b = -(rhs.ravel()[ii] - L[ii][:, bi] @ g)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return U.reshape(grid.shape)
    x, info = cg(A, b, rtol=0.01 * rtol, atol=0.0, M=M, maxiter=maxiter)
    rel = np.linalg.norm(A @ x - b) / bnorm
    if rel > rtol:
        raise EllipticSolveError(f"CG stopped at relative residual {rel:.2e} (info={info})")
    U[ii] = x
    return U.reshape(grid.shape)


def _axis_derivative(grid, U, d, node, order=2):
    """One-sided (second order where possible) or central derivative along axis d.

    Returns ``(derivative, outward_sign)``; the sign is 0 when both
    neighbors are in the domain.
    """
    inside = grid.inside
    h = grid.spacing[d]
    n = grid.shape[d]

    def at(k):
        j = list(node)
        j[d] = node[d] + k
        if 0 <= j[d] < n and inside[tuple(j)]:
            return U[tuple(j)]
        return None

    u0, up, um = U[node], at(1), at(-1)
    if up is not None and um is not None:
        return (up - um) / (2 * h), 0
    if up is not None:
        up2 = at(2) if order == 2 else None
        der = (-3 * u0 + 4 * up - up2) / (2 * h) if up2 is not None else (up - u0) / h
        return der, -1
    if um is not None:
        um2 = at(-2) if order == 2 else None
        der = (3 * u0 - 4 * um + um2) / (2 * h) if um2 is not None else (u0 - um) / h
        return der, 1
    return 0.0, 0


def boundary_flux(grid, field, gamma, order=2):
    """Outward conormal derivative gamma * dU/dnu at every boundary node.

    On boxes the normal is the outward axis direction (corner nodes average
    the two edge derivatives); on masked grids the geometric normal is used
    with one-sided differences along missing directions.  ``order=1`` uses
    two-point one-sided differences, which keep the sign of the flux at
    staircase tips where the three-point formula can degenerate to 0.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    field = grid.check_field(field)
    gamma = _check_gamma(grid, gamma)
    out = np.empty(grid.n_boundary)
    for k, flat in enumerate(grid.boundary_index):
        node = np.unravel_index(flat, grid.shape)
        ders = [_axis_derivative(grid, field, d, node, order) for d in range(grid.dim)]
        if grid.normals is not None:
            nu = grid.normals[node]
            val = sum(nu[d] * ders[d][0] for d in range(grid.dim))
        else:
            parts = [s * der for der, s in ders if s != 0]
            val = sum(parts) / len(parts) if parts else 0.0
        out[k] = gamma[node] * val
    return out


def boundary_pairing(grid, trace_a, trace_b, subset=None):
    """Boundary quadrature of the product of two traces (optionally on a subset)."""
    w = grid.boundary_weights
    if subset is not None:
        w = w * grid.trace(subset).astype(bool)
    return float(np.sum(w * trace_a * trace_b))


def gradient_energy(grid, a, b, gamma=None):
    """Face quadrature of gamma grad(a) . grad(b) (midpoint rule on faces)."""
    a = grid.check_field(a)
    b = grid.check_field(b)
    total = 0.0
    for d in range(grid.dim):
        h = grid.spacing[d]
        sl_a = [slice(None)] * grid.dim
        sl_b = [slice(None)] * grid.dim
        sl_a[d] = slice(0, -1)
        sl_b[d] = slice(1, None)
        da = (a[tuple(sl_b)] - a[tuple(sl_a)]) / h
        db = (b[tuple(sl_b)] - b[tuple(sl_a)]) / h
        gf = 1.0 if gamma is None else _face_values(_check_gamma(grid, gamma), d)
        total += float(np.sum(grid.face_weights(d) * gf * da * db))
    return total

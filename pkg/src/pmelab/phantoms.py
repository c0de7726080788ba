"""Named analytic coefficient fields."""

import numpy as np


class UnknownPhantom(KeyError):
    pass


def _constant(X, value=1.0):
    return np.full(X[0].shape, float(value))


def _affine(X, base=1.0, slope=(0.0,)):
    slope = np.atleast_1d(np.asarray(slope, float))
    if slope.size != len(X):
        raise ValueError(f"affine slope needs {len(X)} components")
    return float(base) + sum(s * x for s, x in zip(slope, X))


def _gaussian_bump(X, center=None, width=0.02, amplitude=0.3, base=1.0):
    """base + amplitude * exp(-|x - center|^2 / width)."""
    center = np.zeros(len(X)) if center is None else np.atleast_1d(np.asarray(center, float))
    if center.size != len(X):
        raise ValueError(f"center needs {len(X)} components")
    if not width > 0:
        raise ValueError("width must be positive")
    r2 = sum((x - c) ** 2 for x, c in zip(X, center))
    return float(base) + float(amplitude) * np.exp(-r2 / float(width))


def _compact_bump(X, center=None, radius=0.2, amplitude=1.0, base=0.0):
    """base + amplitude * (1 - |x - c|^2/radius^2)^3 inside the ball, base outside."""
    center = np.zeros(len(X)) if center is None else np.atleast_1d(np.asarray(center, float))
    if not radius > 0:
        raise ValueError("radius must be positive")
    d2 = sum((x - c) ** 2 for x, c in zip(X, center)) / radius ** 2
    return float(base) + float(amplitude) * np.where(d2 < 1.0, (1.0 - d2) ** 3, 0.0)


PHANTOMS = {
    "constant": _constant,
    "affine": _affine,
    "gaussian-bump": _gaussian_bump,
    "compact-bump": _compact_bump,
}


def phantom(name, params, grid, floor=None):
    """Evaluate a named phantom on the grid nodes.

    ``floor`` (if given) is a strict lower bound the field must exceed,
    e.g. 0 for eps and gamma.
    """
    if name not in PHANTOMS:
        raise UnknownPhantom(f"unknown phantom {name!r}; known: {sorted(PHANTOMS)}")
    params = dict(params or {})
    values = np.asarray(PHANTOMS[name](grid.coords, **params), float)
    values = np.broadcast_to(values, grid.shape).copy()
    vals_in = values[grid.inside]
    if not np.all(np.isfinite(vals_in)):
        raise ValueError(f"phantom {name!r} is not finite on the grid")
    if floor is not None and not vals_in.min() > floor:
        raise ValueError(f"phantom {name!r} must exceed {floor} (min {vals_in.min():.3g})")
    return values

"""CSV, JSON and binary artifact writers.

Binary trajectory dump layout (little endian)::

    8 bytes   magic b"PMELAB01"
    4 bytes   uint32 number of time levels N
    4 bytes   uint32 spatial rank d (1 or 2)
    4*d bytes uint32 node counts per axis
    4 bytes   dtype code (1 = float64)
    8*N bytes float64 time levels
    then      float64 values, C order, shape (N, *node counts)
"""

from __future__ import annotations

import csv
import json
import struct

import numpy as np

MAGIC = b"PMELAB01"
_DTYPES = {1: np.dtype("<f8")}


def _fmt(x):
    return repr(float(x))


def write_field_csv(path, grid, values, name="value"):
    """One row per node: index, coordinates, value."""
    values = np.asarray(values)
    coords = [c.ravel() for c in grid.coords]
    axes = ["x", "y"][:grid.dim]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + axes + [name])
        flat = values.ravel()
        for i in np.flatnonzero(grid.inside.ravel()):
            w.writerow([int(i)] + [_fmt(c[i]) for c in coords] + [_fmt(flat[i])])


def write_fields_csv(path, grid, fields):
    """Several node fields side by side; ``fields`` is a dict name -> array."""
    coords = [c.ravel() for c in grid.coords]
    axes = ["x", "y"][:grid.dim]
    names = list(fields)
    flats = [np.asarray(fields[k]).ravel() for k in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + axes + names)
        for i in np.flatnonzero(grid.inside.ravel()):
            w.writerow([int(i)] + [_fmt(c[i]) for c in coords] + [_fmt(f[i]) for f in flats])


def write_trace_csv(path, grid, traces):
    """Boundary traces; ``traces`` is a dict name -> array over boundary nodes."""
    idx = grid.boundary_index
    coords = [c.ravel()[idx] for c in grid.coords]
    axes = ["x", "y"][:grid.dim]
    names = list(traces)
    sigma = grid.trace(grid.sigma).astype(int)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + axes + ["sigma"] + names)
        for k, i in enumerate(idx):
            w.writerow([int(i)] + [_fmt(c[k]) for c in coords] + [int(sigma[k])]
                       + [_fmt(np.asarray(traces[n])[k]) for n in names])


def write_trajectory_csv(path, u):
    """Rows (t, node, value) for a space-time field."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node", "value"])
        for n, t in enumerate(u.t):
            for i, v in enumerate(np.asarray(u.values[n]).ravel()):
                w.writerow([_fmt(t), i, _fmt(v)])


def write_table_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) if isinstance(x, (float, np.floating)) else x for x in r])


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(to_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_trajectory_bin(path, u):
    values = np.ascontiguousarray(u.values, dtype="<f8")
    dims = values.shape[1:]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", values.shape[0], len(dims)))
        fh.write(struct.pack("<" + "I" * len(dims), *dims))
        fh.write(struct.pack("<I", 1))
        fh.write(np.asarray(u.t, "<f8").tobytes())
        fh.write(values.tobytes())


def read_trajectory_bin(path):
    """Return ``(t, values)`` from a binary dump."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError("not a trajectory dump (bad magic)")
        n, d = struct.unpack("<II", fh.read(8))
        dims = struct.unpack("<" + "I" * d, fh.read(4 * d))
        (code,) = struct.unpack("<I", fh.read(4))
        if code not in _DTYPES:
            raise ValueError(f"unknown dtype code {code}")
        dt = _DTYPES[code]
        t = np.frombuffer(fh.read(8 * n), dt)
        values = np.frombuffer(fh.read(), dt).reshape((n,) + tuple(dims))
    return t.copy(), values.copy()

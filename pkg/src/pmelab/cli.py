"""Configuration-driven experiment runner.

Usage::

    pmelab forward --config run.yaml --out results/ [--threads N] [--seed S]
    pmelab selftest --out results/

The config is YAML.  Every run writes CSV/JSON artifacts and a
``manifest.json`` (config hash, version, wall clock, tolerances, check
verdicts, file inventory).  Exit status: 0 when every check passes, 2 when
an invariant check fails, 1 on an execution error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import asymptotics as asy
from . import io
from . import partialdata as pd
from . import recovery as rec
from . import transform as tr
from .forward import (CoefficientSet, MaximumPrincipleViolation, MonotonicityViolation,
                      ProblemParams, solve_weak, time_grid)
from .grid import Grid, boundary_flux, div_gamma_grad
from .phantoms import phantom

logger = logging.getLogger("pmelab")

MODES = ("forward", "transform", "sweep", "recover", "recover-q1", "partial")
THREADS_ENV = "PMELAB_THREADS"


class ConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------

DEFAULTS = {
    "seed": 0,
    "grid": {"geometry": "interval", "extents": [65], "length": [1.0], "c": 0.1},
    "params": {"m": 2.0, "q": 1.2, "alpha": "auto", "T": 1.0, "ks": [1e2, 1e3, 1e4],
               "n_steps": 64, "h_sweep": None},
    "coefficients": {"eps": {"name": "constant", "value": 1.0},
                     "gamma": {"name": "constant", "value": 1.0},
                     "lam": {"name": "constant", "value": 0.0}},
    "boundary": {"phi": {"kind": "zero"}, "source": {"kind": "zero"}, "g": None},
    "recover": {"basis": 13, "coarse": None, "target": "eps", "T1": 0.5, "T2": 0.25,
                "phantom": {"name": "gaussian-bump",
                            "center": [0.4, 0.55], "width": 0.02, "amplitude": 0.3},
                "lam_phantom": {"name": "gaussian-bump",
                                "center": [0.6, 0.4], "width": 0.03, "amplitude": 0.5},
                "tolerance": 0.15, "noise": 0.0},
    "partial": {"a": 8.0, "eps_r": 0.05, "h_cgo": [0.04, 0.16], "h_detect": [0.1, 1.0],
                "n_h": 6, "delta_min": 0.05, "n_random_z": 100,
                "delta_eps": {"name": "compact-bump", "center": [-0.8, 0.0], "radius": 0.2}},
    "tolerances": {},
}


# overlays applied on top of DEFAULTS before the user config
MODE_DEFAULTS = {
    "sweep": {"grid": {"extents": [64]},
              "params": {"T": "auto", "ks": [1e6, 1e7, 1e8], "n_steps": 64},
              "coefficients": {"eps": {"name": "constant", "value": 1e-5},
                               "lam": {"name": "constant", "value": 1e-2}},
              "boundary": {"g": [1.0, 2.0]}},
    "transform": {"params": {"T": 0.5}, "boundary": {"phi": {"kind": "traveling-wave"}}},
    "recover": {"grid": {"geometry": "square", "extents": [48, 48], "length": [1.0, 1.0]}},
    "recover-q1": {"grid": {"geometry": "square", "extents": [48, 48], "length": [1.0, 1.0]},
                   "params": {"q": 1.0}},
    "partial": {"grid": {"geometry": "normalized-disk", "extents": [201]}},
}


# named specs replaced wholesale instead of merged key by key
_LEAF_SPECS = ("phantom", "lam_phantom", "delta_eps", "tolerances", "phi", "source",
               "eps", "gamma", "lam")


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in base:
            raise ConfigError(f"{path}{k}: unknown field")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in _LEAF_SPECS:
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    mode: str
    raw: dict
    seed: int = 0

    @property
    def grid(self):
        return self.raw["grid"]

    @property
    def params(self):
        return self.raw["params"]

    def hash(self):
        blob = json.dumps(io.to_jsonable(self.raw), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def parse_config(data, mode=None, seed=None):
    """Validate a config mapping (already loaded from YAML)."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    mode = mode or data.pop("mode", None)
    data.pop("mode", None)
    if mode not in MODES:
        raise ConfigError(f"mode: must be one of {MODES}, got {mode!r}")
    raw = _merge(_merge(DEFAULTS, MODE_DEFAULTS.get(mode, {})), data)
    if seed is not None:
        raw["seed"] = int(seed)
    p = raw["params"]
    try:
        m, q = float(p["m"]), float(p["q"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"params.m/params.q: {exc}") from None
    try:
        ProblemParams(m, q)
    except ValueError as exc:
        raise ConfigError(f"params.q: {exc}") from None
    if p["alpha"] != "auto":
        try:
            tr.TransformParams(1.0, float(p["alpha"])).check(m)
        except ValueError as exc:
            raise ConfigError(f"params.alpha: {exc}") from None
    if p["T"] != "auto" and not float(p["T"]) > 0:
        raise ConfigError("params.T: must be positive or 'auto'")
    geo = raw["grid"]["geometry"]
    if geo not in ("interval", "square", "normalized-disk"):
        raise ConfigError(f"grid.geometry: unknown geometry {geo!r}")
    ext = raw["grid"]["extents"]
    if not isinstance(ext, (list, tuple)) or any(int(e) < 3 for e in ext):
        raise ConfigError("grid.extents: node counts must be integers >= 3")
    if mode == "sweep":
        hs = p.get("h_sweep")
        if hs is not None and len(hs) < 6:
            raise ConfigError("params.h_sweep: need at least 6 values")
    if mode in ("recover", "recover-q1") and geo != "square":
        raise ConfigError("grid.geometry: recovery runs need a square grid")
    if raw["recover"]["target"] not in ("eps", "lam"):
        raise ConfigError("recover.target: must be 'eps' or 'lam'")
    if mode == "partial" and geo != "normalized-disk":
        raise ConfigError("grid.geometry: partial mode needs the normalized-disk geometry")
    return ExperimentConfig(mode, raw, int(raw["seed"]))


def load_config(path, mode=None, seed=None):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"{path}: YAML parse error{where}: {getattr(exc, 'problem', exc)}") from None
    return parse_config(data, mode, seed)


# -- run bookkeeping ------------------------------------------------------

@dataclass
class RunManifest:
    mode: str
    config_hash: str
    version: str = __version__
    wall_clock_s: float = 0.0
    tolerances: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    resolved: dict = field(default_factory=dict)
    error: str = ""

    def check(self, name, passed, value=None, tol=None):
        self.checks[name] = {"passed": bool(passed), "value": value, "tolerance": tol}
        return bool(passed)

    @property
    def all_passed(self):
        return all(c["passed"] for c in self.checks.values())

    @property
    def exit_code(self):
        if self.error:
            return 1
        return 0 if self.all_passed else 2


class _Run:
    def __init__(self, cfg, out, threads):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.threads = max(1, int(threads))
        self.rng = np.random.default_rng(cfg.seed)
        self.manifest = RunManifest(cfg.mode, cfg.hash())

    def path(self, name):
        self.manifest.files.append(name)
        return self.out / name

    def pmap(self, fn, items):
        items = list(items)
        if self.threads == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as ex:
            return list(ex.map(fn, items))


def build_grid(spec):
    geo, ext = spec["geometry"], [int(e) for e in spec["extents"]]
    length = [float(v) for v in (spec.get("length") or [1.0] * len(ext))]
    if geo == "interval":
        return Grid.interval(ext[0], length[0])
    if geo == "square":
        ly = length[1] if len(length) > 1 else length[0]
        ny = ext[1] if len(ext) > 1 else ext[0]
        return Grid.rectangle(ext[0], ny, length[0], ly)
    return pd.NormalizedGeometry.build(ext[0], float(spec.get("c", 0.1))).grid


def _phantom_field(spec, grid, floor=None):
    spec = dict(spec)
    name = spec.pop("name")
    return phantom(name, spec, grid, floor=floor)


def build_coefficients(cfg, grid):
    c = cfg.raw["coefficients"]
    return CoefficientSet(_phantom_field(c["eps"], grid, floor=0.0),
                          _phantom_field(c["gamma"], grid, floor=0.0),
                          _phantom_field(c["lam"], grid, floor=None).clip(0.0, None))


def _resolve_transform(cfg):
    p = cfg.params
    m, q = float(p["m"]), float(p["q"])
    alpha = tr.auto_alpha(m) if p["alpha"] == "auto" else float(p["alpha"])
    T = tr.auto_T(m, q, alpha) if p["T"] == "auto" else float(p["T"])
    return tr.TransformParams(T, alpha).check(m)


def _boundary_levels(spec, grid, t):
    kind = spec.get("kind", "zero")
    xb = grid.coords[0].ravel()[grid.boundary_index]
    if kind == "zero":
        return np.zeros((t.size, grid.n_boundary)), None
    if kind == "ramp":
        rate = float(spec.get("rate", 1.0))
        return rate * np.outer(t, np.ones(grid.n_boundary)), (lambda tt, x: rate * tt + 0.0 * x)
    if kind == "traveling-wave":
        c = float(spec.get("speed", 1.0))
        exact = lambda tt, x: 0.5 * c * np.clip(c * tt - x, 0.0, None)  # noqa: E731
        return np.array([exact(tt, xb) for tt in t]), exact
    raise ConfigError(f"boundary.phi.kind: unknown kind {kind!r}")


def _source_levels(spec, grid, t, q):
    kind = spec.get("kind", "zero")
    if kind == "zero":
        return None
    if kind == "oracle-a":
        return (1.0 + t ** q)[:, None] * np.ones((t.size, grid.size))
    if kind == "constant":
        return float(spec.get("value", 0.0)) * np.ones((t.size,) + grid.shape)
    raise ConfigError(f"boundary.source.kind: unknown kind {kind!r}")


def _forward(run, grid, coeffs):
    cfg = run.cfg
    p = cfg.params
    params = ProblemParams(float(p["m"]), float(p["q"]))
    tp = _resolve_transform(cfg)
    T = tp.T
    run.manifest.resolved.update({"T": tp.T, "alpha": tp.alpha})
    t = time_grid(T, int(p["n_steps"]))
    phi, exact = _boundary_levels(cfg.raw["boundary"]["phi"], grid, t)
    f = _source_levels(cfg.raw["boundary"]["source"], grid, t, params.q)
    if f is not None:
        f = f.reshape((t.size,) + grid.shape)
    ks = tuple(float(k) for k in p["ks"])
    m = run.manifest
    try:
        sol = solve_weak(grid, params, coeffs, phi, f, t, ks=ks)
        m.check("maximum_principle", True, tol=1e-8)
        m.check("k_monotonicity", True, tol=1e-8)
    except MaximumPrincipleViolation as exc:
        m.check("maximum_principle", False, str(exc), 1e-8)
        return None
    except MonotonicityViolation as exc:
        m.check("k_monotonicity", False, str(exc), 1e-8)
        return None
    u = sol.u
    sup_f = 0.0 if f is None else float(np.max(f))
    floor = 1.0 / ks[-1]
    eps_min = float(coeffs.eps[grid.inside].min())
    upper = float(phi.max()) + floor + T * (sup_f + floor) / eps_min + 1e-8
    m.check("weak_bound", float(u.values.max()) <= upper, float(u.values.max()), upper)
    if exact is not None:
        X = grid.coords[0]
        ex = np.array([exact(tt, X) for tt in t])
        err = float(np.abs(u.values - ex).max())
        tol = float(cfg.raw["tolerances"].get("oracle_linf", 2e-2))
        m.check("oracle_linf_error", err <= tol, err, tol)
    return params, t, f, sol


def run_forward(run):
    grid = build_grid(run.cfg.grid)
    coeffs = build_coefficients(run.cfg, grid)
    res = _forward(run, grid, coeffs)
    if res is None:
        return
    params, t, f, sol = res
    u = sol.u
    extrapolated = np.clip(u.values - sol.error_estimate, 0.0, None)
    # the floor 1/k drifts up by at most t/(k eps_min) through the shifted source
    drift = (1.0 + 1e-9) * (1.0 + t / float(coeffs.eps[grid.inside].min())) / sol.ks[-1]
    corrected = np.clip(u.values - drift.reshape((-1,) + (1,) * grid.dim), 0.0, None)
    io.write_trajectory_csv(run.path("trajectory.csv"), u)
    io.write_trajectory_bin(run.path("trajectory.bin"), u)
    io.write_fields_csv(run.path("final_state.csv"), grid,
                        {"u": corrected[-1], "u_k": u.values[-1],
                         "u_extrapolated": extrapolated[-1], "k_error": sol.error_estimate[-1]})
    bc = run.cfg.raw["boundary"]
    if bc["phi"].get("kind", "zero") == "zero" and bc["source"].get("kind", "zero") == "zero":
        run.manifest.check("zero_data_vanishes", float(corrected.max()) == 0.0,
                           float(corrected.max()), 0.0)
    run.manifest.resolved["k_error_bound"] = sol.error_bound


def run_transform(run):
    grid = build_grid(run.cfg.grid)
    coeffs = build_coefficients(run.cfg, grid)
    tp = _resolve_transform(run.cfg)
    run.cfg.raw["params"]["T"] = tp.T
    res = _forward(run, grid, coeffs)
    if res is None:
        return
    params, t, f, sol = res
    m = run.manifest
    m.resolved.update({"T": tp.T, "alpha": tp.alpha})
    v = tr.v_of_u(sol.u, params.m)
    bundle = tr.transform_bundle(v, coeffs, tp, params.m, params.q)
    exact = tr.transform_bundle(v, coeffs, tp, params.m, params.q, rule="implicit")
    fl = np.zeros((t.size,) + grid.shape) if f is None else f
    Nf = tr.source_moment(fl + 1.0 / sol.ks[-1], t, tp)
    L = div_gamma_grad(grid, bundle.V, coeffs.gamma)
    ident = float(np.abs(L - (exact.N_t + exact.N_a - Nf))[grid.interior].max())
    scale = max(float(np.abs(L).max()), 1e-300)
    m.check("implicit_identity", ident <= 1e-8 * scale + 1e-12, ident, 1e-8)
    quad = float(np.abs(L - (bundle.N_t + bundle.N_a - Nf))[grid.interior].max())
    m.resolved["trapezoid_identity_defect"] = quad
    report = tr.verify_inequality(bundle, coeffs, params.m, params.q, raise_on_violation=False)
    for name, ok in report["passed"].items():
        m.check(f"holder_{name}", ok, report["slack"][name], 1e-6)
    io.write_fields_csv(run.path("bundle.csv"), grid,
                        {"V": bundle.V, "N_t": bundle.N_t, "N_a": bundle.N_a})
    io.write_json(run.path("inequality.json"), report)


def default_sweep_hs():
    return [float(2.0 ** k) for k in range(4, 19, 2)]


def run_sweep(run):
    cfg = run.cfg
    grid = build_grid(cfg.grid)
    coeffs = build_coefficients(cfg, grid)
    tp = _resolve_transform(cfg)
    p = cfg.params
    params = ProblemParams(float(p["m"]), float(p["q"]))
    m, q = params.m, params.q
    n_steps = int(p["n_steps"])
    ks = tuple(float(k) for k in p["ks"])
    hs = np.array(p["h_sweep"] or default_sweep_hs(), float)
    g = cfg.raw["boundary"]["g"]
    if g is None:
        xb = grid.coords[0].ravel()[grid.boundary_index]
        g = 1.0 + xb
    g = np.asarray(g, float)
    t = time_grid(tp.T, n_steps)
    man = run.manifest
    man.resolved.update({"T": tp.T, "alpha": tp.alpha, "h_sweep": hs})

    samples = run.pmap(lambda h: asy.lambda_h(grid, params, coeffs, g, h, tp, n_steps, ks), hs)
    w = asy.time_weights(tp.T, tp.alpha, m, q, t)
    V0 = asy.solve_V0(grid, coeffs.gamma, g)
    Vt = asy.solve_Vt(grid, coeffs.gamma, coeffs.eps, V0, tp.T, tp.alpha, m, t)
    Va = asy.solve_Va(grid, coeffs.gamma, coeffs.lam, V0, tp.T, tp.alpha, m, q, t)
    lead = w.c * boundary_flux(grid, V0, coeffs.gamma)
    traces = np.array([s.trace for s in samples])
    fit = asy.fit_expansion(hs, traces, m, q, leading=lead)
    _, r1, r2 = asy.remainder_norms(samples, w.c, V0, Vt, Va, m, q)
    e1, e2 = asy.loglog_slope(hs, r1), asy.loglog_slope(hs, r2)
    sig = params.sigma
    man.check("R1_exponent", e1 <= sig + 0.05, e1, sig + 0.05)
    man.check("R2_exponent", e2 <= sig ** 2 + 0.05, e2, sig ** 2 + 0.05)
    man.check("remainder_exponent", fit.remainder_exponent <= sig ** 2 - 1 + 0.1,
              fit.remainder_exponent, sig ** 2 - 1 + 0.1)
    main = (1.0 / m - 1.0, q / m - 1.0)
    man.check("exponents_in_window", all(-1.0 < e < 0.0 for e in main), main)
    sigma_mask = grid.trace(grid.sigma).astype(bool)
    ft = boundary_flux(grid, Vt, coeffs.gamma)
    A = fit.trace(1.0 / m - 1.0)
    rel = float(np.linalg.norm((A - ft)[sigma_mask]) / np.linalg.norm(ft[sigma_mask]))
    man.check("Vt_flux_match", rel <= 0.05, rel, 0.05)
    chain = asy.sign_chain(grid, samples, w.c, V0, Vt, Va)
    for k in ("V0_nonneg", "Vt_nonpos", "Va_nonpos", "R1_nonpos"):
        man.check(f"sign_{k}", chain[k])
    io.write_trace_csv(run.path("traces.csv"), grid,
                       {f"h={h:g}": s.trace for h, s in zip(hs, samples)})
    io.write_json(run.path("expansion_fit.json"), {
        "exponents": main, "fit_columns": fit.exponents,
        "coefficients": {f"{e:.6f}": fit.traces[e] for e in fit.traces},
        "leading": fit.leading, "condition": fit.condition,
        "remainder_exponent": fit.remainder_exponent,
        "R1_norms": r1, "R2_norms": r2, "R1_exponent": e1, "R2_exponent": e2,
        "Vt_flux": ft, "Vt_flux_relative_error": rel, "hs": hs, "notes": fit.notes})


def _rel_l2(grid, f, ref):
    w = grid.cell_volume
    return float(np.sqrt(np.sum(w * (f - ref) ** 2) / np.sum(w * ref ** 2)))


def _recover_setup(run):
    cfg = run.cfg
    grid = build_grid(cfg.grid)
    r = cfg.raw["recover"]
    gamma = _phantom_field(cfg.raw["coefficients"]["gamma"], grid, floor=0.0)
    basis = rec.build_basis(gamma, grid, int(r["basis"]))
    coarse = tuple(r["coarse"]) if r["coarse"] else None
    return grid, r, basis, coarse


def _noisy(run, M, level):
    if level <= 0:
        return M
    E = run.rng.standard_normal(M.shape)
    return M + level * np.abs(M).max() * 0.5 * (E + E.T)


def run_recover(run):
    grid, r, basis, coarse = _recover_setup(run)
    spec = r["phantom"] if r["target"] == "eps" else r["lam_phantom"]
    truth = _phantom_field(spec, grid, floor=0.0)
    M = _noisy(run, rec.linearized_rows(grid, truth, basis), float(r["noise"]))
    res = rec.recover_field(grid, M, basis, coarse=coarse)
    err = _rel_l2(grid, res.field, truth)
    pert = _rel_l2(grid, res.field - 1.0, truth - 1.0) if np.any(truth != 1.0) else 0.0
    man = run.manifest
    tol = float(r["tolerance"])
    man.check("relative_l2_error", err <= tol, err, tol)
    man.check("injective_design", res.smallest_singular_value > 0, res.smallest_singular_value)
    man.resolved.update({"mu": res.mu, "perturbation_relative_error": pert})
    io.write_fields_csv(run.path("recovered.csv"), grid, {"truth": truth, "recovered": res.field})
    io.write_json(run.path("recovery.json"), {
        "mu": res.mu, "mu_path": res.mu_path, "residual_path": res.residual_path,
        "seminorm_path": res.seminorm_path, "singular_values": res.singular_values,
        "relative_l2_error": err, "perturbation_relative_error": pert})


def run_recover_q1(run):
    grid, r, basis, coarse = _recover_setup(run)
    alpha = float(run.cfg.params["alpha"]) if run.cfg.params["alpha"] != "auto" else 2.0
    m = float(run.cfg.params["m"])
    eps = _phantom_field(r["phantom"], grid, floor=0.0)
    lam = _phantom_field(r["lam_phantom"], grid, floor=None)
    T1, T2 = float(r["T1"]), float(r["T2"])
    A = rec.q1_weight_matrix(T1, T2, alpha, m)
    E = rec.linearized_rows(grid, eps, basis)
    L = rec.linearized_rows(grid, lam, basis)
    P1 = _noisy(run, A[0, 0] * E + A[0, 1] * L, float(r["noise"]))
    P2 = _noisy(run, A[1, 0] * E + A[1, 1] * L, float(r["noise"]))
    eh, lh = rec.disambiguate_q1(grid, P1, P2, basis, T1, T2, alpha, m, coarse=coarse)
    man = run.manifest
    tol = float(r["tolerance"])
    e1, e2 = _rel_l2(grid, eh.field, eps), _rel_l2(grid, lh.field, lam)
    man.check("eps_relative_l2_error", e1 <= tol, e1, tol)
    man.check("lam_relative_l2_error", e2 <= tol, e2, tol)
    man.resolved.update({"weights": A, "determinant": float(np.linalg.det(A))})
    io.write_fields_csv(run.path("recovered_q1.csv"), grid,
                        {"eps": eps, "eps_hat": eh.field, "lam": lam, "lam_hat": lh.field})
    io.write_json(run.path("recovery_q1.json"), {"weights": A, "eps_error": e1, "lam_error": e2,
                                                 "mu_eps": eh.mu, "mu_lam": lh.mu})


def run_partial(run):
    cfg = run.cfg
    pc = cfg.raw["partial"]
    geom = pd.NormalizedGeometry.build(int(cfg.grid["extents"][0]), float(cfg.grid.get("c", 0.1)))
    grid = geom.grid
    man = run.manifest
    man.check("geometry", geom.check())
    a, eps_r = float(pc["a"]), float(pc["eps_r"])
    m = float(cfg.params["m"])

    offset = run.rng.standard_normal(4)
    offset *= eps_r * a * run.rng.uniform() / np.linalg.norm(offset)
    z = np.array([2j * a, 0.0]) + offset[:2] + 1j * offset[2:]
    zeta, eta = pd.nullvector_decompose(z, a, eps_r)
    null_res = max(abs(zeta.residual), abs(eta.residual))
    man.check("null_condition", null_res <= 1e-12 * a * a, null_res, 1e-12)

    zmodel = pd.NullVector.model(a)
    hs_cgo = np.geomspace(*pc["h_cgo"], int(pc["n_h"]))
    sups = run.pmap(lambda h: pd.cgo_solution(geom, zmodel, h)[1], hs_cgo)
    fit = pd.fit_exponential_decay(hs_cgo, sups)
    target = geom.c * a
    man.check("cgo_decay_rate", abs(fit.s - target) <= 0.15 * target, fit.s, 0.15)
    man.check("cgo_monotone", bool(np.all(np.diff(sups) > 0)), sups)

    barrier = pd.barrier_U0(geom)
    man.check("barrier_flux", barrier.flux_gamma_max < 0, barrier.flux_gamma_max)
    de = _phantom_field(pc["delta_eps"], grid)
    F = pd.f_density(grid, de, barrier.U0, m)
    worst = np.inf
    for _ in range(int(pc["n_random_z"])):
        zz = run.rng.uniform(-1, 1, 2) + 1j * run.rng.uniform(-0.5, 0.5, 2)
        h = 0.5
        val = abs(pd.segal_bargmann(grid, F, zz, h))
        b1, b2 = pd.sb_bounds(grid, F, zz, h)
        slack = b1 - val if not np.isfinite(b2) else min(b1 - val, b2 - val)
        worst = min(worst, slack / max(b1, 1e-300))
    man.check("segal_bargmann_bounds", worst >= -1e-12, worst, 0.0)
    hs_det = np.geomspace(*pc["h_detect"], 8)
    report = pd.vanishing_slab_detect(geom, F, hs_det, a, eps_r, delta_min=float(pc["delta_min"]))
    man.resolved.update({"verdict": report.verdict, "rate": report.rate, "delta": report.delta})
    man.check("detector_conclusive", report.verdict != "inconclusive", report.verdict)
    io.write_table_csv(run.path("cgo_remainder.csv"), ["h", "sup_R"], zip(hs_cgo, sups))
    io.write_table_csv(run.path("transform_samples.csv"), ["h", "weighted_transform"],
                       zip(hs_det, report.weighted))
    io.write_json(run.path("detector.json"), {
        "verdict": report.verdict, "rate": report.rate, "rate_ci": report.rate_ci,
        "statistic_ci": report.statistic_ci, "delta": report.delta,
        "delta_min": report.delta_min, "local_slopes": report.local_slopes,
        "F_l1": F.l1, "F_flagged_mass": F.flagged_mass, "notes": report.notes,
        "cgo_rate": fit.s, "cgo_rate_ci": fit.s_ci, "cgo_target": target})


RUNNERS = {"forward": run_forward, "transform": run_transform, "sweep": run_sweep,
           "recover": run_recover, "recover-q1": run_recover_q1, "partial": run_partial}


def run(cfg, out, threads=1):
    """Execute one configured stage and write its artifacts and manifest."""
    r = _Run(cfg, out, threads)
    start = time.perf_counter()
    try:
        RUNNERS[cfg.mode](r)
    except Exception as exc:  # reported in the manifest with the stage name
        logger.exception("stage %s failed", cfg.mode)
        r.manifest.error = f"{cfg.mode}: {type(exc).__name__}: {exc}"
    r.manifest.wall_clock_s = time.perf_counter() - start
    r.manifest.tolerances = {k: v["tolerance"] for k, v in r.manifest.checks.items()}
    r.manifest.files.append("manifest.json")
    io.write_json(r.out / "manifest.json", r.manifest.__dict__)
    return r.manifest


# -- selftest -------------------------------------------------------------

def selftest_configs():
    """Small built-in configs covering every mode."""
    square = {"geometry": "square", "extents": [32, 32], "length": [1.0, 1.0]}
    return {
        "forward-zero": {"mode": "forward", "params": {"n_steps": 16}},
        "forward-oracle-a": {
            "mode": "forward", "grid": {"extents": [33]},
            "params": {"n_steps": 32, "ks": [1e3, 1e4]},
            "coefficients": {"lam": {"name": "constant", "value": 1.0}},
            "boundary": {"phi": {"kind": "ramp"}, "source": {"kind": "oracle-a"}},
            "tolerances": {"oracle_linf": 1e-2}},
        "forward-wave": {
            "mode": "forward", "params": {"n_steps": 64, "ks": [1e3, 1e4]},
            "boundary": {"phi": {"kind": "traveling-wave"}},
            "tolerances": {"oracle_linf": 3e-2}},
        "transform": {"mode": "transform", "grid": {"extents": [33]},
                      "params": {"n_steps": 32, "ks": [1e3, 1e4]}},
        "sweep": {"mode": "sweep"},
        "recover": {"mode": "recover", "grid": square},
        "recover-q1": {"mode": "recover-q1", "grid": square},
        "partial": {"mode": "partial", "grid": {"extents": [121]},
                    "partial": {"n_random_z": 20}},
    }


def selftest(out, threads=1, seed=0):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    code = 0
    for name, raw in selftest_configs().items():
        cfg = parse_config(copy.deepcopy(raw), seed=seed)
        man = run(cfg, out / name, threads)
        summary[name] = {"exit_code": man.exit_code, "checks": man.checks, "error": man.error}
        code = max(code, man.exit_code) if code != 1 else 1
        if man.exit_code == 1:
            code = 1
        print(f"{name:20s} {'PASS' if man.exit_code == 0 else 'FAIL'}")
    io.write_json(out / "selftest.json", summary)
    return code


# -- entry point ----------------------------------------------------------

def _threads(arg):
    if arg is not None:
        return int(arg)
    env = os.environ.get(THREADS_ENV)
    return int(env) if env else 1


def main(argv=None):
    ap = argparse.ArgumentParser(prog="pmelab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=MODES + ("selftest",))
    ap.add_argument("--config", help="YAML experiment config")
    ap.add_argument("--out", default="pmelab-out", help="output directory")
    ap.add_argument("--threads", type=int, default=None,
                    help=f"worker threads (default: ${THREADS_ENV} or 1)")
    ap.add_argument("--seed", type=int, default=None, help="seed for randomized test data")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = _threads(args.threads)
    try:
        if args.command == "selftest":
            return selftest(args.out, threads, 0 if args.seed is None else args.seed)
        if args.config:
            cfg = load_config(args.config, mode=args.command, seed=args.seed)
        else:
            cfg = parse_config({}, mode=args.command, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    man = run(cfg, args.out, threads)
    for name, c in man.checks.items():
        print(f"{name:32s} {'PASS' if c['passed'] else 'FAIL'}")
    if man.error:
        print(f"error: {man.error}", file=sys.stderr)
    return man.exit_code


if __name__ == "__main__":
    sys.exit(main())

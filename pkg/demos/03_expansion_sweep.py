"""
Large-data expansion of the transformed boundary map
====================================================

For boundary data h g the transformed flux behaves like
c h^(1/m) dV0 + h^(1/m - 1) dV_t + h^(q/m - 1) dV_a + remainder.
A sweep over h recovers the two correction traces by least squares and
compares the eps trace with an independent elliptic solve.
"""

import numpy as np

from pmelab import asymptotics as asy
from pmelab.forward import CoefficientSet, ProblemParams, time_grid
from pmelab.grid import Grid, boundary_flux
from pmelab.transform import TransformParams, auto_T

m, q, alpha = 2.0, 1.2, 2.0
T = auto_T(m, q, alpha)
grid = Grid.interval(64)
coeffs = CoefficientSet(np.full(64, 1e-5), np.ones(64), np.full(64, 1e-2))
g = np.array([1.0, 2.0])
hs = 2.0 ** np.arange(4, 19, 2)
t = time_grid(T, 64)

samples = asy.sweep(grid, ProblemParams(m, q), coeffs, g, hs, TransformParams(T, alpha), 64)
w = asy.time_weights(T, alpha, m, q, t)
V0 = asy.solve_V0(grid, coeffs.gamma, g)
Vt = asy.solve_Vt(grid, coeffs.gamma, coeffs.eps, V0, T, alpha, m, t)
Va = asy.solve_Va(grid, coeffs.gamma, coeffs.lam, V0, T, alpha, m, q, t)

_, r1, r2 = asy.remainder_norms(samples, w.c, V0, Vt, Va, m, q)
print("R1 exponent:", asy.loglog_slope(hs, r1), " bound", ProblemParams(m, q).sigma + 0.05)
print("R2 exponent:", asy.loglog_slope(hs, r2), " bound", ProblemParams(m, q).sigma ** 2 + 0.05)

lead = w.c * boundary_flux(grid, V0, coeffs.gamma)
fit = asy.fit_expansion(hs, np.array([s.trace for s in samples]), m, q, leading=lead)
print("\nfitted eps trace:    ", fit.trace(1 / m - 1))
print("elliptic eps trace:  ", boundary_flux(grid, Vt, coeffs.gamma))
print("fitted lam trace:    ", fit.trace(q / m - 1))
print("elliptic lam trace:  ", boundary_flux(grid, Va, coeffs.gamma))
print("sign chain:", asy.sign_chain(grid, samples, w.c, V0, Vt, Va))

"""
The time-integral transform
===========================

V(x) = int_0^T (T - t)^alpha u^m dt turns the evolution into an elliptic
identity div(gamma grad V) = N_t + N_a - N_f.  With the moment rule that
matches backward Euler the identity holds to round-off; the trapezoid rule
leaves a first-order defect.
"""

import numpy as np

from pmelab.forward import CoefficientSet, ProblemParams, solve_forward, time_grid
from pmelab.grid import Grid, div_gamma_grad
from pmelab.transform import (TransformParams, auto_alpha, auto_T, holder_constants,
                              source_moment, transform_bundle, v_of_u, verify_inequality)

m, q = 2.0, 1.2
P = ProblemParams(m, q)
alpha = auto_alpha(m)
print("alpha:", alpha, " auto T:", auto_T(m, q, alpha))

for n, nt in [(33, 64), (65, 128), (129, 256)]:
    grid = Grid.interval(n)
    t = time_grid(1.5, nt)
    coeffs = CoefficientSet.constant(grid)
    phi = np.stack([t / 2, np.clip(t - 1, 0, None) / 2], 1)
    k = 1e4
    u = solve_forward(grid, P, coeffs, phi, None, k, t)
    tp = TransformParams(1.5, 2.0)
    # the solver's source is lifted by 1/k
    Nf = source_moment(np.full((t.size, n), 1 / k), t, tp)
    for rule in ("implicit", "trapezoid"):
        b = transform_bundle(v_of_u(u, m), coeffs, tp, m, q, rule=rule)
        defect = np.abs(div_gamma_grad(grid, b.V, coeffs.gamma) - (b.N_t + b.N_a - Nf))
        print(f"{n:4d} nodes  {rule:9s}  max defect {defect[grid.interior].max():.2e}")

rep = verify_inequality(b, coeffs, m, q)
print("\nHolder constants (K_t, K_a):", holder_constants(1.5, 2.0, m, q))
print("node-wise inequalities hold:", rep["verdict"])

"""
Local partial data near a boundary point
========================================

On the disk |x + e1| < 1 the boundary part Gamma = {x1 <= -2c} is not
measured.  A harmonic barrier U0 vanishing on Gamma weights the unknown,
complex geometrical optics probes concentrate at the origin, and the
decay rate of a weighted Segal-Bargmann transform decides whether the
density vanishes on a slab next to the origin.
"""

import numpy as np

from pmelab import partialdata as pd
from pmelab.phantoms import phantom

geom = pd.NormalizedGeometry.build(201, c=0.1)
grid = geom.grid
a, eps_r = 8.0, 0.05

zeta, eta = pd.nullvector_decompose(np.array([2j * a + 0.1, 0.05j]), a, eps_r)
print("null vectors:", zeta.zeta, eta.zeta, " residuals:", zeta.residual, eta.residual)

hs = np.geomspace(0.04, 0.16, 6)
sups = [pd.cgo_solution(geom, pd.NullVector.model(a), h)[1] for h in hs]
fit = pd.fit_exponential_decay(hs, sups)
print("\nCGO remainder sup:", np.array(sups))
print("decay rate:", fit.s, " expected c a =", geom.c * a, " 95% CI", fit.s_ci)

barrier = pd.barrier_U0(geom)
print("\nbarrier uses", barrier.used, "bumps; max flux on Gamma", barrier.flux_gamma_max)

for label, center in [("deep", [-0.8, 0.0]), ("straddling", [-0.05, 0.0])]:
    de = phantom("compact-bump", {"center": center, "radius": 0.2}, grid)
    F = pd.f_density(grid, de, barrier.U0, 2.0)
    rep = pd.vanishing_slab_detect(geom, F, np.geomspace(0.1, 1.0, 8), a, eps_r)
    print(f"{label:10s} bump: {rep.verdict:13s} rate {rep.rate:8.3f}  "
          f"statistic CI {np.round(rep.statistic_ci, 3)}  slab width {rep.delta:.3f}")

"""
Recovering eps and lam from boundary pairings
=============================================

The correction traces paired with gamma-harmonic functions give the moments
int eps V0^(1/m) U_i U_j.  With V0 = 1 a regularized least-squares fit on a
coarse grid recovers eps.  For q = 1 the two corrections share an exponent
and two horizons T1, T2 separate them.
"""

import numpy as np

from pmelab import recovery as rec
from pmelab.grid import Grid
from pmelab.phantoms import phantom

grid = Grid.rectangle(48, 48)
basis = rec.build_basis(np.ones(grid.shape), grid, 13)
eps = phantom("gaussian-bump", {"center": [0.4, 0.55], "width": 0.02, "amplitude": 0.3}, grid)
lam = phantom("gaussian-bump", {"center": [0.6, 0.4], "width": 0.03, "amplitude": 0.5}, grid)


def rel_l2(f, ref):
    w = grid.cell_volume
    return np.sqrt(np.sum(w * (f - ref) ** 2) / np.sum(w * ref ** 2))


res = rec.recover_field(grid, rec.linearized_rows(grid, eps, basis), basis)
print("eps relative L2 error:", rel_l2(res.field, eps))
print("bump relative L2 error:", rel_l2(res.field - 1, eps - 1))
print("regularization weight:", res.mu, " smallest singular value:", res.smallest_singular_value)

# the boundary-map route: pairings from the elliptic corrector, with O(h^2) boundary bias
M = rec.dtn_pairings(grid, np.ones(grid.shape), eps, basis, 1.0, 2.0, 2.0)
print("\ndtn-route eps error:", rel_l2(rec.recover_field(grid, M, basis).field, eps))

A = rec.q1_weight_matrix(0.5, 0.25, 2.0, 2.0)
E, L = rec.linearized_rows(grid, eps, basis), rec.linearized_rows(grid, lam, basis)
eh, lh = rec.disambiguate_q1(grid, A[0, 0] * E + A[0, 1] * L, A[1, 0] * E + A[1, 1] * L,
                             basis, 0.5, 0.25, 2.0, 2.0)
print("\nq = 1 weights determinant:", np.linalg.det(A))
print("q = 1 eps error:", rel_l2(eh.field, eps), " lam error:", rel_l2(lh.field, lam))

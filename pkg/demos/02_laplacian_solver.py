"""
Semi-Lagrangian solver on the Laplacian special case
====================================================

When k1 + k2 equals the dimension the operator is the trace, so the Dirichlet
problem with harmonic data has the data itself as solution. Halving the grid
step should roughly halve the error.
"""

import time

from hessgame import BarrierDomain, OperatorSpec, fields
from hessgame.solver import Grid, max_error, policy_iteration, residual_report

disk = BarrierDomain.unit_ball(2)
spec = OperatorSpec.sum_extremes(2, 1, 1)
g = fields.harmonic_quadratic(2)  # x1^2 - x2^2

previous = None
for h in (1 / 8, 1 / 16, 1 / 32):
    t0 = time.perf_counter()
    field = policy_iteration(spec, Grid.build(disk, h), fields.constant(2), g, tol=1e-8)
    err = max_error(field, g)
    ratio = "" if previous is None else f"  ratio {err / previous:.2f}"
    print(f"h = 1/{round(1 / h):<3d} max error {err:.3e}{ratio}  ({time.perf_counter() - t0:.1f} s)")
    previous = err

rep = residual_report(field)
print("scheme residual on the finest grid:", f"{rep.max_residual:.2e}")

###############################################################################
# A Poisson problem: u = 1 - |x|^2 solves trace D^2 u + 4 = 0 with zero data.
field = policy_iteration(spec, Grid.build(disk, 1 / 16), fields.constant(2, 4.0), fields.constant(2), tol=1e-8)
print("Poisson value at the centre", float(field.interpolate([0.0, 0.0])), "(exact 1)")

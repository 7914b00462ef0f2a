"""
A nonconvex degenerate equation as a differential game
======================================================

For d = 3 the sum of the smallest and the largest eigenvalue is neither convex
nor concave. We solve the Dirichlet problem on a coarse grid and compare it
with Monte Carlo values of the game in which both players follow the spectral
feedback read off the solver's Hessian.
"""

import numpy as np

from hessgame import BarrierDomain, OperatorSpec, fields
from hessgame.game import GameConfig, estimate_value, spectral_feedback_policy
from hessgame.solver import Grid, delta_continuation, policy_iteration

ball = BarrierDomain.unit_ball(3)
spec = OperatorSpec.sum_extremes(3, 1, 1)
g = fields.parse_polynomial(3, "1:2,0,0; 0.5:0,2,0; -1:0,0,2; 0.5:1,0,1")

field = policy_iteration(spec, Grid.build(ball, 1 / 8), fields.constant(3), g, tol=1e-7)
print("policy iterations:", field.diagnostics()["iterations"])

cfg = GameConfig(ball, spec, fields.constant(3), g, dt=1e-3, seed=1)
policy = spectral_feedback_policy(field, field.h)
for x0 in ([0.0, 0.0, 0.0], [0.3, 0.2, -0.1]):
    est = estimate_value(cfg, policy, np.array(x0), 2000)
    print(f"x0={x0}: solver {float(field.interpolate(x0)):+.4f}, game {est.mean:+.4f} +- {est.stderr:.4f}")

###############################################################################
# Adding delta * identity to the diffusion regularises the problem. The sup
# distance to the delta = 0 solution shrinks as delta decreases.
res = delta_continuation(spec, Grid.build(ball, 1 / 8), fields.constant(3), g, [0.4, 0.2, 0.1, 0.0], tol=1e-7)
for d, gap in zip(res.deltas, res.gaps):
    print(f"delta={d:<4} gap {gap:.3e}")

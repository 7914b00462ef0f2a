"""
Eigenvalue-sum operators and their control representation
==========================================================

The operators evaluated here are sums of selected eigenvalues of a symmetric
matrix. Each one is also an inf-sup over pairs of orthogonal projections, and
the spectral pair is a saddle point. This script checks both facts on random
matrices, then runs the barrier assumption checkers on the unit ball.
"""

import numpy as np

from hessgame import BarrierDomain, OperatorSpec, operator_eval
from hessgame.domain import check_geometry_assumption
from hessgame.operators import optimal_controls, control_value, saddle_gap

rng = np.random.default_rng(0)

###############################################################################
# Evaluate the sum of the smallest and the largest eigenvalue in d = 3.
spec = OperatorSpec.sum_extremes(3, 1, 1)
a = rng.standard_normal((3, 3))
gamma = a + a.T
w = np.linalg.eigvalsh(gamma)
print("eigenvalues        ", np.round(w, 4))
print("operator value     ", operator_eval(spec, gamma))
print("smallest + largest ", w[0] + w[-1])

###############################################################################
# The spectral pair attains the value; random projections never beat it.
pair = optimal_controls(spec, gamma)
print("value at spectral pair", control_value(spec, pair, gamma))
beta_gap, alpha_gap = saddle_gap(spec, gamma, 2000, rng)
print(f"saddle gaps: minimiser side {beta_gap:.2e} (>= 0), maximiser side {alpha_gap:.2e} (<= 0)")

###############################################################################
# Barrier assumption. For sum_extremes the worst generator applied to the
# ball barrier equals 1 - (k1 + k2), so the assumption holds with margin.
ball = BarrierDomain.unit_ball(3)
rep = check_geometry_assumption(ball, spec, 100, 50, rng)
print("sum_extremes(1, 1): max violation", rep.max_violation, "passed", rep.passed)

# Middle sums pass only when k + 2j > d; the worst pair found is kept as witness.
for k, j, d in ((1, 1, 3), (1, 2, 4)):
    mid = OperatorSpec.middle_sum(d, k, j, degenerate_ok=True)
    rep = check_geometry_assumption(BarrierDomain.unit_ball(d), mid, 200, 20, rng)
    print(f"middle_sum(d={d}, k={k}, j={j}): max violation {rep.max_violation:+.3f}, passed={rep.passed}")

"""
Barrier description of the domain D = {psi > 0} and checks on its geometry.

Two analytic domains are supported: the unit ball with
psi = (1 - |x|^2) / 2, and axis-aligned ellipsoids with
psi = (a_max / 2) (1 - sum x_i^2 / a_i^2). Both give |psi_x| >= 1 on the
boundary and a constant negative definite psi_xx.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import OutsideDomain
from .operators import (
    ControlPair,
    OperatorSpec,
    check_orthogonal_invariance,
    control_matrix,
)


class Region(enum.Enum):
    OUTSIDE = "outside"
    COLLAR = "collar"  # 0 < psi <= lambda^2
    OVERLAP = "overlap"  # lambda^2 < psi < lambda
    DEEP = "deep"  # psi >= lambda


@dataclass(frozen=True)
class RegionParams:
    kappa: float = 1e-3
    lam: float = 0.5

    def __post_init__(self):
        if not 0 < self.kappa < self.lam**2 < self.lam < 1:
            raise ValueError(
                f"need 0 < kappa < lambda^2 < lambda < 1, got kappa={self.kappa}, lambda={self.lam}"
            )


@dataclass(frozen=True)
class BarrierDomain:
    dim: int
    kind: str = "ball"
    semi_axes: tuple = field(default=None)

    def __post_init__(self):
        if self.kind not in ("ball", "ellipsoid"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if not linalg.MIN_DIM <= self.dim <= linalg.MAX_DIM:
            raise ValueError(f"dimension {self.dim} out of range")
        if self.kind == "ball":
            object.__setattr__(self, "semi_axes", (1.0,) * self.dim)
        else:
            axes = tuple(float(a) for a in self.semi_axes)
            if len(axes) != self.dim or min(axes) <= 0:
                raise ValueError("ellipsoid needs dim positive semi-axes")
            object.__setattr__(self, "semi_axes", axes)

    @classmethod
    def unit_ball(cls, dim):
        return cls(dim, "ball")

    @classmethod
    def ellipsoid(cls, semi_axes):
        return cls(len(semi_axes), "ellipsoid", tuple(semi_axes))

    @property
    def _inv_sq(self):
        return 1.0 / np.asarray(self.semi_axes) ** 2

    @property
    def _scale(self):
        return 0.5 * max(self.semi_axes)

    @property
    def sup_psi(self):
        return self._scale

    @property
    def half_widths(self):
        return np.asarray(self.semi_axes, dtype=float)

    def psi(self, x):
        x = np.asarray(x, dtype=float)
        return self._scale * (1.0 - np.sum(x * x * self._inv_sq, axis=-1))

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        return -2.0 * self._scale * x * self._inv_sq

    def hess(self, x=None):
        h = np.diag(-2.0 * self._scale * self._inv_sq)
        if x is None:
            return h
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(h, x.shape[:-1] + h.shape)

    def contains(self, x):
        return self.psi(x) > 0

    def segment_exit(self, x0, x1):
        """Smallest s in [0, 1] with psi(x0 + s (x1 - x0)) = 0.

        psi is quadratic along a line, so the root is exact. Returns 1 where
        the segment does not leave D.
        """
        x0 = np.asarray(x0, dtype=float)
        dx = np.asarray(x1, dtype=float) - x0
        w = self._inv_sq
        a = np.sum(dx * dx * w, axis=-1)
        b = 2.0 * np.sum(x0 * dx * w, axis=-1)
        c = np.sum(x0 * x0 * w, axis=-1) - 1.0
        disc = np.maximum(b * b - 4.0 * a * c, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (-b + np.sqrt(disc)) / (2.0 * a)
        s = np.where(a > 0, s, 1.0)
        return np.clip(s, 0.0, 1.0)

    def ray_exit(self, x, v):
        """Distance t > 0 with psi(x + t v) = 0 for x inside and unit v."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        w = self._inv_sq
        a = np.sum(v * v * w, axis=-1)
        b = 2.0 * np.sum(x * v * w, axis=-1)
        c = np.sum(x * x * w, axis=-1) - 1.0
        disc = np.maximum(b * b - 4.0 * a * c, 0.0)
        return (-b + np.sqrt(disc)) / (2.0 * a)

    def project_to_boundary(self, x):
        """Move x onto the boundary along the barrier gradient."""
        x = np.array(x, dtype=float)
        for _ in range(6):
            g = self.grad(x)
            g2 = np.sum(g * g, axis=-1, keepdims=True)
            ok = g2 > 1e-24
            step = np.where(ok, self.psi(x)[..., None] * g / np.where(ok, g2, 1.0), 0.0)
            x = x - step
        # radial clean-up puts the point exactly on psi = 0
        r = np.sqrt(np.sum(x * x * self._inv_sq, axis=-1, keepdims=True))
        r = np.where(r > 0, r, 1.0)
        return x / r

    def distance_to_boundary(self, x):
        """First-order estimate psi / |psi_x| (exact for the unit ball up to O(dist^2))."""
        x = np.asarray(x, dtype=float)
        if self.kind == "ball":
            return 1.0 - np.linalg.norm(x, axis=-1)
        g = np.linalg.norm(self.grad(x), axis=-1)
        return self.psi(x) / np.maximum(g, 1e-12)

    def sample_interior(self, n, rng, margin=0.0):
        """Uniform samples in {psi > margin}."""
        out = []
        lo = -self.half_widths
        while sum(len(o) for o in out) < n:
            pts = rng.uniform(lo, -lo, size=(2 * n + 8, self.dim))
            out.append(pts[self.psi(pts) > margin])
        return np.concatenate(out)[:n]

    def sample_boundary(self, n, rng):
        g = rng.standard_normal((n, self.dim))
        return self.project_to_boundary(g)


def classify(domain: BarrierDomain, params: RegionParams, x) -> Region:
    p = float(domain.psi(x))
    if p <= 0:
        return Region.OUTSIDE
    if p <= params.lam**2:
        return Region.COLLAR
    if p < params.lam:
        return Region.OVERLAP
    return Region.DEEP


def exit_moment_bound(domain: BarrierDomain, x, n: int) -> float:
    """n! * (sup psi)^(n-1) * psi(x), the bound on E tau^n from x."""
    if n < 1:
        raise ValueError("moment order must be >= 1")
    p = float(domain.psi(x))
    if p <= 0:
        raise OutsideDomain(f"psi(x) = {p:.3g} <= 0")
    return math.factorial(n) * domain.sup_psi ** (n - 1) * p


@dataclass
class AssumptionReport:
    max_violation: float
    passed: bool
    witness_x: np.ndarray = None
    witness_pair: ControlPair = None
    n_checked: int = 0


@dataclass
class InvarianceReport:
    max_residual: float
    passed: bool
    n_checked: int = 0


def _structured_pairs(spec: OperatorSpec, hess):
    """Control pairs that make tr(a psi_xx) largest for a fixed psi_xx.

    For the ball these attain the supremum exactly; for the middle-sum family
    the second pair keeps the ranges of alpha and beta as disjoint as the
    ranks allow, which is the witness when k + 2j <= d.
    """
    d = spec.dim
    w, v = linalg.eigh_stack(hess)
    top = lambda k: v[:, d - k:]  # least negative directions of psi_xx
    pairs = []
    if spec.kind == "sum_extremes":
        pairs.append(ControlPair(linalg.Projection.from_basis(top(spec.k2)),
                                 linalg.Projection.from_basis(top(spec.k1))))
    else:
        kj, j = spec.k + spec.j, spec.j
        beta = linalg.Projection.from_basis(top(kj))
        alpha = linalg.Projection.from_basis(v[:, :j])
        pairs.append(ControlPair(alpha, beta))
        pairs.append(ControlPair(linalg.Projection.from_basis(top(j)), beta))
    return pairs


def check_geometry_assumption(domain: BarrierDomain, spec: OperatorSpec, n_controls: int,
                              n_points: int, rng, drift=None) -> AssumptionReport:
    """Largest sampled value of tr(a psi_xx) + b . psi_x + 1 over controls and points.

    The report passes iff this is <= 0. ``drift`` maps a ControlPair to a
    drift vector b (zero when omitted, as for the Hessian examples).
    """
    if spec.dim != domain.dim:
        raise ValueError("operator and domain dimensions differ")
    pts = [np.zeros(domain.dim)]
    if n_points > 1:
        k_in = max(1, n_points // 2)
        pts.extend(domain.sample_interior(k_in, rng))
        pts.extend(domain.sample_boundary(max(0, n_points - 1 - k_in), rng))
    pts = np.array(pts)

    pairs = []
    for _ in range(n_controls):
        if spec.kind == "sum_extremes":
            a = linalg.haar_projection(spec.dim, spec.k2, rng)
            b = linalg.haar_projection(spec.dim, spec.k1, rng)
        else:
            a = linalg.haar_projection(spec.dim, spec.j, rng)
            b = linalg.haar_projection(spec.dim, spec.k + spec.j, rng)
        pairs.append(ControlPair(a, b))

    best = -np.inf
    witness = (None, None)
    for x in pts:
        hx = domain.hess(x)
        gx = domain.grad(x)
        for pair in pairs + _structured_pairs(spec, hx):
            val = float(np.trace(control_matrix(spec, pair) @ hx)) + 1.0
            if drift is not None:
                val += float(np.dot(drift(pair), gx))
            if val > best:
                best, witness = val, (x, pair)
    return AssumptionReport(max_violation=best, passed=bool(best <= 0.0),
                            witness_x=witness[0], witness_pair=witness[1],
                            n_checked=len(pts) * (len(pairs) + 2))


def check_invariance_assumption(spec: OperatorSpec, n_samples: int, rng, identity_only=False):
    """Max |H(q^T gamma q) - H(gamma)| over random symmetric gamma and Haar q."""
    worst = 0.0
    for _ in range(n_samples):
        g = rng.standard_normal((spec.dim, spec.dim))
        gamma = linalg.SymMatrix(g + g.T)
        q = np.eye(spec.dim) if identity_only else linalg.haar_orthogonal(spec.dim, rng)
        worst = max(worst, check_orthogonal_invariance(spec, gamma, q))
    return InvarianceReport(max_residual=worst, passed=bool(worst <= 1e-8), n_checked=n_samples)

"""
Monotone wide-stencil solver for the Dirichlet problem

    inf_beta sup_alpha [ tr(a^{alpha beta} u_xx) + f ] = 0 in D,   u = g on the boundary,

with optional regularization a -> a + (delta^2 / 2) I.

The generator of a control pair is discretized along the columns s of a
factor with s s^T = 2a:

    L u(x) ~ sum_s |s|^2 / 2 * D_{s/|s|} u(x),

    D_v u(x) = 2 / (r+ + r-) * [ (u(x + r+ v) - u(x)) / r+ + (u(x - r- v) - u(x)) / r- ],

where r+ = r- = rho = m h unless the foot leaves D, in which case it is cut at
the boundary and g is used there. Feet inside D are read off the lattice by
multilinear interpolation. The stencil length rho ~ sqrt(h) keeps the
interpolation error O(h^2 / rho^2) = O(h), so the scheme is monotone and
consistent for arbitrary (degenerate) directions.

The discrete Isaacs system is solved by Howard's policy iteration over finite
control sets refreshed with the spectral frames of the current discrete
Hessian at every node.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import linalg
from .domain import BarrierDomain
from .errors import NonMonotoneStencil, NotConverged, OutOfGrid
from .operators import (
    ControlPair,
    FiniteControlSet,
    OperatorSpec,
    control_factor,
    operator_eval_stack,
    spectral_frames,
)

logger = logging.getLogger(__name__)

# spectral frames within STICKY_FRAME_TOL * h * (1 + |H|) of optimal are kept
STICKY_FRAME_TOL = 1e-3


def stencil_multiple(h, dim=2, factor=1.0):
    """Integer m with rho = m h close to factor * sqrt(h)."""
    m = int(round(factor / math.sqrt(h)))
    return max(m, int(math.ceil(math.sqrt(dim))) + 1)


@dataclass
class Grid:
    """Cartesian lattice over the bounding box of D.

    Interior nodes (psi > 0, not within 1e-3 h of the boundary) carry the
    unknowns; every other lattice node is a ghost node holding boundary data.
    """

    domain: BarrierDomain
    h: float
    lo: np.ndarray
    shape: tuple
    interior: np.ndarray  # flat lattice indices of interior nodes
    unknown_id: np.ndarray  # flat lattice index -> unknown number or -1
    points: np.ndarray  # (n_interior, d)
    rho: float

    @classmethod
    def build(cls, domain: BarrierDomain, h: float, stencil_factor: float = 1.0, pad: int = 2):
        if h <= 0:
            raise ValueError("grid spacing must be positive")
        d = domain.dim
        half = np.ceil(domain.half_widths / h).astype(int) + pad
        lo = -half * h
        shape = tuple(int(2 * n + 1) for n in half)
        axes = [lo[i] + h * np.arange(shape[i]) for i in range(d)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        inside = domain.distance_to_boundary(mesh) > 1e-3 * h
        inside &= domain.psi(mesh) > 0
        interior = np.flatnonzero(inside)
        unknown_id = np.full(mesh.shape[0], -1, dtype=np.int64)
        unknown_id[interior] = np.arange(interior.size)
        rho = stencil_multiple(h, d, stencil_factor) * h
        return cls(domain, h, lo, shape, interior, unknown_id, mesh[interior], rho)

    @property
    def dim(self):
        return self.domain.dim

    @property
    def n_interior(self):
        return self.interior.size

    def node_coords(self):
        d = self.dim
        axes = [self.lo[i] + self.h * np.arange(self.shape[i]) for i in range(d)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)

    def refine(self, stencil_factor: float = 1.0):
        return Grid.build(self.domain, self.h / 2, stencil_factor=stencil_factor)


_CORNERS = {}


def _corner_offsets(d):
    if d not in _CORNERS:
        _CORNERS[d] = np.array(list(itertools.product((0, 1), repeat=d)), dtype=np.int64)
    return _CORNERS[d]


def interp_weights(grid: Grid, x):
    """Flat corner indices and multilinear weights, shapes (..., 2^d)."""
    x = np.asarray(x, dtype=float)
    d = grid.dim
    shape = np.asarray(grid.shape)
    pos = (x - grid.lo) / grid.h
    if np.any(pos < -1e-9) or np.any(pos > shape - 1 + 1e-9):
        raise OutOfGrid("point outside the lattice box")
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, shape - 2)
    t = pos - i0
    off = _corner_offsets(d)
    strides = np.array([int(np.prod(shape[i + 1:])) for i in range(d)], dtype=np.int64)
    base = (i0 * strides).sum(-1)
    idx = base[..., None] + off @ strides
    w = np.prod(np.where(off == 1, t[..., None, :], 1.0 - t[..., None, :]), axis=-1)
    return idx, w


def interpolate(grid: Grid, lattice, x):
    idx, w = interp_weights(grid, x)
    return np.sum(lattice.reshape(-1)[idx] * w, axis=-1)


@dataclass
class _Feet:
    """Both feet of a batch of centred second differences."""

    step: np.ndarray  # (..., 2) step lengths r+, r-
    hit: np.ndarray  # (..., 2) foot cut at the boundary
    pts: np.ndarray  # (..., 2, d)


def _feet(grid: Grid, x, dirs, rho):
    x = np.asarray(x, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    xb = np.broadcast_to(x[:, None, :], dirs.shape)
    sgn = np.array([1.0, -1.0])
    v = dirs[..., None, :] * sgn[:, None]  # (N, m, 2, d)
    tmax = grid.domain.ray_exit(xb[..., None, :], v)
    hit = tmax < rho
    step = np.where(hit, tmax, rho)
    step = np.maximum(step, 1e-14)
    pts = xb[..., None, :] + step[..., None] * v
    return _Feet(step, hit, pts)


def _foot_values(grid, lattice, g, feet):
    out = np.empty(feet.step.shape)
    hit = feet.hit
    if np.any(hit):
        out[hit] = g(feet.pts[hit])
    miss = ~hit
    if np.any(miss):
        out[miss] = interpolate(grid, lattice, feet.pts[miss])
    return out


def second_differences(grid: Grid, lattice, g, x, u0, dirs, rho):
    """D_v u at points x for unit directions ``dirs`` of shape (N, m, d)."""
    feet = _feet(grid, x, dirs, rho)
    uf = _foot_values(grid, lattice, g, feet)
    sp_, sm = feet.step[..., 0], feet.step[..., 1]
    u0 = np.asarray(u0)[:, None]
    return 2.0 / (sp_ + sm) * ((uf[..., 0] - u0) / sp_ + (uf[..., 1] - u0) / sm)


def _axis_dirs(d):
    return np.eye(d)


def _hessian_dirs(d):
    """Unit directions whose second differences determine a symmetric matrix."""
    dirs = list(np.eye(d))
    pairs = []
    for i, j in itertools.combinations(range(d), 2):
        e = np.zeros(d)
        e[i] = e[j] = 1 / math.sqrt(2)
        dirs.append(e.copy())
        e[j] = -e[j]
        dirs.append(e)
        pairs.append((i, j))
    return np.array(dirs), pairs


def discrete_hessian(grid, lattice, g, x, u0, rho):
    """Matrix estimate from second differences along axes and diagonals."""
    d = grid.dim
    dirs, pairs = _hessian_dirs(d)
    vals = second_differences(grid, lattice, g, x, u0, np.broadcast_to(dirs, (len(x),) + dirs.shape), rho)
    hes = np.zeros((len(x), d, d))
    hes[:, range(d), range(d)] = vals[:, :d]
    for n, (i, j) in enumerate(pairs):
        off = 0.5 * (vals[:, d + 2 * n] - vals[:, d + 2 * n + 1])
        hes[:, i, j] = hes[:, j, i] = off
    return hes


@dataclass
class ValueField:
    """Numerical solution on a Grid together with its diagnostics."""

    grid: Grid
    values: np.ndarray  # interior unknowns
    lattice: np.ndarray  # full lattice (interior + ghost values)
    residual: float
    iterations: int
    delta: float
    converged: bool
    spec: OperatorSpec = None
    f: object = None
    g: object = None
    settings: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def h(self):
        return self.grid.h

    @property
    def domain(self):
        return self.grid.domain

    def __call__(self, x):
        return self.interpolate(x)

    def interpolate(self, x):
        x = np.asarray(x, dtype=float)
        return interpolate(self.grid, self.lattice, x)

    def hessian(self, x, step):
        """Centred second differences of the interpolated field."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = x.shape[-1]
        e = np.eye(d) * step
        u0 = self.interpolate(x)
        hes = np.empty(x.shape[:-1] + (d, d))
        for i in range(d):
            up = self.interpolate(x + e[i])
            um = self.interpolate(x - e[i])
            hes[..., i, i] = (up - 2 * u0 + um) / step**2
            for j in range(i + 1, d):
                pp = self.interpolate(x + e[i] + e[j])
                pm = self.interpolate(x + e[i] - e[j])
                mp = self.interpolate(x - e[i] + e[j])
                mm = self.interpolate(x - e[i] - e[j])
                hes[..., i, j] = hes[..., j, i] = (pp - pm - mp + mm) / (4 * step**2)
        return hes

    def gradient(self, x, step=None):
        """Centred differences; one-sided inward where a foot leaves D."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        step = self.grid.h if step is None else step
        d = x.shape[-1]
        dom = self.domain
        u0 = self.interpolate(x)
        out = np.empty(x.shape)
        for i in range(d):
            e = np.zeros(d)
            e[i] = step
            xp, xm = x + e, x - e
            inp, inm = dom.contains(xp), dom.contains(xm)
            up = self.interpolate(np.clip(xp, self.grid.lo, -self.grid.lo))
            um = self.interpolate(np.clip(xm, self.grid.lo, -self.grid.lo))
            central = (up - um) / (2 * step)
            fwd = (up - u0) / step
            bwd = (u0 - um) / step
            out[..., i] = np.where(inp & inm, central, np.where(inm, bwd, fwd))
        return out

    def node_values(self):
        return self.grid.points, self.values

    def diagnostics(self):
        return {
            "residual": float(self.residual),
            "iterations": int(self.iterations),
            "delta": float(self.delta),
            "converged": bool(self.converged),
            "h": float(self.grid.h),
            "rho": float(self.grid.rho),
            "n_interior": int(self.grid.n_interior),
        }

    def diagnostics_text(self):
        lines = ["{"]
        items = list(self.diagnostics().items())
        for n, (k, v) in enumerate(items):
            if isinstance(v, bool):
                v = "true" if v else "false"
            sep = "," if n < len(items) - 1 else ""
            lines.append(f'  "{k}": {v}{sep}')
        lines.append("}")
        return "\n".join(lines)

    def to_csv(self, path):
        d = self.grid.dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(d)] + ["value"])
            for p, v in zip(self.grid.points, self.values):
                w.writerow([f"{c:.10g}" for c in p] + [f"{v:.12g}"])


def ghost_values(grid: Grid, g, mode="project"):
    """Boundary data on every non-interior lattice node."""
    coords = grid.node_coords()
    if mode == "project":
        vals = g(grid.domain.project_to_boundary(coords))
    elif mode == "extend":
        vals = g(coords)
    else:
        raise ValueError(f"unknown ghost mode {mode!r}")
    return np.asarray(vals, dtype=float).reshape(grid.shape)


def _lattice_with(grid, ghost, u):
    lat = ghost.reshape(-1).copy()
    lat[grid.interior] = u
    return lat.reshape(grid.shape)


class _Stage:
    """Candidate frames frozen for one outer iteration.

    Per node the candidates are the spectral frames of the discrete Hessian
    of recent iterates (the ``bank``) followed by the node-independent
    FiniteControlSet. For the middle-sum family the maximizer candidates are
    j-frames inside the range of each beta candidate: the top Ritz vectors of
    the compressed Hessian plus the shared coefficient frames.
    """

    def __init__(self, spec, controls, grid, hes, bank):
        self.spec = spec
        n = grid.n_interior
        if spec.kind == "sum_extremes":
            fa = [b[0] for b in bank] + [np.broadcast_to(controls.alpha, (n,) + controls.alpha.shape)]
            fb = [b[1] for b in bank] + [np.broadcast_to(controls.beta, (n,) + controls.beta.shape)]
            self.fa = np.concatenate(fa, axis=1)  # (N, nA, d, k2)
            self.fb = np.concatenate(fb, axis=1)  # (N, nB, d, k1)
        else:
            fb = np.concatenate(
                [b[1] for b in bank] + [np.broadcast_to(controls.beta, (n,) + controls.beta.shape)], axis=1
            )
            nb = fb.shape[1]
            comp = np.einsum("nbik,nij,nbjl->nbkl", fb, hes, fb)
            _, cv = linalg.eigh_stack(comp)
            w_all = np.concatenate(
                [cv[:, :, None, :, spec.k:], np.broadcast_to(controls.alpha, (n, nb) + controls.alpha.shape)],
                axis=2,
            )
            self.fb = fb
            self.frames = np.einsum("nbik,nbwkj->nbwij", fb, w_all)  # (N, nB, nW, d, j)

    def values(self, grid, lattice, g, u, rho):
        if self.spec.kind == "sum_extremes":
            return (_frame_values(grid, lattice, g, u, self.fa, rho),
                    _frame_values(grid, lattice, g, u, self.fb, rho))
        n, nb, nw, d, j = self.frames.shape
        v = _frame_values(grid, lattice, g, u, self.frames.reshape(n, nb * nw, d, j), rho)
        return v.reshape(n, nb, nw)

    def best_alpha(self, vals, ib):
        """Maximizer response to the minimizer policy ``ib``: (iw, value)."""
        rows = np.arange(len(ib))
        if self.spec.kind == "sum_extremes":
            va, vb = vals
            iw = np.argmax(va, axis=1)
            return iw, va[rows, iw] + vb[rows, ib]
        v = vals[rows, ib]
        iw = np.argmax(v, axis=1)
        return iw, v[rows, iw]

    def policy_value(self, vals, ib, iw):
        rows = np.arange(len(ib))
        if self.spec.kind == "sum_extremes":
            return vals[0][rows, iw] + vals[1][rows, ib]
        return vals[rows, ib, iw]

    def game(self, vals):
        """Lower-player optimal policy of the per-node matrix game: (ib, iw, value)."""
        if self.spec.kind == "sum_extremes":
            va, vb = vals
            ib = np.argmin(vb, axis=1)
            iw = np.argmax(va, axis=1)
            rows = np.arange(len(ib))
            return ib, iw, va[rows, iw] + vb[rows, ib]
        iw_all = np.argmax(vals, axis=2)
        inner = np.take_along_axis(vals, iw_all[..., None], axis=2)[..., 0]
        ib = np.argmin(inner, axis=1)
        rows = np.arange(len(ib))
        return ib, iw_all[rows, ib], inner[rows, ib]

    def directions(self, ib, iw):
        """Unit directions (N, m, d) of the frozen pair at every node."""
        rows = np.arange(len(ib))
        if self.spec.kind == "sum_extremes":
            chosen = np.concatenate([self.fa[rows, iw], self.fb[rows, ib]], axis=-1)
        else:
            chosen = self.frames[rows, ib, iw]
        return np.swapaxes(chosen, -1, -2)

def _frame_values(grid, lattice, g, u, frames, rho):
    n, nf, d, k = frames.shape
    dirs = np.swapaxes(frames, -1, -2).reshape(n, nf * k, d)
    vals = second_differences(grid, lattice, g, grid.points, u, dirs, rho)
    return vals.reshape(n, nf, k).sum(-1)


def _assemble(grid: Grid, ghost, g, groups):
    """Sparse matrix A and known vector b with L u = A u + b.

    ``groups`` is a list of (dirs (N, m, d), coef (N, m) or scalar, step).
    """
    n = grid.n_interior
    x = grid.points
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    known = np.zeros(n)
    ghost_flat = ghost.reshape(-1)
    uid = grid.unknown_id
    for dirs, coef, step in groups:
        coef = np.broadcast_to(np.asarray(coef, dtype=float), dirs.shape[:2])
        feet = _feet(grid, x, dirs, step)
        sp_, sm = feet.step[..., 0], feet.step[..., 1]
        wfoot = coef[..., None] * 2.0 / (feet.step * (sp_ + sm)[..., None])  # (N, m, 2)
        diag -= (coef * 2.0 / (sp_ * sm)).sum(axis=1)
        node = np.broadcast_to(np.arange(n)[:, None, None], feet.step.shape)
        hit = feet.hit
        if np.any(hit):
            np.add.at(known, node[hit], wfoot[hit] * g(feet.pts[hit]))
        miss = ~hit
        if np.any(miss):
            idx, w = interp_weights(grid, feet.pts[miss])
            ww = wfoot[miss][:, None] * w
            r = np.broadcast_to(node[miss][:, None], idx.shape)
            u_of = uid[idx]
            is_u = u_of >= 0
            rows.append(r[is_u])
            cols.append(u_of[is_u])
            vals.append(ww[is_u])
            np.add.at(known, r[~is_u], ww[~is_u] * ghost_flat[idx[~is_u]])
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    a = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return a, known


def _check_monotone(a):
    d = a.diagonal()
    off = a - sp.diags(d)
    if np.any(d >= 0) or (off.nnz and off.data.min() < -1e-12):
        raise NonMonotoneStencil("frozen-control matrix is not an M-matrix")


def _solve_linear(a, rhs, method="iterative", x0=None):
    """Solve the frozen-control system.

    The wide stencil makes the matrix strongly diagonally dominant, so Jacobi
    preconditioned GMRES converges in a few dozen steps; an ILU preconditioner
    and then SuperLU are fallbacks.
    """
    if method == "direct":
        return spla.spsolve(a.tocsc(), rhs)
    scale = max(float(np.max(np.abs(rhs))), 1e-300)
    jac = sp.diags(1.0 / a.diagonal())
    sol, info = spla.gmres(a, rhs, x0=x0, M=jac, rtol=1e-13, atol=1e-14 * scale, restart=60, maxiter=400)
    if info == 0:
        return sol
    logger.debug("jacobi-gmres did not converge (info=%d), trying ILU", info)
    ilu = spla.spilu(a.tocsc(), drop_tol=1e-5, fill_factor=10)
    m = spla.LinearOperator(a.shape, ilu.solve)
    sol, info = spla.gmres(a, rhs, x0=sol, M=m, rtol=1e-13, atol=1e-14 * scale, restart=60, maxiter=200)
    if info == 0:
        return sol
    return spla.spsolve(a.tocsc(), rhs)


def _frame_sum(hes, frames):
    return np.einsum("nik,nij,njk->n", frames, hes, frames)


def _top_ritz_sum(hes, frames, j):
    comp = np.einsum("nik,nij,njl->nkl", frames, hes, frames)
    return np.linalg.eigvalsh(comp)[:, -j:].sum(-1)


def _spectral_bank_entry(spec, hes, prev=None, tol=0.0):
    """Spectral frames of the discrete Hessians.

    Where the previous entry's frame is within ``tol`` of the spectral
    optimum it is kept. Near-degenerate eigenvalues otherwise hand the
    iteration a fresh noise-driven frame every time, and the residual
    stalls at the interpolation error instead of converging.
    """
    w, vecs = linalg.eigh_stack(hes)
    sa, sb = spectral_frames(spec, vecs)
    if prev is not None and tol > 0:
        pa, pb = prev[0][:, 0], prev[1][:, 0]
        scale = tol * (1.0 + np.abs(w).max(axis=-1))
        if spec.kind == "sum_extremes":
            keep_a = _frame_sum(hes, pa) >= w[:, spec.dim - spec.k2:].sum(-1) - scale
            keep_b = _frame_sum(hes, pb) <= w[:, :spec.k1].sum(-1) + scale
            sa = np.where(keep_a[:, None, None], pa, sa)
            sb = np.where(keep_b[:, None, None], pb, sb)
        else:
            keep = _top_ritz_sum(hes, pb, spec.j) <= w[:, spec.k:spec.k + spec.j].sum(-1) + scale
            sa = np.where(keep[:, None, None], pa, sa)
            sb = np.where(keep[:, None, None], pb, sb)
    return sa[:, None], sb[:, None]


class _Solve:
    """Shared state of one policy-iteration run."""

    def __init__(self, spec, grid, f, g, delta, controls, ghost, linear_solver, c=0.0):
        self.spec, self.grid, self.g, self.delta, self.c = spec, grid, g, delta, float(c)
        self.controls = controls
        self.ghost = ghost_values(grid, g, ghost)
        self.f_nodes = np.asarray(f(grid.points), dtype=float) * np.ones(grid.n_interior)
        self.linear_solver = linear_solver
        self.n_linear = 0

    def lattice(self, u):
        return _lattice_with(self.grid, self.ghost, u)

    def extra(self, lat, u):
        """delta term, f and the discount -c u at every node."""
        out = self.f_nodes - self.c * u if self.c else self.f_nodes.copy()
        if self.delta:
            grid = self.grid
            n, d = grid.n_interior, grid.dim
            lap = second_differences(grid, lat, self.g, grid.points, u, np.broadcast_to(np.eye(d), (n, d, d)), grid.h)
            out += 0.5 * self.delta**2 * lap.sum(axis=1)
        return out

    def hessian(self, lat, u):
        return discrete_hessian(self.grid, lat, self.g, self.grid.points, u, self.grid.rho)

    def stage(self, bank, hes):
        return _Stage(self.spec, self.controls, self.grid, hes, bank)

    def evaluate(self, stage, u):
        lat = self.lattice(u)
        return stage.values(self.grid, lat, self.g, u, self.grid.rho), self.extra(lat, u)

    def linear_solve(self, stage, ib, iw, u):
        grid = self.grid
        groups = [(stage.directions(ib, iw), 1.0, grid.rho)]
        if self.delta:
            d = grid.dim
            groups.append((np.broadcast_to(np.eye(d), (grid.n_interior, d, d)), 0.5 * self.delta**2, grid.h))
        a, known = _assemble(grid, self.ghost, self.g, groups)
        if self.c:
            a = (a - self.c * sp.identity(grid.n_interior, format="csr")).tocsr()
        _check_monotone(a)
        self.n_linear += 1
        return _solve_linear(a, -(self.f_nodes + known), self.linear_solver, x0=u)

    def solve_stage(self, stage, u, switch_tol, max_outer=50, max_inner=50):
        """Hoffman-Karp iteration for the finite game of one stage.

        The minimizer policy is improved only after the maximizer's problem
        against it is solved exactly (by Howard), and only where the
        improvement exceeds ``switch_tol``; this is monotone and terminates
        on a finite game, unlike simultaneous switching.
        """
        vals, extra = self.evaluate(stage, u)
        ib, iw, _ = stage.game(vals)
        for _ in range(max_outer):
            for _ in range(max_inner):
                u = self.linear_solve(stage, ib, iw, u)
                vals, extra = self.evaluate(stage, u)
                iw_new, best = stage.best_alpha(vals, ib)
                cur = stage.policy_value(vals, ib, iw)
                switch = best > cur + switch_tol
                if not np.any(switch):
                    break
                iw = np.where(switch, iw_new, iw)
            ib_new, iw_new, val = stage.game(vals)
            cur = stage.policy_value(vals, ib, iw)
            switch = val < cur - switch_tol
            if not np.any(switch):
                break
            ib = np.where(switch, ib_new, ib)
            iw = np.where(switch, iw_new, iw)
        return u


def policy_iteration(spec: OperatorSpec, grid: Grid, f, g, delta: float = 0.0,
                     control_sets: FiniteControlSet = None, tol: float = 1e-6,
                     max_iter: int = 30, u0=None, ghost: str = "project",
                     linear_solver: str = "iterative", bank_size: int = 16,
                     strict: bool = False, c: float = 0.0) -> ValueField:
    """Policy iteration for the discrete upper Isaacs system.

    Outer iterations refresh the per-node candidate frames with spectral
    frames of the current discrete Hessian; each resulting finite game is
    solved exactly by nested Howard iteration (``_Solve.solve_stage``).
    The stopping residual is measured with the refreshed candidates. If it
    fails to decrease twice in a row the outer update is damped by 1/2.
    A discount ``c >= 0`` adds -c u to every generator.
    """
    if spec.dim != grid.dim:
        raise ValueError("operator and grid dimensions differ")
    if control_sets is None:
        control_sets = FiniteControlSet.build(spec, n_haar=16, seed=0)
    if c < 0:
        raise ValueError("discount c must be non-negative")
    run = _Solve(spec, grid, f, g, delta, control_sets, ghost, linear_solver, c)
    u = np.asarray(g(grid.points), dtype=float).copy() if u0 is None else np.array(u0, dtype=float)
    switch_tol = min(1e-9, 0.01 * tol)
    bank = []
    history = []
    stalls = 0
    converged = False
    it = 0
    for it in range(max_iter + 1):
        lat = run.lattice(u)
        hes = run.hessian(lat, u)
        entry = _spectral_bank_entry(spec, hes, bank[0] if bank else None, STICKY_FRAME_TOL * grid.h)
        bank = ([entry] + bank)[:bank_size]
        stage = run.stage(bank, hes)
        vals, extra = run.evaluate(stage, u)
        _, _, val = stage.game(vals)
        r = float(np.max(np.abs(val + extra))) if val.size else 0.0
        history.append(r)
        logger.debug("outer iteration %d: residual %.3e (%d linear solves)", it, r, run.n_linear)
        if r <= tol:
            converged = True
            break
        if it == max_iter:
            break
        u_new = run.solve_stage(stage, u, switch_tol)
        stalls = stalls + 1 if len(history) > 1 and r >= history[-2] else 0
        u = 0.5 * (u + u_new) if stalls >= 2 else u_new
    lat = run.lattice(u)
    out = ValueField(
        grid=grid, values=u, lattice=lat, residual=history[-1], iterations=it,
        delta=delta, converged=converged, spec=spec, f=f, g=g,
        settings={"tol": tol, "max_iter": max_iter, "ghost": ghost, "control_sets": control_sets,
                  "linear_solver": linear_solver, "bank": bank, "linear_solves": run.n_linear,
                  "c": float(c)},
        history=history,
    )
    if not converged:
        msg = f"policy iteration stopped after {it} outer iterations with residual {history[-1]:.3e} > {tol:g}"
        if strict:
            raise NotConverged(msg, field=out)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return out


def pair_directions(spec: OperatorSpec, pair: ControlPair):
    """Unit directions and coefficients |s|^2 / 2 of the generator of a pair."""
    s = control_factor(spec, pair)
    norms = np.linalg.norm(s, axis=0)
    keep = norms > 1e-12
    s, norms = s[:, keep], norms[keep]
    return (s / norms).T, 0.5 * norms**2


def discretize_generator(pair: ControlPair, field_: ValueField, x_node, delta: float = None,
                         spec: OperatorSpec = None) -> float:
    """Discrete L^{alpha beta} u at one interior node of ``field_``."""
    spec = spec or field_.spec
    delta = field_.delta if delta is None else delta
    grid = field_.grid
    x = np.atleast_2d(np.asarray(x_node, dtype=float))
    u0 = field_.interpolate(x)
    dirs, coef = pair_directions(spec, pair)
    val = second_differences(grid, field_.lattice, field_.g, x, u0, dirs[None], grid.rho)[0] @ coef
    if delta:
        lap = second_differences(grid, field_.lattice, field_.g, x, u0, np.eye(grid.dim)[None], grid.h)
        val += 0.5 * delta**2 * lap.sum()
    return float(val)


@dataclass
class ResidualReport:
    max_residual: float
    argmax_node: np.ndarray
    residuals: np.ndarray


def residual_report(field_: ValueField, spec: OperatorSpec = None, f=None,
                    control_sets: FiniteControlSet = None) -> ResidualReport:
    """Node-wise |inf_beta sup_alpha [L u + f]| over the shared control set,
    the spectral frames of the field itself and any frames banked by the
    solver."""
    spec = spec or field_.spec
    f = f or field_.f
    control_sets = control_sets or field_.settings.get("control_sets") or FiniteControlSet.build(spec, 16)
    grid = field_.grid
    run = _Solve(spec, grid, f, field_.g, field_.delta, control_sets,
                 field_.settings.get("ghost", "project"), "iterative", field_.settings.get("c", 0.0))
    run.ghost = field_.lattice
    u = field_.values
    hes = run.hessian(field_.lattice, u)
    prev = list(field_.settings.get("bank", []))
    bank = [_spectral_bank_entry(spec, hes, prev[0] if prev else None, STICKY_FRAME_TOL * grid.h)] + prev
    stage = run.stage(bank, hes)
    vals, extra = run.evaluate(stage, u)
    _, _, val = stage.game(vals)
    res = val + extra
    i = int(np.argmax(np.abs(res)))
    return ResidualReport(float(np.abs(res[i])), grid.points[i], res)


@dataclass
class ContinuationResult:
    fields: list
    deltas: list
    gaps: list


def delta_continuation(spec: OperatorSpec, grid: Grid, f, g, deltas, tol: float = 1e-6,
                       **kwargs) -> ContinuationResult:
    """Solve along decreasing delta, warm-starting each solve from the last.

    ``gaps[i]`` is the sup-norm distance between the delta_i field and the
    field for the last (smallest) delta.
    """
    deltas = [float(x) for x in deltas]
    if any(b > a for a, b in zip(deltas, deltas[1:])) or deltas[-1] < 0:
        raise ValueError("deltas must be non-increasing and non-negative")
    fields = []
    u0 = None
    for dl in deltas:
        fld = policy_iteration(spec, grid, f, g, delta=dl, tol=tol, u0=u0, **kwargs)
        fields.append(fld)
        u0 = fld.values
    last = fields[-1].values
    gaps = [float(np.max(np.abs(fl.values - last))) for fl in fields]
    return ContinuationResult(fields, deltas, gaps)


def max_error(field_: ValueField, exact) -> float:
    return float(np.max(np.abs(field_.values - exact(field_.grid.points))))


def consistency_on_quadratic(spec: OperatorSpec, grid: Grid, gamma, pair: ControlPair):
    """Discrete generator of ``pair`` applied to x^T gamma x / 2 at every node
    and the exact value tr(a gamma)."""
    from .fields import quadratic_form
    from .operators import control_value

    q = quadratic_form(gamma)
    gh = ghost_values(grid, q, "extend")
    u = q(grid.points)
    lat = _lattice_with(grid, gh, u)
    dirs, coef = pair_directions(spec, pair)
    n = grid.n_interior
    vals = second_differences(grid, lat, q, grid.points, u, np.broadcast_to(dirs, (n,) + dirs.shape), grid.rho) @ coef
    return vals, control_value(spec, pair, gamma)


def operator_on_field(field_: ValueField, points=None):
    """H evaluated on the discrete Hessian of the field at nodes (diagnostic)."""
    grid = field_.grid
    x = grid.points if points is None else np.atleast_2d(points)
    u0 = field_.interpolate(x)
    hes = discrete_hessian(grid, field_.lattice, field_.g, x, u0, grid.rho)
    return operator_eval_stack(field_.spec, hes)

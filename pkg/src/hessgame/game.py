"""
Monte Carlo simulation of the controlled diffusion

    dx_t = sigma^{alpha beta} dw_t + delta dw~_t,    sigma = psd_sqrt(2 a^{alpha beta}),

up to the first exit time tau from D, with payoff

    int_0^tau f(x_t) e^{-phi_t} dt + g(x_tau) e^{-phi_tau},   phi_t = c t.

Paths are simulated in vectorized batches, but every path draws its normals
from its own generator seeded by (seed, path_index) in fixed-size chunks, so
results do not depend on the batch size or on the number of worker threads.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from . import linalg
from .domain import BarrierDomain, exit_moment_bound
from .errors import OutOfGrid, StepLimitExceeded
from .fields import Polynomial
from .linalg import Projection
from .operators import ControlPair, OperatorSpec, control_matrix, spectral_frames

# Boundary shift for discretely monitored exit (Gobet-Menozzi):
# E[overshoot] of a Gaussian random walk is zeta(1/2)/sqrt(2 pi) ~ 0.5826 steps.
EXIT_SHIFT = 0.5826
NOISE_CHUNK = 128


@dataclass
class GameConfig:
    domain: BarrierDomain
    spec: OperatorSpec
    f: object
    g: object
    c: float = 0.0
    delta: float = 0.0
    dt: float = 1e-3
    seed: int = 0
    exit_mode: str = "shift"  # or "interpolate"
    batch_size: int = 100000
    threads: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 <= self.delta < 1:
            raise ValueError("delta must lie in [0, 1)")
        if self.c < 0:
            raise ValueError("discount c must be nonnegative")
        if self.exit_mode not in ("shift", "interpolate"):
            raise ValueError(f"unknown exit mode {self.exit_mode!r}")
        if self.spec.dim != self.domain.dim:
            raise ValueError("operator and domain dimensions differ")
        rng = np.random.default_rng(12345)
        pts = np.concatenate([self.domain.sample_interior(16, rng), self.domain.sample_boundary(16, rng)])
        if not (np.all(np.isfinite(self.f(pts))) and np.all(np.isfinite(self.g(pts)))):
            raise ValueError("f or g is not finite on the validation sample")

    @property
    def max_steps(self):
        return int(math.ceil(50 * self.domain.sup_psi / self.dt))


def path_rng(seed, path_index, stream=0):
    """Generator for one path; stream 0 drives w, stream 1 the delta noise w~."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(path_index), stream])))


def _sigma_of(spec, alpha_basis, beta_basis):
    """psd_sqrt(2 a) for stacks of frames."""
    if spec.kind == "sum_extremes":
        a = alpha_basis @ np.swapaxes(alpha_basis, -1, -2) + beta_basis @ np.swapaxes(beta_basis, -1, -2)
    else:
        pb = beta_basis @ np.swapaxes(beta_basis, -1, -2)
        pa = alpha_basis @ np.swapaxes(alpha_basis, -1, -2)
        a = pb @ pa @ pb
    return linalg.psd_sqrt_stack(2.0 * a)


class ConstantPolicy:
    """The same control pair at every state."""

    def __init__(self, spec: OperatorSpec, pair: ControlPair):
        self.spec = spec
        self.pair = pair
        self._sigma = np.asarray(linalg.psd_sqrt(2.0 * control_matrix(spec, pair)))

    def start(self, x):
        return {}

    def step(self, x, state):
        return np.broadcast_to(self._sigma, x.shape[:1] + self._sigma.shape), state

    def pair_at(self, state, i):
        return self.pair


class SpectralFeedbackPolicy:
    """Saddle controls of the numerical Hessian of a value field.

    The Hessian is taken by centred second differences of the interpolated
    field with step ``fd_step``. Within ``fd_step`` of the boundary (or when
    the stencil leaves the lattice) the previous pair is kept; these
    fallbacks are counted in ``fallbacks``.
    """

    def __init__(self, value_field, fd_step: float):
        if fd_step <= 0:
            raise ValueError("fd_step must be positive")
        self.field = value_field
        self.spec = value_field.spec
        self.fd_step = fd_step
        self.fallbacks = 0

    def frames(self, x):
        hes = self.field.hessian(x, self.fd_step)
        _, vecs = linalg.eigh_stack(hes)
        return spectral_frames(self.spec, vecs)

    def _safe_frames(self, x):
        try:
            return self.frames(x)
        except OutOfGrid:
            # pull the stencil centre inside before giving up
            dom = self.field.domain
            scale = 1.0 - 2 * self.fd_step / min(dom.semi_axes)
            return self.frames(x * scale)

    def start(self, x):
        fa, fb = self._safe_frames(x)
        return {"alpha": fa, "beta": fb, "sigma": _sigma_of(self.spec, fa, fb)}

    def step(self, x, state):
        near = self.field.domain.distance_to_boundary(x) < self.fd_step
        ok = ~near
        if np.any(ok):
            try:
                fa, fb = self.frames(x[ok])
            except OutOfGrid:
                ok[:] = False
            else:
                state = dict(state)
                for key, val in (("alpha", fa), ("beta", fb)):
                    arr = state[key].copy()
                    arr[ok] = val
                    state[key] = arr
                sig = state["sigma"].copy()
                sig[ok] = _sigma_of(self.spec, fa, fb)
                state["sigma"] = sig
        self.fallbacks += int(np.count_nonzero(~ok))
        return state["sigma"], state

    def pair_at(self, state, i):
        return ControlPair(Projection.from_basis(state["alpha"][i]), Projection.from_basis(state["beta"][i]))


def spectral_feedback_policy(value_field, fd_step: float) -> SpectralFeedbackPolicy:
    return SpectralFeedbackPolicy(value_field, fd_step)


@dataclass
class TrajectoryRecord:
    states: np.ndarray
    controls: list
    tau: float
    phi_tau: float
    payoff: float
    exited: bool
    steps: int = 0


@dataclass
class _BatchResult:
    tau: np.ndarray
    payoff: np.ndarray
    exit_x: np.ndarray
    hit_limit: np.ndarray
    steps: np.ndarray
    path: list = None  # states of path 0 when recording
    controls: list = None


def _take(state, keep):
    return {k: v[keep] for k, v in state.items()}


def _run_batch(cfg: GameConfig, pol, x0, path_idx, record=False) -> _BatchResult:
    dom = cfg.domain
    d = dom.dim
    n = len(path_idx)
    dt = cfg.dt
    sq = math.sqrt(dt)
    x = np.array(np.broadcast_to(np.asarray(x0, dtype=float), (n, d)))
    if np.any(dom.psi(x) <= 0):
        raise ValueError("starting point outside D")
    gens = [path_rng(cfg.seed, i, 0) for i in path_idx]
    # w~ has its own stream so delta comparisons share w exactly
    gens_t = [path_rng(cfg.seed, i, 1) for i in path_idx] if cfg.delta else None
    grad_max = 1.1 * float(np.max(np.linalg.norm(dom.grad(np.diag(dom.half_widths)), axis=1)))
    # ||sigma||_2 <= 2 since a has eigenvalues in [0, 2]
    shift_cap = EXIT_SHIFT * sq * math.sqrt(4.0 + cfg.delta**2) * grad_max

    tau = np.full(n, np.nan)
    payoff = np.zeros(n)
    exit_x = np.full((n, d), np.nan)
    steps = np.zeros(n, dtype=np.int64)
    alive = np.arange(n)
    run_int = np.zeros(n)
    state = pol.start(x)
    path, controls = ([x[0].copy()], [pol.pair_at(state, 0)]) if record else (None, None)
    buf = buf_t = slot = None
    for k in range(cfg.max_steps):
        if alive.size == 0:
            break
        j = k % NOISE_CHUNK
        if j == 0:
            buf = np.empty((alive.size, NOISE_CHUNK, d))
            for s_, i in enumerate(alive):
                gens[i].standard_normal((NOISE_CHUNK, d), out=buf[s_])
            if gens_t is not None:
                buf_t = np.empty((alive.size, NOISE_CHUNK, d))
                for s_, i in enumerate(alive):
                    gens_t[i].standard_normal((NOISE_CHUNK, d), out=buf_t[s_])
            slot = np.arange(alive.size)
        z = buf[slot, j]
        sig, state = pol.step(x, state)
        disc = math.exp(-cfg.c * k * dt)
        run_int += cfg.f(x) * disc * dt
        x_new = x + sq * np.einsum("nij,nj->ni", sig, z)
        if cfg.delta:
            x_new += cfg.delta * sq * buf_t[slot, j]
        p_new = dom.psi(x_new)
        if cfg.exit_mode == "shift":
            out = p_new <= shift_cap
            if np.any(out):
                near = np.flatnonzero(out)
                gr = dom.grad(x_new[near])
                normal_sd = np.einsum("nij,ni->nj", sig[near], gr)
                spread = np.sum(normal_sd**2, axis=1) + cfg.delta**2 * np.sum(gr**2, axis=1)
                out[near] = p_new[near] <= EXIT_SHIFT * sq * np.sqrt(spread)
            t_exit = np.full(out.sum(), (k + 1) * dt)
            x_exit = dom.project_to_boundary(x_new[out])
        else:
            out = p_new <= 0
            p_old = dom.psi(x[out])
            s = p_old / (p_old - p_new[out])
            t_exit = (k + s) * dt
            x_exit = dom.project_to_boundary(x[out] + s[:, None] * (x_new[out] - x[out]))
        if record:
            path.append(x_exit[0] if out[0] else x_new[0].copy())
        if np.any(out):
            ids = alive[out]
            tau[ids] = t_exit
            exit_x[ids] = x_exit
            steps[ids] = k + 1
            payoff[ids] = run_int[out] + cfg.g(x_exit) * np.exp(-cfg.c * t_exit)
            keep = ~out
            alive, x_new, run_int, slot = alive[keep], x_new[keep], run_int[keep], slot[keep]
            state = _take(state, keep)
        x = x_new
        if record and alive.size:
            controls.append(pol.pair_at(state, 0))
    hit = np.zeros(n, dtype=bool)
    hit[alive] = True
    steps[alive] = cfg.max_steps
    return _BatchResult(tau, payoff, exit_x, hit, steps, path, controls)


@numba.njit(cache=True)
def _k_project(x, inv_sq, scale):
    y = x.copy()
    d = y.size
    for _ in range(6):
        p = 0.0
        g2 = 0.0
        for i in range(d):
            p += y[i] * y[i] * inv_sq[i]
        p = scale * (1.0 - p)
        for i in range(d):
            gi = -2.0 * scale * y[i] * inv_sq[i]
            g2 += gi * gi
        if g2 > 1e-24:
            for i in range(d):
                y[i] -= p * (-2.0 * scale * y[i] * inv_sq[i]) / g2
    r = 0.0
    for i in range(d):
        r += y[i] * y[i] * inv_sq[i]
    r = math.sqrt(r)
    if r > 0:
        for i in range(d):
            y[i] /= r
    return y


@numba.njit(cache=True)
def _k_poly(coef, exps, x):
    out = 0.0
    for m in range(coef.size):
        t = coef[m]
        for i in range(x.size):
            e = exps[m, i]
            if e:
                t *= x[i] ** e
        out += t
    return out


@numba.njit(cache=True, nogil=True)
def _k_path(gen, gen_t, use_t, x0, sigma, delta, dt, c, max_steps, inv_sq, scale, shift_mode,
            f_coef, f_exps, rec):
    """One Euler path under a constant diffusion matrix; returns
    (tau, exit point, running payoff integral, steps)."""
    d = x0.size
    sq = math.sqrt(dt)
    x = x0.copy()
    xn = np.empty(d)
    z = np.empty(d)
    zt = np.empty(d)
    integral = 0.0
    record = rec.shape[0] > 1
    for k in range(max_steps):
        for i in range(d):
            z[i] = gen.standard_normal()
        if use_t:
            for i in range(d):
                zt[i] = gen_t.standard_normal()
        integral += _k_poly(f_coef, f_exps, x) * math.exp(-c * k * dt) * dt
        pn = 0.0
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += sigma[i, j] * z[j]
            xn[i] = x[i] + sq * acc
            if use_t:
                xn[i] += delta * sq * zt[i]
            pn += xn[i] * xn[i] * inv_sq[i]
        pn = scale * (1.0 - pn)
        if shift_mode:
            spread = 0.0
            g2 = 0.0
            for j in range(d):
                acc = 0.0
                for i in range(d):
                    acc += sigma[i, j] * (-2.0 * scale * xn[i] * inv_sq[i])
                spread += acc * acc
            for i in range(d):
                gi = -2.0 * scale * xn[i] * inv_sq[i]
                g2 += gi * gi
            spread += delta * delta * g2
            if pn <= 0.5826 * sq * math.sqrt(spread):
                xe = _k_project(xn, inv_sq, scale)
                if record:
                    rec[k + 1] = xe
                return (k + 1) * dt, xe, integral, k + 1
        elif pn <= 0.0:
            po = 0.0
            for i in range(d):
                po += x[i] * x[i] * inv_sq[i]
            po = scale * (1.0 - po)
            s = po / (po - pn)
            xe = _k_project(x + s * (xn - x), inv_sq, scale)
            if record:
                rec[k + 1] = xe
            return (k + s) * dt, xe, integral, k + 1
        if record:
            rec[k + 1] = xn
        x[:] = xn
    return np.nan, x, integral, max_steps


def _poly_arrays(f, d):
    if isinstance(f, Polynomial):
        coef = np.array([t[0] for t in f.terms], dtype=float)
        exps = np.array([t[1] for t in f.terms], dtype=np.int64).reshape(len(coef), d)
        return coef, exps
    return None


def _run_batch_compiled(cfg: GameConfig, pol, x0, path_idx, record=False) -> _BatchResult:
    dom = cfg.domain
    d = dom.dim
    n = len(path_idx)
    x0 = np.asarray(x0, dtype=float).reshape(d)
    if dom.psi(x0) <= 0:
        raise ValueError("starting point outside D")
    coef, exps = _poly_arrays(cfg.f, d)
    inv_sq = np.asarray(dom._inv_sq, dtype=float)
    sigma = np.ascontiguousarray(pol._sigma)
    use_t = bool(cfg.delta)
    rec = np.zeros((cfg.max_steps + 1 if record else 1, d))
    rec[0] = x0
    tau = np.empty(n)
    run_int = np.empty(n)
    exit_x = np.empty((n, d))
    steps = np.empty(n, dtype=np.int64)
    dummy = path_rng(cfg.seed, 0, 1)
    for m, i in enumerate(path_idx):
        gen = path_rng(cfg.seed, i, 0)
        gen_t = path_rng(cfg.seed, i, 1) if use_t else dummy
        tau[m], exit_x[m], run_int[m], steps[m] = _k_path(
            gen, gen_t, use_t, x0, sigma, float(cfg.delta), float(cfg.dt), float(cfg.c), cfg.max_steps,
            inv_sq, float(dom._scale), cfg.exit_mode == "shift", coef, exps, rec,
        )
    hit = np.isnan(tau)
    payoff = np.full(n, np.nan)
    ok = ~hit
    payoff[ok] = run_int[ok] + cfg.g(exit_x[ok]) * np.exp(-cfg.c * tau[ok])
    exit_x[hit] = np.nan
    path = list(rec[:steps[0] + 1]) if record else None
    controls = [pol.pair] * (steps[0] + 1) if record else None
    return _BatchResult(tau, payoff, exit_x, hit, steps, path, controls)


def _runner(cfg, pol):
    if isinstance(pol, ConstantPolicy) and _poly_arrays(cfg.f, cfg.domain.dim) is not None:
        return _run_batch_compiled
    return _run_batch


def simulate_trajectory(cfg: GameConfig, pol, x0, path_index: int) -> TrajectoryRecord:
    """One path with its full state and control history."""
    x0 = np.asarray(x0, dtype=float)
    if cfg.domain.psi(x0) <= 0:
        raise ValueError("x0 must lie in D")
    res = _runner(cfg, pol)(cfg, pol, x0[None], [path_index], record=True)
    states = np.array(res.path)
    if res.hit_limit[0]:
        rec = TrajectoryRecord(states, res.controls, float("nan"), float("nan"), float("nan"), False,
                               int(res.steps[0]))
        raise StepLimitExceeded(f"no exit after {cfg.max_steps} steps", record=rec)
    tau = float(res.tau[0])
    return TrajectoryRecord(states, res.controls, tau, cfg.c * tau, float(res.payoff[0]), True,
                            int(res.steps[0]))


def _simulate_many(cfg: GameConfig, pol, x0, n_paths: int, first_index: int = 0) -> _BatchResult:
    idx = np.arange(first_index, first_index + n_paths)
    run = _runner(cfg, pol)
    size = max(1, min(cfg.batch_size, -(-n_paths // max(cfg.threads, 1))))
    chunks = [idx[i:i + size] for i in range(0, n_paths, size)]
    if cfg.threads > 1 and len(chunks) > 1 and not isinstance(pol, SpectralFeedbackPolicy):
        with ThreadPoolExecutor(cfg.threads) as ex:
            parts = list(ex.map(lambda c: run(cfg, pol, x0, c), chunks))
    else:
        parts = [run(cfg, pol, x0, c) for c in chunks]
    # ordered reduction: concatenation in path-index order
    return _BatchResult(
        tau=np.concatenate([p.tau for p in parts]),
        payoff=np.concatenate([p.payoff for p in parts]),
        exit_x=np.concatenate([p.exit_x for p in parts]),
        hit_limit=np.concatenate([p.hit_limit for p in parts]),
        steps=np.concatenate([p.steps for p in parts]),
    )


@dataclass
class ValueEstimate:
    mean: float
    stderr: float
    n_paths: int
    n_used: int
    step_limit_hits: int
    mean_tau: float
    tau_stderr: float
    samples: np.ndarray = field(default=None, repr=False)
    taus: np.ndarray = field(default=None, repr=False)


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    if v.size < 2:
        return float(v.mean()) if v.size else float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def estimate_value(cfg: GameConfig, pol, x0, n_paths: int) -> ValueEstimate:
    """Mean payoff over paths 0..n_paths-1; paths hitting the step limit are
    excluded from the mean and counted."""
    if n_paths < 2:
        raise ValueError("need at least 2 paths")
    res = _simulate_many(cfg, pol, x0, n_paths)
    ok = ~res.hit_limit
    m, se = _mean_se(res.payoff[ok])
    mt, st = _mean_se(res.tau[ok])
    return ValueEstimate(m, se, n_paths, int(ok.sum()), int(res.hit_limit.sum()), mt, st, res.payoff[ok],
                         res.tau[ok])


@dataclass
class MomentEstimate:
    order: int
    mean: float
    stderr: float
    bound: float

    @property
    def within_bound(self):
        return self.mean - self.bound <= 3 * self.stderr


def estimate_exit_moments(cfg: GameConfig, pol, x0, n_paths: int, n_max: int = 2):
    """E[tau^n], n = 1..n_max, with standard errors and the moment bounds."""
    if not 1 <= n_max <= 4:
        raise ValueError("n_max must be in 1..4")
    res = _simulate_many(cfg, pol, x0, n_paths)
    return moments_from_taus(cfg.domain, x0, res.tau[~res.hit_limit], n_max)


def moments_from_taus(domain, x0, tau, n_max: int = 2):
    """Moment estimates from already simulated exit times."""
    out = []
    for n in range(1, n_max + 1):
        m, se = _mean_se(tau**n)
        out.append(MomentEstimate(n, m, se, exit_moment_bound(domain, x0, n)))
    return out


CSV_COLUMNS = ("n_paths", "mean", "stderr", "mean_tau", "bound_tau", "step_limit_hits")


def write_value_csv(path, cfg: GameConfig, rows):
    """``rows`` is a sequence of (x0, ValueEstimate)."""
    d = cfg.domain.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(d)] + list(CSV_COLUMNS))
        for x0, est in rows:
            bound = exit_moment_bound(cfg.domain, x0, 1)
            w.writerow([f"{c:.10g}" for c in np.asarray(x0)] + [
                est.n_paths, f"{est.mean:.10g}", f"{est.stderr:.6g}", f"{est.mean_tau:.10g}",
                f"{bound:.10g}", est.step_limit_hits,
            ])

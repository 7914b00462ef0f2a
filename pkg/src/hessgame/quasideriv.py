"""
Quasiderivatives of the controlled diffusion and the barrier estimates built on them.

Along a path x_t the first quasiderivative xi_t, the adjoint zeta_t and the
payoff-derivative accumulators solve

    d xi    = (r sigma + P sigma) dw + (2 r b - sigma pi) dt,
    d zeta  = pi . dw,
    d xi^{d+1} = 2 r c dt,
    d xi^{d+3} = e^{-phi} [ f_(xi) + (2 r - xi^{d+1} + zeta) f ] dt,

where (r, P, pi) are the boundary auxiliary functions (r1, P1, pi1) near the
boundary and the interior ones (r2, 0, pi2) deep inside, switched by a
hysteresis automaton at psi = lambda^2 and psi = lambda. The quantity

    e^{-phi} (grad u . xi) + e^{-phi} (zeta - xi^{d+1}) u + xi^{d+3}

evaluated at the exit time from {psi > kappa} estimates the directional
derivative u_(xi)(x0).

The Euler step is refined near the boundary, dt_n = min(dt, dt_rel psi^2),
because r1 and pi1 grow like 1/psi.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .domain import BarrierDomain, RegionParams
from .errors import Blowup, RegionViolation, StepLimitExceeded
from .game import GameConfig, path_rng
from .linalg import SkewMatrix, skew_exp

CENSOR_LEVEL = 1e8
STABILITY_REL = 0.2  # allowed relative drift of a mean when the path count doubles


@dataclass(frozen=True)
class AuxParams:
    lam: float = 0.5
    theta_b2: float = 1.0 / 6.0
    K1: float = 1.0
    kappa: float = 1e-3
    dt_rel: float = 0.01

    def __post_init__(self):
        RegionParams(kappa=self.kappa, lam=self.lam)  # validates kappa < lam^2 < lam < 1
        if not 0 < self.theta_b2 < 1.0 / 3.0:
            raise ValueError("theta_b2 must lie in (0, 1/3)")
        if self.K1 < 1:
            raise ValueError("K1 must be >= 1")
        if not 0 < self.dt_rel <= 1:
            raise ValueError("dt_rel must lie in (0, 1]")

    @classmethod
    def from_region(cls, region: RegionParams, **kw):
        return cls(lam=region.lam, kappa=region.kappa, **kw)


@dataclass
class AuxValues:
    B: float
    r: float
    P: SkewMatrix
    pi: np.ndarray


# -- vectorized closed forms ---------------------------------------------------
# x, xi: (n, d); sigma: (n, d, m) with columns sigma_k.

def _geometry(domain, x, xi):
    psi = domain.psi(x)
    gx = domain.grad(x)
    hx = domain.hess(x)
    psi_xi = np.einsum("ni,ni->n", gx, xi)
    hxi = np.einsum("nij,nj->ni", hx, xi)  # (psi_{x^j})_(xi)
    return psi, gx, psi_xi, hxi


def _gammas(psi, lam):
    g1 = 1.0 + psi / (8 * lam) * (1.0 - psi / (4 * lam))
    g2 = lam**2 + psi * (1.0 - psi / (4 * lam))
    return g1, g2


def boundary_aux_batch(domain, params: AuxParams, x, xi, sigma):
    psi, gx, psi_xi, hxi = _geometry(domain, x, xi)
    lam = params.lam
    g1, g2 = _gammas(psi, lam)
    xi2 = np.einsum("ni,ni->n", xi, xi)
    B = g2 * (g1 * xi2 + psi_xi**2 / psi)
    gn2 = np.einsum("ni,ni->n", gx, gx)
    r = -np.einsum("ni,ni->n", gx, hxi) / gn2 + psi_xi / psi
    P = (hxi[:, :, None] * gx[:, None, :] - hxi[:, None, :] * gx[:, :, None]) / gn2[:, None, None]
    psi_sig = np.einsum("ni,nik->nk", gx, sigma)
    xi_sig = np.einsum("ni,nik->nk", xi, sigma)
    pref = (1.0 - psi / (2 * lam)) / (2 * g2)
    pi = pref[:, None] * ((psi_xi / psi)[:, None] * psi_sig + g1[:, None] * xi_sig)
    return B, r, P, pi


def interior_aux_batch(domain, params: AuxParams, x, xi, sigma):
    psi, gx, psi_xi, _ = _geometry(domain, x, xi)
    th, lam, k1 = params.theta_b2, params.lam, params.K1
    xi2 = np.einsum("ni,ni->n", xi, xi)
    B = lam ** (3 * th) * psi ** (1 - 2 * th) * (k1 * xi2 + psi_xi**2 / psi)
    r = th * psi_xi / psi
    d = x.shape[-1]
    P = np.zeros((x.shape[0], d, d))
    psi_sig = np.einsum("ni,nik->nk", gx, sigma)
    xi_sig = np.einsum("ni,nik->nk", xi, sigma)
    pref = th * (1 - 2 * th) ** 2 / (2 * (1 - 3 * th) * psi**2)
    pi = pref[:, None] * (k1 * psi[:, None] * xi_sig + psi_xi[:, None] * psi_sig)
    return B, r, P, pi


def _single(fn, domain, params, x, xi, sigma_cols):
    x = np.asarray(x, dtype=float)[None]
    xi = np.asarray(xi, dtype=float)[None]
    sig = np.asarray(sigma_cols, dtype=float)
    if sig.ndim == 1:
        sig = sig[:, None]
    B, r, P, pi = fn(domain, params, x, xi, sig[None])
    return AuxValues(float(B[0]), float(r[0]), SkewMatrix(P[0]), pi[0])


def boundary_aux(domain: BarrierDomain, params: AuxParams, x, xi, sigma_cols) -> AuxValues:
    """B1, r1, P1, pi1 at one point of {0 < psi < lambda}."""
    p = float(domain.psi(x))
    if not 0 < p < params.lam:
        raise RegionViolation(f"boundary formulas need 0 < psi < lambda, got psi = {p:.4g}")
    return _single(boundary_aux_batch, domain, params, x, xi, sigma_cols)


def interior_aux(domain: BarrierDomain, params: AuxParams, x, xi, sigma_cols) -> AuxValues:
    """B2, r2, P2 = 0, pi2 at one point of {psi > lambda^2}."""
    p = float(domain.psi(x))
    if not p > params.lam**2:
        raise RegionViolation(f"interior formulas need psi > lambda^2, got psi = {p:.4g}")
    return _single(interior_aux_batch, domain, params, x, xi, sigma_cols)


def _b1(domain, params, x, xi):
    psi, _, psi_xi, _ = _geometry(domain, x, xi)
    g1, g2 = _gammas(psi, params.lam)
    return g2 * (g1 * np.einsum("ni,ni->n", xi, xi) + psi_xi**2 / psi)


def _b2(domain, params, x, xi):
    psi, _, psi_xi, _ = _geometry(domain, x, xi)
    th = params.theta_b2
    return params.lam ** (3 * th) * psi ** (1 - 2 * th) * (
        params.K1 * np.einsum("ni,ni->n", xi, xi) + psi_xi**2 / psi
    )


def barrier_upper(domain, params, x, xi):
    """1_{psi < lambda} B1 + 1_{psi >= lambda^2} B2 (both terms in the overlap)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    psi = domain.psi(x)
    out = np.zeros(len(x))
    m1 = (psi > 0) & (psi < params.lam)
    m2 = psi >= params.lam**2
    if np.any(m1):
        out[m1] += _b1(domain, params, x[m1], xi[m1])
    if np.any(m2):
        out[m2] += _b2(domain, params, x[m2], xi[m2])
    return out


def barrier_lower(domain, params, x, xi):
    """B1 below lambda^2, min(B1, B2) on [lambda^2, lambda], B2 above lambda."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    psi = domain.psi(x)
    lam = params.lam
    out = np.zeros(len(x))
    low = (psi > 0) & (psi < lam**2)
    mid = (psi >= lam**2) & (psi <= lam)
    high = psi > lam
    if np.any(low):
        out[low] = _b1(domain, params, x[low], xi[low])
    if np.any(mid):
        out[mid] = np.minimum(_b1(domain, params, x[mid], xi[mid]), _b2(domain, params, x[mid], xi[mid]))
    if np.any(high):
        out[high] = _b2(domain, params, x[high], xi[high])
    return out


def time_change(r, eps):
    """theta(eps) = 1 + arctan(2 pi eps r) / pi, always in (1/2, 3/2)."""
    return 1.0 + np.arctan(2.0 * np.pi * np.asarray(eps) * np.asarray(r)) / np.pi


def girsanov_weight(pi_path, eps, dt, increments):
    """exp(sum eps pi . dw - 1/2 sum |eps pi|^2 dt) along one path.

    ``pi_path`` and ``increments`` have shape (n_steps, m); ``dt`` is a
    scalar or per-step array.
    """
    pi_path = np.asarray(pi_path, dtype=float)
    inc = np.asarray(increments, dtype=float)
    if pi_path.shape != inc.shape:
        raise ValueError("pi_path and increments are not aligned")
    dt = np.broadcast_to(np.asarray(dt, dtype=float), pi_path.shape[:1])
    ep = eps * pi_path
    return float(np.exp(np.sum(ep * inc) - 0.5 * np.sum(np.sum(ep * ep, axis=-1) * dt)))


def rotation(P, eps):
    """Q(eps) = exp(eps P), orthogonal for skew P."""
    return skew_exp(np.asarray(P, dtype=float), eps)


def barrier_generator(domain, params: AuxParams, x, xi, sigma, which: int):
    """Ito generator of B_which along the (x, xi) dynamics with b = 0.

    Uses second differences of B along the joint diffusion columns
    (sigma_k, (r I + P) sigma_k) and a centred first difference along the
    drift (0, -sigma pi). Returns (L B, B) per point.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 2:
        sigma = np.broadcast_to(sigma, (len(x),) + sigma.shape)
    aux, bfun = (boundary_aux_batch, _b1) if which == 1 else (interior_aux_batch, _b2)
    _, r, P, pi = aux(domain, params, x, xi, sigma)
    d = x.shape[1]
    b0 = bfun(domain, params, x, xi)
    h = 1e-4 * np.minimum(domain.psi(x), 1.0)[:, None]
    mix = r[:, None, None] * np.eye(d) + P
    out = np.zeros(len(x))
    for k in range(sigma.shape[2]):
        vx = sigma[:, :, k] * h
        vxi = np.einsum("nij,nj->ni", mix, sigma[:, :, k]) * h
        bp = bfun(domain, params, x + vx, xi + vxi)
        bm = bfun(domain, params, x - vx, xi - vxi)
        out += 0.5 * (bp - 2 * b0 + bm) / h[:, 0] ** 2
    dxi = -np.einsum("nik,nk->ni", sigma, pi) * h
    out += (bfun(domain, params, x, xi + dxi) - bfun(domain, params, x, xi - dxi)) / (2 * h[:, 0])
    return out, b0


@dataclass
class DriftScan:
    """Largest L B / B found on each barrier's region (<= 0 means supermartingale)."""

    worst_b1: float
    witness_b1: tuple
    worst_b2: float
    witness_b2: tuple
    n_samples: int

    @property
    def supermartingale(self):
        return self.worst_b1 <= 1e-6 and self.worst_b2 <= 1e-6


def barrier_drift_scan(domain: BarrierDomain, params: AuxParams, sigmas, n_samples: int, rng) -> DriftScan:
    """Sample (x, xi, sigma) on {kappa < psi < lambda} and {psi > lambda^2} and
    report the worst relative generator of B1 and B2.

    ``sigmas`` is a stack (m, d, d1) of candidate diffusion matrices.
    """
    sigmas = np.asarray(sigmas, dtype=float)
    if sigmas.ndim == 2:
        sigmas = sigmas[None]
    d = domain.dim
    res = []
    for which, lo, hi in ((1, params.kappa, params.lam), (2, params.lam**2, np.inf)):
        pts = domain.sample_interior(4 * n_samples, rng)
        p = domain.psi(pts)
        pts = pts[(p > lo) & (p < hi)][:n_samples]
        if len(pts) == 0:
            res += [-np.inf, None]
            continue
        xi = rng.standard_normal((len(pts), d))
        sig = sigmas[rng.integers(len(sigmas), size=len(pts))]
        lb, b = barrier_generator(domain, params, pts, xi, sig, which)
        ratio = np.where(b > 0, lb / np.where(b > 0, b, 1), 0.0)
        i = int(np.argmax(ratio))
        res += [float(ratio[i]), (pts[i], xi[i])]
    return DriftScan(res[0], res[1], res[2], res[3], n_samples)


# -- regimes -------------------------------------------------------------------

BOUNDARY = "boundary"
INTERIOR = "interior"


@dataclass
class QuasiState:
    x: np.ndarray
    xi: np.ndarray
    zeta: float = 0.0
    regime: str = INTERIOR
    xi_d1: float = 0.0
    xi_d3: float = 0.0
    t: float = 0.0
    phi: float = 0.0


def initial_regime(domain, params, x):
    return BOUNDARY if float(domain.psi(x)) <= params.lam**2 else INTERIOR


def switch_regime(state: QuasiState, domain: BarrierDomain, params: AuxParams) -> QuasiState:
    """Hysteresis: Interior until psi <= lambda^2, Boundary until psi >= lambda."""
    p = float(domain.psi(state.x))
    if state.regime == INTERIOR and p <= params.lam**2:
        state.regime = BOUNDARY
    elif state.regime == BOUNDARY and p >= params.lam:
        state.regime = INTERIOR
    return state


def _switch(boundary, psi, lam):
    return np.where(boundary, psi < lam, psi <= lam**2)


# -- simulation ----------------------------------------------------------------

def _f_gradient(f, x, step=1e-6):
    if hasattr(f, "gradient"):
        return f.gradient(x)
    d = x.shape[-1]
    out = np.empty_like(x)
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        out[:, i] = (f(x + e) - f(x - e)) / (2 * step)
    return out


@dataclass
class QuasiBatch:
    """Terminal states of a batch of quasi-system paths."""

    x: np.ndarray
    xi: np.ndarray
    zeta: np.ndarray
    xi_d1: np.ndarray
    xi_d3: np.ndarray
    phi: np.ndarray
    tau: np.ndarray
    censored: np.ndarray
    hit_limit: np.ndarray
    sup_xi2: np.ndarray
    energy: np.ndarray  # int (|xi|^2 + psi_(xi)^2 / psi^2) dt
    checkpoints: np.ndarray = None  # (n, n_horizons) B_lower at min(t_i, tau)
    states: list = None


def _run_quasi(cfg: GameConfig, pol, params: AuxParams, x0, xi0, path_idx, horizons=(), record=False,
               max_steps=None):
    dom = cfg.domain
    d = dom.dim
    n = len(path_idx)
    lam, kappa = params.lam, params.kappa
    x = np.array(np.broadcast_to(np.asarray(x0, dtype=float), (n, d)))
    xi = np.array(np.broadcast_to(np.asarray(xi0, dtype=float), (n, d)))
    if np.any(dom.psi(x) <= kappa):
        raise ValueError("x0 must lie in {psi > kappa}")
    gens = [path_rng(cfg.seed, i, 0) for i in path_idx]
    gens_t = [path_rng(cfg.seed, i, 1) for i in path_idx] if cfg.delta else None
    m = 2 * d if cfg.delta else d
    horizons = np.sort(np.asarray(horizons, dtype=float))
    t_max = 50 * dom.sup_psi
    max_steps = max_steps or 20 * cfg.max_steps

    zeta = np.zeros(n)
    xd1 = np.zeros(n)
    xd3 = np.zeros(n)
    t = np.zeros(n)
    sup2 = np.einsum("ni,ni->n", xi, xi)
    energy = np.zeros(n)
    boundary = dom.psi(x) <= lam**2
    censored = np.zeros(n, dtype=bool)
    done = np.zeros(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    tau = np.full(n, np.nan)
    nxt = np.zeros(n, dtype=np.int64)  # next checkpoint index
    chk = np.full((n, horizons.size), np.nan)
    state = pol.start(x)
    states = [] if record else None
    dW_rec = []

    alive = np.arange(n)
    ax, axi = x, xi
    buf = None
    for k in range(max_steps):
        if alive.size == 0:
            break
        j = k % 64
        if j == 0:
            buf = np.empty((alive.size, 64, m))
            for s_, i in enumerate(alive):
                gens[i].standard_normal((64, d), out=buf[s_, :, :d])
                if cfg.delta:
                    gens_t[i].standard_normal((64, d), out=buf[s_, :, d:])
            slot = np.arange(alive.size)
        z = buf[slot, j]
        sig, state = pol.step(ax, state)
        if cfg.delta:
            sig = np.concatenate([sig, np.broadcast_to(cfg.delta * np.eye(d), sig.shape[:1] + (d, d))], axis=2)
        psi = dom.psi(ax)
        bnd = _switch(boundary[alive], psi, lam)
        boundary[alive] = bnd
        r = np.empty(alive.size)
        P = np.zeros((alive.size, d, d))
        pi = np.empty((alive.size, m))
        if np.any(bnd):
            _, r[bnd], P[bnd], pi[bnd] = boundary_aux_batch(dom, params, ax[bnd], axi[bnd], sig[bnd])
        inn = ~bnd
        if np.any(inn):
            _, r[inn], P[inn], pi[inn] = interior_aux_batch(dom, params, ax[inn], axi[inn], sig[inn])

        ta = t[alive]
        dt = np.minimum(cfg.dt, params.dt_rel * psi**2)
        has_h = nxt[alive] < horizons.size
        if horizons.size:
            gap = np.where(has_h, horizons[np.minimum(nxt[alive], horizons.size - 1)] - ta, np.inf)
            dt = np.minimum(dt, np.maximum(gap, 1e-15))
        sq = np.sqrt(dt)
        dw = sq[:, None] * z
        if record:
            dW_rec.append(dw[0].copy())

        f_x = cfg.f(ax)
        grad_f = _f_gradient(cfg.f, ax)
        phi = cfg.c * ta
        disc = np.exp(-phi)
        gx = dom.grad(ax)
        psi_xi = np.einsum("ni,ni->n", gx, axi)
        energy[alive] += (np.einsum("ni,ni->n", axi, axi) + (psi_xi / psi) ** 2) * dt
        xd3[alive] += disc * (np.einsum("ni,ni->n", grad_f, axi) + (2 * r - xd1[alive] + zeta[alive]) * f_x) * dt
        xd1[alive] += 2 * r * cfg.c * dt

        sdw = np.einsum("nik,nk->ni", sig, dw)
        x_new = ax + sdw
        xi_new = axi + r[:, None] * sdw + np.einsum("nij,nj->ni", P, sdw) - np.einsum("nik,nk->ni", sig, pi) * dt[:, None]
        zeta[alive] += np.einsum("nk,nk->n", pi, dw)
        t_new = ta + dt
        p_new = dom.psi(x_new)

        # exit from {psi > kappa}: interpolate back to psi = kappa
        out = p_new <= kappa
        if np.any(out):
            s = (psi[out] - kappa) / (psi[out] - p_new[out])
            x_new[out] = ax[out] + s[:, None] * (x_new[out] - ax[out])
            xi_new[out] = axi[out] + s[:, None] * (xi_new[out] - axi[out])
            t_new[out] = ta[out] + s * dt[out]
        t[alive] = t_new
        nx2 = np.einsum("ni,ni->n", xi_new, xi_new)
        sup2[alive] = np.maximum(sup2[alive], nx2)
        bad = ~np.isfinite(nx2) | (nx2 > CENSOR_LEVEL**2)
        if record:
            states.append(QuasiState(x_new[0].copy(), xi_new[0].copy(), float(zeta[alive[0]]),
                                     BOUNDARY if bnd[0] else INTERIOR, float(xd1[alive[0]]),
                                     float(xd3[alive[0]]), float(t_new[0]), cfg.c * float(t_new[0])))
        # checkpoints reached this step
        if horizons.size:
            reached = has_h & (t_new >= horizons[np.minimum(nxt[alive], horizons.size - 1)] - 1e-14) & ~out
            if np.any(reached):
                ids = alive[reached]
                chk[ids, nxt[ids]] = barrier_lower(dom, params, x_new[reached], xi_new[reached])
                nxt[ids] += 1
        timeout = t_new >= t_max
        stop = out | bad | timeout
        if np.any(stop):
            ids = alive[stop]
            tau[alive[out]] = t_new[out]
            censored[alive[bad & ~out]] = True
            hit[alive[timeout & ~out & ~bad]] = True
            if horizons.size:
                ex = alive[out & ~bad]
                if ex.size:
                    bl = barrier_lower(dom, params, x_new[out & ~bad], xi_new[out & ~bad])
                    for h in range(horizons.size):
                        pending = nxt[ex] <= h
                        chk[ex[pending], h] = bl[pending]
            x[ids] = x_new[stop]
            xi[ids] = xi_new[stop]
            done[ids] = True
            keep = ~stop
            alive, slot = alive[keep], slot[keep]
            x_new, xi_new = x_new[keep], xi_new[keep]
            state = {kk: v[keep] for kk, v in state.items()}
        ax, axi = x_new, xi_new
    if alive.size:
        x[alive], xi[alive] = ax, axi
        hit[alive] = True
    res = QuasiBatch(x, xi, zeta, xd1, xd3, cfg.c * np.nan_to_num(tau, nan=0.0), tau, censored, hit, sup2,
                     energy, chk, states)
    if record:
        res.increments = np.array(dW_rec)
    return res


def simulate_quasi_system(cfg: GameConfig, pol, params: AuxParams, x0, xi0, path_index: int):
    """States of one path of the quasi system up to the exit from {psi > kappa}.

    Raises Blowup if |xi| exceeds the censoring level and
    StepLimitExceeded if the path does not exit.
    """
    x0 = np.asarray(x0, dtype=float)
    res = _run_quasi(cfg, pol, params, x0[None], np.asarray(xi0, dtype=float)[None], [path_index],
                     record=True)
    first = QuasiState(x0.copy(), np.asarray(xi0, dtype=float).copy(), 0.0,
                       initial_regime(cfg.domain, params, x0))
    states = [first] + res.states
    if res.censored[0]:
        raise Blowup(f"|xi| exceeded {CENSOR_LEVEL:g}")
    if res.hit_limit[0]:
        raise StepLimitExceeded("quasi system did not reach psi = kappa", record=states)
    return states


# -- estimates ------------------------------------------------------------------

def _mean_se(v):
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class SupermartingaleReport:
    passed: bool
    bound: float  # 2 * B_upper(x0, xi0)
    horizons: np.ndarray
    b_lower_mean: np.ndarray
    b_lower_stderr: np.ndarray
    sup_xi2_mean: float
    sup_xi2_stderr: float
    energy_mean: float
    energy_stderr: float
    stable: bool
    censored_fraction: float
    step_limit_hits: int
    n_paths: int


def check_supermartingale(cfg: GameConfig, pol, params: AuxParams, x0, xi0, n_paths: int,
                          horizon=None) -> SupermartingaleReport:
    """Monte Carlo check of E B_lower(x_gamma, xi_gamma) <= 2 B_upper(x0, xi0)
    at gamma = min(t_i, tau_kappa) for a grid of times t_i.

    ``horizon`` is either the grid of t_i or a single final time (split into
    eight equal steps); by default the grid reaches the mean-exit-time bound.
    Also reported: E sup|xi|^2 and E int (|xi|^2 + psi_(xi)^2/psi^2) dt, with
    a stability flag comparing the first half of the paths to all of them
    (agreement within 3 stderr or 20 percent).
    """
    dom = cfg.domain
    x0 = np.asarray(x0, dtype=float)
    xi0 = np.asarray(xi0, dtype=float)
    if horizon is None:
        horizon = 2 * float(dom.psi(x0))
    hs = np.atleast_1d(np.asarray(horizon, dtype=float))
    if hs.size == 1:
        hs = hs[0] * np.arange(1, 9) / 8
    bound = 2 * float(barrier_upper(dom, params, x0[None], xi0[None])[0])
    res = _run_quasi(cfg, pol, params, x0[None], xi0[None], np.arange(n_paths), horizons=hs)
    ok = ~res.censored & ~res.hit_limit
    means, ses = [], []
    for h in range(hs.size):
        m, se = _mean_se(res.checkpoints[ok, h])
        means.append(m)
        ses.append(se)
    means, ses = np.array(means), np.array(ses)
    if bound == 0:
        passed = bool(np.all(np.nan_to_num(means) <= 0))
    else:
        rel = np.where(means > 0, np.nan_to_num(ses) / np.where(means > 0, means, 1), 0)
        passed = bool(np.all(means <= bound * (1 + 3 * rel)))
    s_m, s_se = _mean_se(res.sup_xi2[ok])
    e_m, e_se = _mean_se(res.energy[ok])
    half = ok.copy()
    half[n_paths // 2:] = False
    stable = True
    for v, m_all in ((res.sup_xi2, s_m), (res.energy, e_m)):
        m_h, se_h = _mean_se(v[half])
        if not (np.isfinite(m_all) and np.isfinite(m_h)):
            stable = False
        elif abs(m_h - m_all) > max(3 * se_h, STABILITY_REL * abs(m_all)):
            stable = False
    return SupermartingaleReport(
        passed=passed and stable, bound=bound, horizons=hs, b_lower_mean=means, b_lower_stderr=ses,
        sup_xi2_mean=s_m, sup_xi2_stderr=s_se, energy_mean=e_m, energy_stderr=e_se, stable=stable,
        censored_fraction=float(res.censored.mean()), step_limit_hits=int(res.hit_limit.sum()),
        n_paths=n_paths,
    )


@dataclass
class DerivativeEstimate:
    mean: float
    stderr: float
    n_paths: int
    censored_fraction: float
    step_limit_hits: int
    samples: np.ndarray = field(default=None, repr=False)


def estimate_directional_derivative(cfg: GameConfig, solver_field, pol, params: AuxParams, x0, xi0,
                                    n_paths: int, grad_step=None) -> DerivativeEstimate:
    """Mean of e^{-phi} (grad u . xi) + e^{-phi} (zeta - xi^{d+1}) u + xi^{d+3}
    at the exit from {psi > kappa}, with u the interpolated solver field."""
    x0 = np.asarray(x0, dtype=float)
    xi0 = np.asarray(xi0, dtype=float)
    if not np.any(xi0):
        return DerivativeEstimate(0.0, 0.0, n_paths, 0.0, 0, np.zeros(n_paths))
    res = _run_quasi(cfg, pol, params, x0[None], xi0[None], np.arange(n_paths))
    ok = ~res.censored & ~res.hit_limit
    xe = res.x[ok]
    u = solver_field.interpolate(xe)
    gu = solver_field.gradient(xe, grad_step)
    disc = np.exp(-res.phi[ok])
    v = disc * np.einsum("ni,ni->n", gu, res.xi[ok]) + disc * (res.zeta[ok] - res.xi_d1[ok]) * u + res.xi_d3[ok]
    m, se = _mean_se(v)
    return DerivativeEstimate(m, se, n_paths, float(res.censored.mean()), int(res.hit_limit.sum()), v)


def centered_difference(solver_field, x0, xi0, eps=1e-2):
    x0 = np.asarray(x0, dtype=float)
    xi0 = np.asarray(xi0, dtype=float)
    return float((solver_field.interpolate(x0 + eps * xi0) - solver_field.interpolate(x0 - eps * xi0)) / (2 * eps))


@dataclass
class GradientBoundReport:
    fitted_N: float
    argmax_x: np.ndarray
    argmax_xi: np.ndarray
    n_points: int
    fitted_N_refined: float = float("nan")
    relative_change: float = float("nan")


def _fitted_N(solver_field, domain, params):
    grid = solver_field.grid
    pts = grid.points[domain.psi(grid.points) > params.kappa]
    if pts.size == 0:
        return 0.0, None, None, 0
    d = domain.dim
    gu = solver_field.gradient(pts, grid.h)
    psi = domain.psi(pts)
    gx = domain.grad(pts)
    gn = np.linalg.norm(gx, axis=1)
    dirs = [np.broadcast_to(e, pts.shape) for e in np.eye(d)]
    with np.errstate(invalid="ignore", divide="ignore"):
        normal = np.where(gn[:, None] > 1e-12, gx / np.where(gn > 1e-12, gn, 1)[:, None], 0.0)
        tang = np.zeros_like(pts)
        tang[:, 0], tang[:, 1] = -normal[:, 1], normal[:, 0]
        tn = np.linalg.norm(tang, axis=1)
        tang = np.where(tn[:, None] > 1e-12, tang / np.where(tn > 1e-12, tn, 1)[:, None], 0.0)
    dirs += [normal, tang]
    best, arg = 0.0, (None, None)
    for v in dirs:
        vn = np.linalg.norm(v, axis=1)
        num = np.abs(np.einsum("ni,ni->n", gu, v))
        den = vn + np.abs(np.einsum("ni,ni->n", gx, v)) / np.sqrt(psi)
        ratio = np.where(den > 0, num / np.where(den > 0, den, 1), 0.0)
        i = int(np.argmax(ratio))
        if ratio[i] > best:
            best, arg = float(ratio[i]), (pts[i], v[i])
    return best, arg[0], arg[1], len(pts)


def gradient_bound_check(solver_field, domain: BarrierDomain, params: AuxParams, refine: bool = False,
                         **solve_kw) -> GradientBoundReport:
    """fitted_N = max |D_xi u| / (|xi| + |psi_(xi)| psi^{-1/2}) over grid points
    with psi > kappa and xi in {e_i, unit normal, one tangent}.

    With ``refine`` the problem is re-solved on the grid with half the spacing
    and the relative change of fitted_N is reported.
    """
    n_val, x_arg, xi_arg, n_pts = _fitted_N(solver_field, domain, params)
    rep = GradientBoundReport(n_val, x_arg, xi_arg, n_pts)
    if refine:
        from .solver import Grid, policy_iteration

        st = solver_field.settings
        kw = {"tol": st.get("tol", 1e-6), "max_iter": st.get("max_iter", 30), "ghost": st.get("ghost", "project"),
              "control_sets": st.get("control_sets"), "c": st.get("c", 0.0), "u0": None}
        kw.update(solve_kw)
        fine = policy_iteration(solver_field.spec, Grid.build(domain, solver_field.grid.h / 2),
                                solver_field.f, solver_field.g, delta=solver_field.delta, **kw)
        n_fine = _fitted_N(fine, domain, params)[0]
        rep.fitted_N_refined = n_fine
        rep.relative_change = abs(n_fine - n_val) / max(abs(n_val), 1e-300)
    return rep


CSV_COLUMNS = ("estimate", "stderr", "censored_fraction", "bound", "pass")


def write_quasi_csv(path, rows):
    """``rows``: sequence of (x0, xi0, estimate, stderr, censored_fraction, bound, passed)."""
    rows = list(rows)
    d = len(rows[0][0]) if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(d)] + [f"xi{i + 1}" for i in range(d)] + list(CSV_COLUMNS))
        for x0, xi0, est, se, cens, bound, ok in rows:
            w.writerow([f"{c:.10g}" for c in x0] + [f"{c:.10g}" for c in xi0] + [
                f"{est:.10g}", f"{se:.6g}", f"{cens:.6g}", f"{bound:.10g}", "pass" if ok else "fail"])

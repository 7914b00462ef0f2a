"""
Command line entry point: ``python -m hessgame <subcommand> --config FILE``.

Subcommands
    solve      policy iteration (with delta continuation when several deltas
               are given) and the residual of the discrete Isaacs system
    simulate   Monte Carlo values and exit-time moments at the configured points
    verify     assumption checkers, saddle certificates, invariance and the
               barrier supermartingale estimate
    gradient   fitted gradient bound and quasiderivative estimates against
               finite differences of the solver field
    report     all of the above, aggregated into one table

Exit codes: 0 when every check passes, 1 when a numerical check fails (the
report is still written), 2 for configuration or usage errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import linalg
from .config import ExperimentConfig, load_config
from .domain import check_geometry_assumption, check_invariance_assumption
from .errors import ConfigError, HessGameError
from .game import (
    ConstantPolicy,
    GameConfig,
    estimate_value,
    moments_from_taus,
    spectral_feedback_policy,
    write_value_csv,
)
from .operators import FiniteControlSet, operator_eval_stack, optimal_controls, saddle_gap
from .quasideriv import (
    barrier_drift_scan,
    centered_difference,
    check_supermartingale,
    estimate_directional_derivative,
    gradient_bound_check,
    write_quasi_csv,
)
from .solver import Grid, delta_continuation, policy_iteration, residual_report

log = logging.getLogger("hessgame")

SUBCOMMANDS = ("solve", "simulate", "verify", "gradient", "report")

# descriptive tags for the statement each check exercises
TAG_REPRESENTATION = "eigenvalue-sum inf-sup representation"
TAG_GEOMETRY = "barrier supersolution assumption"
TAG_INVARIANCE = "orthogonal invariance assumption"
TAG_MOMENTS = "exit-time moment bound"
TAG_VALUE = "game value = viscosity solution"
TAG_RESIDUAL = "discrete Isaacs residual"
TAG_DELTA = "vanishing-regularization limit"
TAG_BARRIER = "barrier supermartingale estimate"
TAG_DRIFT = "barrier generator sign"
TAG_GRADIENT = "boundary-weighted Lipschitz bound"
TAG_DERIVATIVE = "quasiderivative representation of u_(xi)"


@dataclass
class Row:
    status: str  # PASS, FAIL or INFO
    anchor: str
    check: str
    value: str
    threshold: str


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, (float, np.floating)) else str(v)


class Run:
    """Shared state of one CLI invocation; the solved field is cached."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str, threads: int):
        self.cfg = cfg
        self.out = out_dir
        self.threads = threads
        self.rows: list[Row] = []
        self._field = None

    def add(self, ok, anchor, check, value, threshold):
        status = "INFO" if ok is None else ("PASS" if ok else "FAIL")
        self.rows.append(Row(status, anchor, check, _fmt(value), _fmt(threshold)))
        log.info("%s  %s: %s = %s (%s)", status, anchor, check, _fmt(value), _fmt(threshold))

    def path(self, name):
        return os.path.join(self.out, name)

    # -- shared pieces ---------------------------------------------------------

    def controls(self):
        s = self.cfg.solver
        return FiniteControlSet.build(self.cfg.spec, n_haar=s.n_haar, seed=self.cfg.mc.seed)

    def solve_kwargs(self):
        s = self.cfg.solver
        return dict(tol=s.tol, max_iter=s.max_iter, ghost=s.ghost, control_sets=self.controls(),
                    bank_size=s.bank_size, c=self.cfg.c)

    def grid(self):
        return Grid.build(self.cfg.domain, self.cfg.solver.h, self.cfg.solver.stencil_factor)

    def field(self):
        if self._field is None:
            cfg = self.cfg
            self._field = policy_iteration(cfg.spec, self.grid(), cfg.f, cfg.g, delta=cfg.solver.deltas[-1],
                                           **self.solve_kwargs())
        return self._field

    def game_config(self, dt=None):
        cfg, mc = self.cfg, self.cfg.mc
        return GameConfig(cfg.domain, cfg.spec, cfg.f, cfg.g, c=cfg.c, delta=mc.delta, dt=dt or mc.dt,
                          seed=mc.seed, exit_mode=mc.exit_mode, batch_size=mc.batch_size, threads=self.threads)

    def constant_policy(self):
        pair = optimal_controls(self.cfg.spec, self.cfg.domain.hess())
        return ConstantPolicy(self.cfg.spec, pair)

    def policy(self):
        if self.cfg.mc.policy == "constant":
            return self.constant_policy()
        fld = self.field()
        return spectral_feedback_policy(fld, self.cfg.mc.fd_step or fld.grid.h)


# -- subcommands ---------------------------------------------------------------

def do_solve(run: Run):
    cfg = run.cfg
    deltas = cfg.solver.deltas
    if len(deltas) > 1:
        cont = delta_continuation(cfg.spec, run.grid(), cfg.f, cfg.g, deltas, **run.solve_kwargs())
        run._field = cont.fields[-1]
        gaps = cont.gaps
        ok = all(b <= 1.1 * a + 1e-12 for a, b in zip(gaps, gaps[1:]))
        run.add(ok, TAG_DELTA, "sup-norm gaps non-increasing along delta (10% slack)",
                " ".join(f"{g:.4g}" for g in gaps), "monotone")
        with open(run.path("continuation.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delta", "gap", "residual", "iterations"])
            for dl, gap, fl in zip(deltas, gaps, cont.fields):
                w.writerow([f"{dl:.10g}", f"{gap:.10g}", f"{fl.residual:.6g}", fl.iterations])
    fld = run.field()
    rep = residual_report(fld)
    run.add(fld.converged, TAG_RESIDUAL, "max |inf sup [L u + f - c u]| over nodes", rep.max_residual,
            f"<= {cfg.solver.tol:g}")
    fld.to_csv(run.path("field.csv"))
    with open(run.path("diagnostics.txt"), "w") as fh:
        fh.write(fld.diagnostics_text() + "\n")


def do_simulate(run: Run):
    cfg = run.cfg
    gcfg = run.game_config()
    pol = run.policy()
    rows = []
    moment_rows = []
    fld = run.field() if cfg.mc.policy == "feedback" else None
    for x0 in cfg.mc.points:
        est = estimate_value(gcfg, pol, x0, cfg.mc.n_paths)
        rows.append((x0, est))
        moms = moments_from_taus(cfg.domain, x0, est.taus, n_max=2)
        for m in moms:
            moment_rows.append((x0, m))
            run.add(m.within_bound, TAG_MOMENTS, f"E tau^{m.order} at {np.round(x0, 4).tolist()}",
                    f"{m.mean:.5g} +- {m.stderr:.2g}", f"<= {m.bound:.5g} + 3 se")
        if est.step_limit_hits:
            run.add(False, TAG_MOMENTS, f"paths hitting the step limit at {np.round(x0, 4).tolist()}",
                    est.step_limit_hits, "0")
        if fld is not None:
            u = float(fld.interpolate(x0))
            tol = max(3 * est.stderr, 5e-2)
            run.add(abs(est.mean - u) <= tol, TAG_VALUE,
                    f"|MC - solver| at {np.round(x0, 4).tolist()}", abs(est.mean - u), f"<= {tol:.4g}")
    write_value_csv(run.path("simulate.csv"), gcfg, rows)
    with open(run.path("moments.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        d = cfg.domain.dim
        w.writerow([f"x{i + 1}" for i in range(d)] + ["order", "mean", "stderr", "bound", "pass"])
        for x0, m in moment_rows:
            w.writerow([f"{c:.10g}" for c in x0] + [m.order, f"{m.mean:.10g}", f"{m.stderr:.6g}",
                                                     f"{m.bound:.10g}", "pass" if m.within_bound else "fail"])


def do_verify(run: Run):
    cfg = run.cfg
    spec, dom = cfg.spec, cfg.domain
    rng = np.random.default_rng(cfg.mc.seed)

    # eigenvalue sums and saddle certificates on random matrices
    n_mat = 100
    mats = rng.standard_normal((n_mat, spec.dim, spec.dim))
    mats = mats + np.swapaxes(mats, 1, 2)
    w = np.linalg.eigvalsh(mats)
    if spec.kind == "sum_extremes":
        ref = w[:, :spec.k1].sum(1) + w[:, spec.dim - spec.k2:].sum(1)
    else:
        ref = w[:, spec.k:spec.k + spec.j].sum(1)
    err = float(np.max(np.abs(operator_eval_stack(spec, mats) - ref)))
    run.add(err <= 1e-9, TAG_REPRESENTATION, "max |H(gamma) - eigenvalue sum|", err, "<= 1e-9")
    worst_b, worst_a = np.inf, -np.inf
    for m in mats[:20]:
        bg, ag = saddle_gap(spec, linalg.SymMatrix(m), 50, rng)
        worst_b, worst_a = min(worst_b, bg), max(worst_a, ag)
    run.add(worst_b >= -1e-9 and worst_a <= 1e-9, TAG_REPRESENTATION,
            "sampled deviations beat the spectral pair by", max(-worst_b, worst_a), "<= 1e-9")

    geo = check_geometry_assumption(dom, spec, 200, 50, rng)
    witness = ""
    if not geo.passed and geo.witness_pair is not None:
        witness = (f" witness x={np.round(geo.witness_x, 4).tolist()}"
                   f" alpha={np.round(geo.witness_pair.alpha.basis, 4).tolist()}"
                   f" beta={np.round(geo.witness_pair.beta.basis, 4).tolist()}")
    run.add(geo.passed, TAG_GEOMETRY, "max tr(a psi_xx) + 1" + witness, geo.max_violation, "<= 0")
    inv = check_invariance_assumption(spec, 100, rng)
    run.add(inv.passed, TAG_INVARIANCE, "max |H(q^T gamma q) - H(gamma)|", inv.max_residual, "<= 1e-8")

    params = cfg.aux_params()
    pol = run.constant_policy()
    scan = barrier_drift_scan(dom, params, pol._sigma, 500, rng)
    run.add(None, TAG_DRIFT, "max L B1 / B1 and max L B2 / B2 (constant pair)",
            f"{scan.worst_b1:.4g} {scan.worst_b2:.4g}", "<= 0 for a true supermartingale")
    gcfg = replace(run.game_config(cfg.quasi.dt), delta=0.0)
    for x0 in cfg.mc.points:
        for xi0 in cfg.quasi.directions:
            rep = check_supermartingale(gcfg, pol, params, x0, xi0, cfg.quasi.n_paths, cfg.quasi.horizon)
            ok = rep.passed and rep.censored_fraction < 0.01
            run.add(ok, TAG_BARRIER, f"max_t E B_lower at x0={np.round(x0, 4).tolist()} xi0={np.round(xi0, 4).tolist()}",
                    f"{np.nanmax(rep.b_lower_mean):.5g} (censored {rep.censored_fraction:.3g}, stable {rep.stable})",
                    f"<= 2 B_upper = {rep.bound:.5g}")


def do_gradient(run: Run):
    cfg = run.cfg
    fld = run.field()
    params = cfg.aux_params()
    rep = gradient_bound_check(fld, cfg.domain, params, refine=cfg.solver.refine)
    ok = bool(np.isfinite(rep.fitted_N))
    thr = "finite"
    if cfg.solver.refine:
        ok = ok and rep.relative_change <= 0.15
        thr = "finite, change under refinement <= 0.15"
    run.add(ok, TAG_GRADIENT, "fitted N (refined, relative change)",
            f"{rep.fitted_N:.5g} ({rep.fitted_N_refined:.5g}, {rep.relative_change:.3g})", thr)
    gcfg = replace(run.game_config(cfg.quasi.dt), delta=0.0)
    pol = run.policy()
    out = []
    for x0 in cfg.mc.points:
        for xi0 in cfg.quasi.directions:
            est = estimate_directional_derivative(gcfg, fld, pol, params, x0, xi0, cfg.quasi.n_paths)
            fd = centered_difference(fld, x0, xi0)
            tol = max(3 * est.stderr, 5e-2)
            ok = abs(est.mean - fd) <= tol and est.censored_fraction < 0.01
            out.append((x0, xi0, est.mean, est.stderr, est.censored_fraction, fd, ok))
            run.add(ok, TAG_DERIVATIVE, f"|estimate - centred difference| at x0={np.round(x0, 4).tolist()} "
                    f"xi0={np.round(xi0, 4).tolist()}", abs(est.mean - fd), f"<= {tol:.4g}")
    write_quasi_csv(run.path("gradient.csv"), out)


STAGES = {"solve": do_solve, "simulate": do_simulate, "verify": do_verify, "gradient": do_gradient}


def write_report(path, rows, title):
    width = max([len(r.anchor) for r in rows] + [6])
    with open(path, "w") as fh:
        fh.write(f"# {title}\n")
        fh.write(f"{'status':<6}  {'anchor':<{width}}  check | value | threshold\n")
        for r in rows:
            fh.write(f"{r.status:<6}  {r.anchor:<{width}}  {r.check} | {r.value} | {r.threshold}\n")
        n_fail = sum(r.status == "FAIL" for r in rows)
        fh.write(f"# {len(rows)} rows, {n_fail} failed\n")


def build_parser():
    p = argparse.ArgumentParser(prog="hessgame", description="Eigenvalue-sum Hessian equations as differential games.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="INI experiment file")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="overrides [mc] seed")
    p.add_argument("--threads", type=int, default=1, help="Monte Carlo worker threads (results do not depend on it)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(subcommand, config_path, out_dir, seed=None, threads=1) -> int:
    try:
        cfg = load_config(config_path)
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        if seed is not None:
            cfg.mc.seed = seed
        os.makedirs(out_dir, exist_ok=True)
        if not os.access(out_dir, os.W_OK):
            raise ConfigError(f"{out_dir} is not writable")
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    r = Run(cfg, out_dir, threads)
    stages = list(STAGES) if subcommand == "report" else [subcommand]
    stages = [s for s in ("verify", "solve", "simulate", "gradient") if s in stages]
    for name in stages:
        t0 = time.perf_counter()
        try:
            STAGES[name](r)
        except HessGameError as exc:
            r.add(False, name, f"{type(exc).__name__}", str(exc), "no error")
        log.info("%s finished in %.1f s", name, time.perf_counter() - t0)
    write_report(r.path("report.txt"), r.rows, f"hessgame {subcommand} ({config_path})")
    n_fail = sum(row.status == "FAIL" for row in r.rows)
    print(f"{subcommand}: {len(r.rows)} checks, {n_fail} failed; report in {r.path('report.txt')}")
    return 1 if n_fail else 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return run(args.subcommand, args.config, args.out, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())

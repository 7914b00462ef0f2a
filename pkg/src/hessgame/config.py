"""
Experiment configuration: an INI file with sections [domain], [operator],
[data], [solver], [mc] and [quasi]. Every key is optional except the domain
dimension; unknown sections and keys are rejected.

Data functions are written as ``<kind> <arguments>``::

    f = constant 0
    g = harmonic_quadratic 1.0
    g = linear 1,0,0 0.5          # coefficients, optional offset
    g = polynomial 1:2,0,0; -1:0,0,2

Point lists separate points by ``;`` and coordinates by ``,``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from . import fields
from .domain import BarrierDomain, RegionParams
from .errors import ConfigError
from .operators import OperatorSpec

SCHEMA = {
    "domain": {"kind", "dim", "semi_axes"},
    "operator": {"kind", "k1", "k2", "k", "j", "degenerate_ok"},
    "data": {"f", "g", "c"},
    "solver": {"h", "tol", "max_iter", "deltas", "n_haar", "ghost", "stencil_factor", "bank_size", "refine"},
    "mc": {"dt", "n_paths", "seed", "points", "policy", "exit_mode", "delta", "batch_size", "fd_step"},
    "quasi": {"lam", "kappa", "theta_b2", "K1", "eps", "n_paths", "dt", "dt_rel", "directions", "horizon"},
}


@dataclass
class SolverSettings:
    h: float = 1.0 / 16
    tol: float = 1e-6
    max_iter: int = 40
    deltas: tuple = (0.0,)
    n_haar: int = 16
    ghost: str = "project"
    stencil_factor: float = 1.0
    bank_size: int = 16
    refine: bool = False


@dataclass
class MCSettings:
    dt: float = 1e-3
    n_paths: int = 10000
    seed: int = 0
    points: np.ndarray = None
    policy: str = "feedback"
    exit_mode: str = "shift"
    delta: float = 0.0
    batch_size: int = 100000
    fd_step: float = None


@dataclass
class QuasiSettings:
    lam: float = 0.5
    kappa: float = 1e-3
    theta_b2: float = 1.0 / 6.0
    K1: float = 1.0
    eps: tuple = (0.0, 0.1, 0.5)
    n_paths: int = 4000
    dt: float = 1e-3
    dt_rel: float = 0.01
    directions: np.ndarray = None
    horizon: float = None


@dataclass
class ExperimentConfig:
    domain: BarrierDomain
    spec: OperatorSpec
    f: fields.Polynomial
    g: fields.Polynomial
    c: float = 0.0
    solver: SolverSettings = field(default_factory=SolverSettings)
    mc: MCSettings = field(default_factory=MCSettings)
    quasi: QuasiSettings = field(default_factory=QuasiSettings)

    def aux_params(self):
        from .quasideriv import AuxParams

        q = self.quasi
        return AuxParams(lam=q.lam, theta_b2=q.theta_b2, K1=q.K1, kappa=q.kappa, dt_rel=q.dt_rel)


def parse_points(text, dim):
    pts = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if chunk:
            pts.append([float(v) for v in chunk.split(",")])
    arr = np.array(pts, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ConfigError(f"points must have {dim} coordinates each: {text!r}")
    return arr


def _floats(text):
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def parse_data(text, dim):
    kind, _, rest = text.strip().partition(" ")
    rest = rest.strip()
    if kind == "constant":
        return fields.constant(dim, float(rest or 0.0))
    if kind == "harmonic_quadratic":
        if dim < 2:
            raise ConfigError("harmonic_quadratic needs dim >= 2")
        return fields.harmonic_quadratic(dim, float(rest or 1.0))
    if kind == "linear":
        parts = rest.split()
        if not parts:
            raise ConfigError("linear needs coefficients")
        offset = float(parts[1]) if len(parts) > 1 else 0.0
        return fields.linear(dim, _floats(parts[0]), offset)
    if kind == "polynomial":
        return fields.parse_polynomial(dim, rest)
    raise ConfigError(f"unknown data kind {kind!r}")


def _get(sec, key, conv, default):
    if sec is None or key not in sec:
        return default
    raw = sec[key]
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def from_parser(cp: configparser.ConfigParser) -> ExperimentConfig:
    for name in cp.sections():
        if name not in SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        extra = set(cp[name]) - SCHEMA[name]
        if extra:
            raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(extra))}")
    if "domain" not in cp or "dim" not in cp["domain"]:
        raise ConfigError("[domain] dim is required")
    sec = cp["domain"]
    try:
        dim = _get(sec, "dim", int, None)
        kind = _get(sec, "kind", str.strip, "ball")
        if kind == "ball":
            domain = BarrierDomain.unit_ball(dim)
        elif kind == "ellipsoid":
            axes = _get(sec, "semi_axes", _floats, None)
            if axes is None or len(axes) != dim:
                raise ConfigError("ellipsoid needs one semi-axis per dimension")
            domain = BarrierDomain.ellipsoid(axes)
        else:
            raise ConfigError(f"unknown domain kind {kind!r}")

        sec = cp["operator"] if "operator" in cp else None
        okind = _get(sec, "kind", str.strip, "sum_extremes")
        if okind == "sum_extremes":
            spec = OperatorSpec.sum_extremes(dim, _get(sec, "k1", int, 1), _get(sec, "k2", int, 1))
        elif okind == "middle_sum":
            spec = OperatorSpec.middle_sum(dim, _get(sec, "k", int, 1), _get(sec, "j", int, 1),
                                           degenerate_ok=_get(sec, "degenerate_ok", _bool, False))
        else:
            raise ConfigError(f"unknown operator kind {okind!r}")

        sec = cp["data"] if "data" in cp else None
        f = parse_data(_get(sec, "f", str, "constant 0"), dim)
        g = parse_data(_get(sec, "g", str, "constant 0"), dim)
        c = _get(sec, "c", float, 0.0)
        if c < 0:
            raise ConfigError("c must be >= 0")

        sec = cp["solver"] if "solver" in cp else None
        d0 = SolverSettings()
        solver = SolverSettings(
            h=_get(sec, "h", float, d0.h), tol=_get(sec, "tol", float, d0.tol),
            max_iter=_get(sec, "max_iter", int, d0.max_iter), deltas=_get(sec, "deltas", _floats, d0.deltas),
            n_haar=_get(sec, "n_haar", int, d0.n_haar), ghost=_get(sec, "ghost", str.strip, d0.ghost),
            stencil_factor=_get(sec, "stencil_factor", float, d0.stencil_factor),
            bank_size=_get(sec, "bank_size", int, d0.bank_size), refine=_get(sec, "refine", _bool, d0.refine),
        )
        if not 0 < solver.h < 1 or solver.tol <= 0 or solver.max_iter < 1 or solver.n_haar < 0:
            raise ConfigError("solver settings out of range")
        if solver.ghost not in ("project", "extend"):
            raise ConfigError("ghost must be project or extend")
        ds = solver.deltas
        if not ds or any(v < 0 for v in ds) or any(a < b for a, b in zip(ds, ds[1:])):
            raise ConfigError("deltas must be non-negative and non-increasing")

        sec = cp["mc"] if "mc" in cp else None
        m0 = MCSettings()
        center = np.zeros((1, dim))
        mc = MCSettings(
            dt=_get(sec, "dt", float, m0.dt), n_paths=_get(sec, "n_paths", int, m0.n_paths),
            seed=_get(sec, "seed", int, m0.seed),
            points=_get(sec, "points", lambda t: parse_points(t, dim), center),
            policy=_get(sec, "policy", str.strip, m0.policy), exit_mode=_get(sec, "exit_mode", str.strip, m0.exit_mode),
            delta=_get(sec, "delta", float, m0.delta), batch_size=_get(sec, "batch_size", int, m0.batch_size),
            fd_step=_get(sec, "fd_step", float, None),
        )
        if mc.dt <= 0 or mc.n_paths < 2 or mc.delta < 0 or mc.batch_size < 1:
            raise ConfigError("mc settings out of range")
        if mc.policy not in ("feedback", "constant"):
            raise ConfigError("policy must be feedback or constant")
        if mc.exit_mode not in ("shift", "interpolate"):
            raise ConfigError("exit_mode must be shift or interpolate")
        if np.any(domain.psi(mc.points) <= 0):
            raise ConfigError("mc points must lie inside the domain")

        sec = cp["quasi"] if "quasi" in cp else None
        q0 = QuasiSettings()
        quasi = QuasiSettings(
            lam=_get(sec, "lam", float, q0.lam), kappa=_get(sec, "kappa", float, q0.kappa),
            theta_b2=_get(sec, "theta_b2", float, q0.theta_b2), K1=_get(sec, "K1", float, q0.K1),
            eps=_get(sec, "eps", _floats, q0.eps), n_paths=_get(sec, "n_paths", int, q0.n_paths),
            dt=_get(sec, "dt", float, q0.dt), dt_rel=_get(sec, "dt_rel", float, q0.dt_rel),
            directions=_get(sec, "directions", lambda t: parse_points(t, dim), np.eye(dim)[:1]),
            horizon=_get(sec, "horizon", float, None),
        )
        if quasi.n_paths < 2 or quasi.dt <= 0:
            raise ConfigError("quasi settings out of range")
        RegionParams(kappa=quasi.kappa, lam=quasi.lam)
        cfg = ExperimentConfig(domain, spec, f, g, c, solver, mc, quasi)
        cfg.aux_params()
        if spec.dim != dim:
            raise ConfigError("operator and domain dimensions differ")
        if np.any(domain.psi(mc.points) <= quasi.kappa):
            raise ConfigError("mc points must satisfy psi > kappa")
        return cfg
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str  # keep K1 as written
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return from_parser(cp)


def loads_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return from_parser(cp)

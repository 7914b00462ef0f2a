"""
Eigenvalue-sum Hessian operators and their projection inf-sup forms.

Two families are covered:

* ``sum_extremes(k1, k2)``: sum of the k1 smallest plus the k2 largest
  eigenvalues, written as inf over rank-k1 projections beta and sup over
  rank-k2 projections alpha of tr((alpha + beta) gamma);
* ``middle_sum(k, j)``: lambda_{k+1} + ... + lambda_{k+j}, written as inf over
  rank-(k+j) projections beta of the sup over rank-j alpha of
  tr(beta alpha beta gamma).

The saddle controls are spectral projections of gamma.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import DimMismatch, NotOrthogonal, RankOutOfRange
from .linalg import Projection, SymMatrix


@dataclass(frozen=True)
class OperatorSpec:
    kind: str
    dim: int
    k1: int = 0
    k2: int = 0
    k: int = 0
    j: int = 0
    degenerate_ok: bool = False

    def __post_init__(self):
        d = self.dim
        if self.kind == "sum_extremes":
            if not (1 <= self.k1 <= d and 1 <= self.k2 <= d):
                raise RankOutOfRange(f"need 1 <= k1, k2 <= d, got {self.k1}, {self.k2}, d={d}")
        elif self.kind == "middle_sum":
            if not (0 < self.k and self.j >= 1 and self.k + self.j <= d):
                raise RankOutOfRange(f"need 0 < k < k+j <= d, got k={self.k}, j={self.j}, d={d}")
            if self.k + 2 * self.j <= d and not self.degenerate_ok:
                raise RankOutOfRange(
                    f"k + 2j = {self.k + 2 * self.j} <= d = {d}: set degenerate_ok to evaluate anyway"
                )
        else:
            raise ValueError(f"unknown operator kind {self.kind!r}")

    @classmethod
    def sum_extremes(cls, dim, k1, k2):
        return cls("sum_extremes", dim, k1=k1, k2=k2)

    @classmethod
    def middle_sum(cls, dim, k, j, degenerate_ok=False):
        return cls("middle_sum", dim, k=k, j=j, degenerate_ok=degenerate_ok)

    @property
    def alpha_rank(self):
        return self.k2 if self.kind == "sum_extremes" else self.j

    @property
    def beta_rank(self):
        return self.k1 if self.kind == "sum_extremes" else self.k + self.j

    @property
    def lipschitz(self):
        """Lipschitz constant of H in the spectral norm."""
        return self.k1 + self.k2 if self.kind == "sum_extremes" else self.j

    @property
    def is_laplacian(self):
        return self.kind == "sum_extremes" and self.k1 + self.k2 == self.dim


@dataclass(frozen=True)
class ControlPair:
    alpha: Projection  # maximizer
    beta: Projection  # minimizer


def _sym(gamma):
    return gamma if isinstance(gamma, SymMatrix) else SymMatrix(gamma)


def _check_rank(gamma, k):
    if not 1 <= k <= gamma.dim:
        raise RankOutOfRange(f"k={k} outside [1, {gamma.dim}]")


def sum_smallest(gamma, k: int) -> float:
    gamma = _sym(gamma)
    _check_rank(gamma, k)
    return float(np.sum(linalg.eig_sym(gamma).values[:k]))


def sum_largest(gamma, k: int) -> float:
    gamma = _sym(gamma)
    _check_rank(gamma, k)
    return float(np.sum(linalg.eig_sym(gamma).values[-k:]))


def middle_sum(gamma, k: int, j: int) -> float:
    """lambda_{k+1} + ... + lambda_{k+j} in ascending order."""
    gamma = _sym(gamma)
    if not (0 < k and j >= 1 and k + j <= gamma.dim):
        raise RankOutOfRange(f"need 0 < k < k+j <= d, got k={k}, j={j}")
    return float(np.sum(linalg.eig_sym(gamma).values[k:k + j]))


def _check_dim(spec, gamma):
    if gamma.dim != spec.dim:
        raise DimMismatch(f"operator is {spec.dim}-dimensional, matrix is {gamma.dim}x{gamma.dim}")


def operator_eval(spec: OperatorSpec, gamma) -> float:
    gamma = _sym(gamma)
    _check_dim(spec, gamma)
    w = linalg.eig_sym(gamma).values
    if spec.kind == "sum_extremes":
        return float(np.sum(w[:spec.k1]) + np.sum(w[spec.dim - spec.k2:]))
    return float(np.sum(w[spec.k:spec.k + spec.j]))


def operator_eval_stack(spec: OperatorSpec, gammas) -> np.ndarray:
    """operator_eval over a stack of symmetric matrices (..., d, d)."""
    w = np.linalg.eigvalsh(np.asarray(gammas, dtype=float))
    if spec.kind == "sum_extremes":
        return w[..., :spec.k1].sum(-1) + w[..., spec.dim - spec.k2:].sum(-1)
    return w[..., spec.k:spec.k + spec.j].sum(-1)


def spectral_frames(spec: OperatorSpec, vectors):
    """Saddle frames (alpha_basis, beta_basis) from ascending eigenvectors.

    ``vectors`` may be a single d x d matrix or a stack (..., d, d).
    """
    d = spec.dim
    if spec.kind == "sum_extremes":
        return vectors[..., :, d - spec.k2:], vectors[..., :, :spec.k1]
    return vectors[..., :, spec.k:spec.k + spec.j], vectors[..., :, :spec.k + spec.j]


def optimal_controls(spec: OperatorSpec, gamma) -> ControlPair:
    """Spectral saddle pair; tr over the pair reproduces operator_eval."""
    gamma = _sym(gamma)
    _check_dim(spec, gamma)
    v = linalg.eig_sym(gamma).vectors
    a, b = spectral_frames(spec, v)
    return ControlPair(alpha=Projection.from_basis(a), beta=Projection.from_basis(b))


def control_matrix(spec: OperatorSpec, pair: ControlPair) -> np.ndarray:
    """Diffusion matrix a = alpha + beta or beta alpha beta."""
    a, b = pair.alpha.matrix, pair.beta.matrix
    if spec.kind == "sum_extremes":
        m = a + b
    else:
        m = b @ a @ b
    return 0.5 * (m + m.T)


def control_factor(spec: OperatorSpec, pair: ControlPair) -> np.ndarray:
    """A d x m matrix s with s s^T = 2 a, built from the projection frames.

    This is not the symmetric root, but it drives the same generator and the
    columns are short and few (k1 + k2, or j), which is what the wide-stencil
    solver wants.
    """
    r2 = np.sqrt(2.0)
    if spec.kind == "sum_extremes":
        return r2 * np.concatenate([pair.alpha.basis, pair.beta.basis], axis=1)
    return r2 * (pair.beta.matrix @ pair.alpha.basis)


def control_value(spec: OperatorSpec, pair: ControlPair, gamma) -> float:
    """tr(a^{alpha beta} gamma)."""
    return float(np.sum(control_matrix(spec, pair) * np.asarray(_sym(gamma))))


def inner_sup(spec: OperatorSpec, beta: Projection, gamma) -> float:
    """Best response value sup_alpha tr(a^{alpha beta} gamma) for a fixed beta.

    For the middle-sum family alpha ranges over rank-j projections inside the
    range of beta (so beta alpha = alpha); over all of P_j the kernel of beta
    would contribute zero eigenvalues and the inf-sup would no longer equal
    the middle eigenvalue sum when those eigenvalues are negative.
    """
    g = np.asarray(_sym(gamma))
    if spec.kind == "sum_extremes":
        return float(np.sum(beta.matrix * g)) + float(np.sum(np.linalg.eigvalsh(g)[-spec.k2:]))
    fb = beta.basis
    ritz = np.linalg.eigvalsh(fb.T @ g @ fb)
    return float(np.sum(ritz[-spec.j:]))


def saddle_gap(spec: OperatorSpec, gamma, n_samples: int, rng):
    """One-sided saddle certificate against Haar-sampled deviations.

    Returns ``(beta_gap, alpha_gap)``:

    * ``beta_gap`` is the smallest, over sampled minimizer controls beta, of
      the best-response value minus H; it is >= -1e-9 when no sampled beta
      beats the spectral one;
    * ``alpha_gap`` is the largest, over sampled maximizer controls alpha
      played against the spectral beta, of tr(a gamma) minus H; it is
      <= 1e-9 when no sampled alpha beats the spectral one.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    gamma = _sym(gamma)
    _check_dim(spec, gamma)
    g = np.asarray(gamma)
    h = operator_eval(spec, gamma)
    star = optimal_controls(spec, gamma)
    d = spec.dim
    fb = linalg.haar_frames(d, spec.beta_rank, n_samples, rng)
    comp_b = np.swapaxes(fb, -1, -2) @ g @ fb
    if spec.kind == "sum_extremes":
        top = float(np.sum(np.linalg.eigvalsh(g)[-spec.k2:]))
        beta_vals = np.trace(comp_b, axis1=-2, axis2=-1) + top
        fa = linalg.haar_frames(d, spec.alpha_rank, n_samples, rng)
        sb = star.beta.basis
        alpha_vals = np.trace(np.swapaxes(fa, -1, -2) @ g @ fa, axis1=-2, axis2=-1) + np.trace(sb.T @ g @ sb)
    else:
        beta_vals = np.linalg.eigvalsh(comp_b)[:, -spec.j:].sum(-1)
        w = linalg.haar_frames(spec.beta_rank, spec.j, n_samples, rng)
        fa = star.beta.basis @ w  # alpha inside the range of the spectral beta, so beta alpha beta = alpha
        alpha_vals = np.trace(np.swapaxes(fa, -1, -2) @ g @ fa, axis1=-2, axis2=-1)
    return float(np.min(beta_vals) - h), float(np.max(alpha_vals) - h)


def check_orthogonal_invariance(spec: OperatorSpec, gamma, q) -> float:
    """|H(q^T gamma q) - H(gamma)|."""
    gamma = _sym(gamma)
    q = np.asarray(q, dtype=float)
    if q.shape != (gamma.dim, gamma.dim) or not linalg.is_orthogonal(q, 1e-10):
        raise NotOrthogonal("q is not orthogonal to 1e-10")
    g = np.asarray(gamma)
    return abs(operator_eval(spec, q.T @ g @ q) - operator_eval(spec, gamma))


def coordinate_frames(dim: int, rank: int, limit: int = 32) -> np.ndarray:
    """Frames spanned by coordinate axes, shape (n, d, rank); at most ``limit``."""
    out = []
    for idx in itertools.islice(itertools.combinations(range(dim), rank), limit):
        f = np.zeros((dim, rank))
        f[list(idx), range(rank)] = 1.0
        out.append(f)
    return np.array(out)


@dataclass(frozen=True)
class FiniteControlSet:
    """Node-independent candidate frames for both players.

    Solvers add node-dependent spectral candidates on top of these.
    ``alpha`` and ``beta`` have shape (n, d, rank). For the middle-sum family
    ``alpha`` holds (k+j) x j coefficient frames expressed in the basis of
    whichever beta frame they are combined with.
    """

    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def build(cls, spec: OperatorSpec, n_haar: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        d = spec.dim
        if spec.kind == "sum_extremes":
            alpha = [coordinate_frames(d, spec.k2)]
            beta = [coordinate_frames(d, spec.k1)]
            if n_haar:
                alpha.append(np.array([linalg.haar_frame(d, spec.k2, rng) for _ in range(n_haar)]))
                beta.append(np.array([linalg.haar_frame(d, spec.k1, rng) for _ in range(n_haar)]))
        else:
            kj = spec.k + spec.j
            beta = [coordinate_frames(d, kj)]
            alpha = [coordinate_frames(kj, spec.j)]
            n_inner = max(1, n_haar // 8)
            if n_haar:
                beta.append(np.array([linalg.haar_frame(d, kj, rng) for _ in range(n_haar)]))
                alpha.append(np.array([linalg.haar_frame(kj, spec.j, rng) for _ in range(n_inner)]))
        return cls(alpha=np.concatenate(alpha), beta=np.concatenate(beta))

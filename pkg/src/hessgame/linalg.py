"""
Small dense symmetric-matrix primitives.

Everything here works on d x d matrices with 2 <= d <= 8: symmetric
eigendecomposition with deterministic signs, PSD square roots, rank-k
orthogonal projections and exponentials of skew-symmetric matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DegenerateFrame, NonFinite, NotPSD, RankOutOfRange

MIN_DIM = 2
MAX_DIM = 8
PSD_CLAMP_TOL = 1e-10
FRAME_TOL = 1e-8


def _square(entries, name):
    a = np.array(entries, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {a.shape}")
    if not MIN_DIM <= a.shape[0] <= MAX_DIM:
        raise ValueError(f"{name} dimension {a.shape[0]} outside [{MIN_DIM}, {MAX_DIM}]")
    return a


class SymMatrix:
    """Dense symmetric matrix. The input is symmetrized on construction."""

    __slots__ = ("entries",)

    def __init__(self, entries):
        a = _square(entries, "SymMatrix")
        a = 0.5 * (a + a.T)
        a.flags.writeable = False
        self.entries = a

    @property
    def dim(self):
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    def __repr__(self):
        return f"SymMatrix({self.entries.tolist()!r})"


class SkewMatrix:
    """Dense antisymmetric matrix, built as (A - A^T)/2."""

    __slots__ = ("entries",)

    def __init__(self, entries):
        a = _square(entries, "SkewMatrix")
        a = 0.5 * (a - a.T)
        a.flags.writeable = False
        self.entries = a

    @property
    def dim(self):
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


@dataclass(frozen=True)
class EigenPair:
    values: np.ndarray
    vectors: np.ndarray


@dataclass(frozen=True)
class Projection:
    """Rank-k orthogonal projection ``basis @ basis.T``.

    ``basis`` is a d x k matrix with orthonormal columns spanning the range.
    """

    basis: np.ndarray
    matrix: np.ndarray = field(repr=False)

    @property
    def dim(self):
        return self.basis.shape[0]

    @property
    def rank(self):
        return self.basis.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)

    @classmethod
    def from_basis(cls, basis):
        q = np.array(basis, dtype=float)
        m = q @ q.T
        m = 0.5 * (m + m.T)
        return cls(basis=q, matrix=m)

    def conjugate(self, q):
        """Return q P q^T, again a projection of the same rank."""
        return Projection.from_basis(np.asarray(q, dtype=float) @ self.basis)


def as_array(m):
    """Plain ndarray view of a SymMatrix/SkewMatrix/Projection or array-like."""
    if isinstance(m, (SymMatrix, SkewMatrix, Projection)):
        return np.asarray(m)
    return np.asarray(m, dtype=float)


def sign_normalize(vectors):
    """Flip columns so that the first non-negligible component is positive.

    Works on a single matrix or a stack (..., d, d).
    """
    v = np.array(vectors, dtype=float, copy=True)
    mag = np.abs(v)
    tol = 1e-12 * np.maximum(mag.max(axis=-2, keepdims=True), 1e-300)
    first = np.argmax(mag > tol, axis=-2)
    lead = np.take_along_axis(v, first[..., None, :], axis=-2)
    return v * np.where(lead < 0, -1.0, 1.0)


def eig_sym(m) -> EigenPair:
    """Ascending eigenvalues and sign-normalized orthonormal eigenvectors."""
    a = as_array(m)
    if not np.all(np.isfinite(a)):
        raise NonFinite("matrix has NaN or Inf entries")
    a = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(a)
    return EigenPair(values=w, vectors=sign_normalize(v))


def eigh_stack(a):
    """Batched version of eig_sym for arrays shaped (..., d, d)."""
    a = np.asarray(a, dtype=float)
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    w, v = np.linalg.eigh(a)
    return w, sign_normalize(v)


def psd_sqrt(m, clamp_tol: float = PSD_CLAMP_TOL) -> SymMatrix:
    """Symmetric square root of the PSD part of ``m``.

    Eigenvalues in [-clamp_tol, 0) are treated as rounding and clamped to 0.
    """
    ep = eig_sym(m)
    if ep.values[0] < -clamp_tol:
        raise NotPSD(f"smallest eigenvalue {ep.values[0]:.3e} below -{clamp_tol:g}")
    root = np.sqrt(np.clip(ep.values, 0.0, None))
    return SymMatrix((ep.vectors * root) @ ep.vectors.T)


def psd_sqrt_stack(a, clamp_tol: float = PSD_CLAMP_TOL):
    """psd_sqrt over a stack (..., d, d); returns a plain array."""
    w, v = eigh_stack(a)
    if np.any(w[..., 0] < -clamp_tol):
        raise NotPSD("stack contains a matrix with a negative eigenvalue")
    root = np.sqrt(np.clip(w, 0.0, None))
    return np.einsum("...ik,...k,...jk->...ij", v, root, v)


def projection_from_frame(columns) -> Projection:
    """Orthogonal projection onto the span of the given column vectors.

    ``columns`` is either a d x k array or a sequence of k vectors in R^d.
    """
    cols = np.asarray(columns, dtype=float)
    if cols.ndim == 1:
        cols = cols[:, None]
    elif isinstance(columns, (list, tuple)):
        cols = np.stack([np.asarray(c, dtype=float) for c in columns], axis=1)
    d, k = cols.shape
    if not 1 <= k <= d:
        raise RankOutOfRange(f"need 1 <= k <= d, got k={k}, d={d}")
    if not np.all(np.isfinite(cols)):
        raise NonFinite("frame has NaN or Inf entries")
    q, r = np.linalg.qr(cols)
    diag = np.abs(np.diag(r))
    scale = max(np.linalg.norm(cols, axis=0).max(), 1e-300)
    if diag.min() < FRAME_TOL * scale:
        raise DegenerateFrame("columns are (numerically) linearly dependent")
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return Projection.from_basis(q)


def haar_frame(dim: int, rank: int, rng) -> np.ndarray:
    """d x k orthonormal frame whose span is uniform on the Grassmannian."""
    if not 1 <= rank <= dim:
        raise RankOutOfRange(f"need 1 <= k <= d, got k={rank}, d={dim}")
    while True:
        g = rng.standard_normal((dim, rank))
        q, r = np.linalg.qr(g)
        diag = np.diag(r)
        if np.abs(diag).min() > FRAME_TOL:
            return q * np.where(diag < 0, -1.0, 1.0)


def haar_frames(dim: int, rank: int, n: int, rng) -> np.ndarray:
    """Stack (n, d, k) of independent Haar frames."""
    if not 1 <= rank <= dim:
        raise RankOutOfRange(f"need 1 <= k <= d, got k={rank}, d={dim}")
    out = np.empty((n, dim, rank))
    todo = np.arange(n)
    while todo.size:
        q, r = np.linalg.qr(rng.standard_normal((todo.size, dim, rank)))
        diag = np.diagonal(r, axis1=-2, axis2=-1)
        good = np.abs(diag).min(axis=-1) > FRAME_TOL
        out[todo[good]] = q[good] * np.where(diag[good] < 0, -1.0, 1.0)[:, None, :]
        todo = todo[~good]
    return out


def haar_projection(dim: int, rank: int, rng) -> Projection:
    return Projection.from_basis(haar_frame(dim, rank, rng))


def haar_orthogonal(dim: int, rng) -> np.ndarray:
    """Haar-distributed orthogonal matrix."""
    return haar_frame(dim, dim, rng)


def skew_exp(p, eps: float = 1.0) -> np.ndarray:
    """exp(eps * P) for antisymmetric P; closed form in 2-D and 3-D."""
    a = eps * as_array(p)
    a = 0.5 * (a - a.T)
    d = a.shape[0]
    if d == 2:
        t = a[0, 1]
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, s], [-s, c]])
    if d == 3:
        # Rodrigues: a = [w]_x with w the axial vector
        w = np.array([a[2, 1], a[0, 2], a[1, 0]])
        t = np.linalg.norm(w)
        if t < 1e-8:
            a2 = a @ a
            return np.eye(3) + a + 0.5 * a2 + (a2 @ a) / 6.0
        return np.eye(3) + (np.sin(t) / t) * a + ((1.0 - np.cos(t)) / t**2) * (a @ a)
    return scipy.linalg.expm(a)


def is_orthogonal(q, tol: float = 1e-10) -> bool:
    q = np.asarray(q, dtype=float)
    return bool(np.max(np.abs(q.T @ q - np.eye(q.shape[0]))) <= tol)

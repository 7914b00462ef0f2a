"""Built-in scalar data (running payoff f, boundary data g) with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Polynomial:
    """Sum of monomials ``coef * prod(x_i ** e_i)``.

    ``terms`` is a tuple of ``(coef, exponents)`` pairs; every exponent
    tuple has length ``dim``.
    """

    dim: int
    terms: tuple

    def __post_init__(self):
        for coef, exps in self.terms:
            if len(exps) != self.dim or any(e < 0 for e in exps):
                raise ValueError(f"bad exponent tuple {exps!r} for dim {self.dim}")
            if not np.isfinite(coef):
                raise ValueError("non-finite coefficient")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for coef, exps in self.terms:
            mono = np.full(x.shape[:-1], float(coef))
            for i, e in enumerate(exps):
                if e:
                    mono = mono * x[..., i] ** e
            out = out + mono
        return out

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for coef, exps in self.terms:
            for i, ei in enumerate(exps):
                if ei == 0:
                    continue
                part = np.full(x.shape[:-1], float(coef) * ei)
                for j, e in enumerate(exps):
                    p = e - 1 if j == i else e
                    if p:
                        part = part * x[..., j] ** p
                out[..., i] += part
        return out

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (self.dim,))
        for coef, exps in self.terms:
            for i in range(self.dim):
                for k in range(self.dim):
                    e = list(exps)
                    c = float(coef) * e[i]
                    e[i] -= 1
                    if c == 0 or e[i] < 0:
                        continue
                    c *= e[k]
                    e[k] -= 1
                    if c == 0 or e[k] < 0:
                        continue
                    part = np.full(x.shape[:-1], c)
                    for j, p in enumerate(e):
                        if p:
                            part = part * x[..., j] ** p
                    out[..., i, k] += part
        return out

    @property
    def is_constant(self):
        return all(not any(e) for _, e in self.terms)


def constant(dim, value=0.0):
    return Polynomial(dim, ((float(value), (0,) * dim),))


def linear(dim, coeffs, offset=0.0):
    coeffs = list(coeffs)
    if len(coeffs) != dim:
        raise ValueError("need one coefficient per coordinate")
    terms = [(float(offset), (0,) * dim)]
    for i, c in enumerate(coeffs):
        e = [0] * dim
        e[i] = 1
        terms.append((float(c), tuple(e)))
    return Polynomial(dim, tuple(terms))


def harmonic_quadratic(dim, scale=1.0):
    """scale * (x_1^2 - x_2^2), harmonic in every dimension >= 2."""
    e1 = [0] * dim
    e2 = [0] * dim
    e1[0] = 2
    e2[1] = 2
    return Polynomial(dim, ((float(scale), tuple(e1)), (-float(scale), tuple(e2))))


def quadratic_form(gamma, offset=0.0):
    """u(x) = x^T gamma x / 2 + offset."""
    g = np.asarray(gamma, dtype=float)
    g = 0.5 * (g + g.T)
    d = g.shape[0]
    terms = [(float(offset), (0,) * d)]
    for i in range(d):
        for j in range(i, d):
            e = [0] * d
            e[i] += 1
            e[j] += 1
            c = 0.5 * g[i, i] if i == j else g[i, j]
            if c:
                terms.append((float(c), tuple(e)))
    return Polynomial(d, tuple(terms))


def parse_polynomial(dim, text):
    """Parse ``"c:e1,e2,...; c:e1,e2,..."`` into a Polynomial.

    >>> parse_polynomial(2, "1:2,0; -1:0,2")(np.array([1.0, 2.0]))
    array(-3.)
    """
    terms = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        coef, _, exps = chunk.partition(":")
        exps = tuple(int(e) for e in exps.split(",")) if exps.strip() else (0,) * dim
        terms.append((float(coef), exps))
    if not terms:
        raise ValueError("empty polynomial")
    return Polynomial(dim, tuple(terms))

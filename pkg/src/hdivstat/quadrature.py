"""Gauss rules on the reference interval, triangle and square.

Reference triangle: vertices (0,0), (1,0), (0,1).  Reference square: [0,1]^2.
Triangle rules are collapsed (Duffy) tensor products of Gauss-Legendre and
Gauss-Jacobi(1,0) points, exact for total degree ``2n - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (nq, dim) reference coordinates
    weights: np.ndarray  # (nq,)
    degree: int

    def __len__(self):
        return len(self.weights)


def _npoints(degree: int) -> int:
    return max(1, (degree + 2) // 2)


@lru_cache(maxsize=None)
def gauss_interval(degree: int) -> QuadratureRule:
    """Gauss-Legendre on [0, 1], exact for polynomials of ``degree``."""
    n = _npoints(degree)
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadratureRule(0.5 * (x + 1.0), 0.5 * w, 2 * n - 1)


@lru_cache(maxsize=None)
def gauss_square(degree: int) -> QuadratureRule:
    line = gauss_interval(degree)
    X, Y = np.meshgrid(line.points, line.points, indexing="ij")
    W = np.outer(line.weights, line.weights)
    return QuadratureRule(np.column_stack([X.ravel(), Y.ravel()]), W.ravel(), line.degree)


@lru_cache(maxsize=None)
def gauss_triangle(degree: int) -> QuadratureRule:
    n = _npoints(degree)
    # x along the collapsed direction carries the (1 - s) Jacobian weight
    s, ws = roots_jacobi(n, 1.0, 0.0)
    s = 0.5 * (s + 1.0)
    ws = ws / 4.0
    t, wt = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (t + 1.0)
    wt = 0.5 * wt
    S, T = np.meshgrid(s, t, indexing="ij")
    x = S
    y = (1.0 - S) * T
    W = np.outer(ws, wt)
    return QuadratureRule(np.column_stack([x.ravel(), y.ravel()]), W.ravel(), 2 * n - 1)


def element_rule(cell_type: str, degree: int) -> QuadratureRule:
    if cell_type == "triangle":
        return gauss_triangle(degree)
    return gauss_square(degree)

"""Reference Raviart-Thomas and discontinuous pressure elements.

The velocity element on the reference cell is spanned by vector monomials
(``P_k^2 + x P_k`` on the triangle, ``Q_{k+1,k} x Q_{k,k+1}`` on the square)
and its nodal basis is obtained by inverting the matrix of degree-of-freedom
functionals:

* for every local edge ``e`` (from local vertex ``e`` to ``e+1``) and
  ``j = 0..k``, the moment of the outward normal component against the
  Legendre polynomial ``q_j(t)`` in the edge parameter ``t``;
* interior moments: against ``P_{k-1}^2`` on triangles and
  ``Q_{k-1,k} x Q_{k,k-1}`` on squares.

Local DOF order is edge-major (``e * (k + 1) + j``) followed by interior DOFs.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .quadrature import gauss_interval, element_rule

REF_VERTICES = {
    "triangle": np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    "quadrilateral": np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]),
}

SUPPORTED_DEGREES = (0, 1)


def edge_legendre(j: int, t):
    """Face test polynomial ``q_j`` on the unit edge parameter ``t``."""
    t = np.asarray(t, dtype=float)
    if j == 0:
        return np.ones_like(t)
    if j == 1:
        return 2.0 * t - 1.0
    raise ValueError("edge moments are only defined up to degree 1")


def _monomial_table(pts: np.ndarray, deg: int):
    """x^a y^b and its first derivatives for a, b <= deg."""
    x, y = pts[:, 0], pts[:, 1]
    px = np.stack([x ** a for a in range(deg + 1)], axis=1)
    py = np.stack([y ** b for b in range(deg + 1)], axis=1)
    dpx = np.stack([a * x ** (a - 1) if a else np.zeros_like(x) for a in range(deg + 1)], axis=1)
    dpy = np.stack([b * y ** (b - 1) if b else np.zeros_like(y) for b in range(deg + 1)], axis=1)
    val = px[:, :, None] * py[:, None, :]
    dx = dpx[:, :, None] * py[:, None, :]
    dy = px[:, :, None] * dpy[:, None, :]
    return val, dx, dy


def _rt_span(cell_type: str, k: int) -> np.ndarray:
    """Spanning set as coefficient arrays ``(n, 2, D+1, D+1)`` with D = k + 1."""
    D = k + 1
    funcs = []
    if cell_type == "triangle":
        for c in range(2):
            for a in range(k + 1):
                for b in range(k + 1 - a):
                    f = np.zeros((2, D + 1, D + 1))
                    f[c, a, b] = 1.0
                    funcs.append(f)
        # x * homogeneous P_k
        for a in range(k + 1):
            b = k - a
            f = np.zeros((2, D + 1, D + 1))
            f[0, a + 1, b] = 1.0
            f[1, a, b + 1] = 1.0
            funcs.append(f)
    else:
        for a in range(k + 2):
            for b in range(k + 1):
                f = np.zeros((2, D + 1, D + 1))
                f[0, a, b] = 1.0
                funcs.append(f)
        for a in range(k + 1):
            for b in range(k + 2):
                f = np.zeros((2, D + 1, D + 1))
                f[1, a, b] = 1.0
                funcs.append(f)
    return np.array(funcs)


class ReferenceRT:
    """Nodal Raviart-Thomas basis of degree ``k`` on a reference cell."""

    def __init__(self, cell_type: str, k: int):
        if k not in SUPPORTED_DEGREES:
            raise ValueError(f"unsupported Raviart-Thomas degree {k}; use one of {SUPPORTED_DEGREES}")
        if cell_type not in REF_VERTICES:
            raise ValueError(f"unknown cell type {cell_type!r}")
        self.cell_type = cell_type
        self.k = k
        self.vertices = REF_VERTICES[cell_type]
        self.n_edges = len(self.vertices)
        self.dofs_per_edge = k + 1
        self._deg = k + 1
        span = _rt_span(cell_type, k)
        self.ndofs = len(span)
        self.n_interior = self.ndofs - self.n_edges * self.dofs_per_edge
        V = self._dof_matrix(span)  # V[i, j] = dof_i(span_j)
        basis = np.linalg.solve(V, np.eye(self.ndofs))  # columns: span combos
        self.coef = np.einsum("jn,jcab->ncab", basis, span)

    # -------------------------------------------------------------- helpers
    def edge_points(self, e: int, t) -> np.ndarray:
        a = self.vertices[e]
        b = self.vertices[(e + 1) % self.n_edges]
        t = np.asarray(t, dtype=float)
        return a[None, :] + t[:, None] * (b - a)[None, :]

    def edge_scaled_normal(self, e: int) -> np.ndarray:
        """Outward normal times edge length (``n ds = this * dt``)."""
        d = self.vertices[(e + 1) % self.n_edges] - self.vertices[e]
        return np.array([d[1], -d[0]])

    def interior_tests(self, pts: np.ndarray) -> np.ndarray:
        """Interior moment test functions, ``(npts, n_interior, 2)``."""
        out = np.zeros((len(pts), self.n_interior, 2))
        if self.k == 0:
            return out
        x, y = pts[:, 0], pts[:, 1]
        if self.cell_type == "triangle":
            out[:, 0, 0] = 1.0
            out[:, 1, 1] = 1.0
        else:
            out[:, 0, 0] = 1.0
            out[:, 1, 0] = y - 0.5
            out[:, 2, 1] = 1.0
            out[:, 3, 1] = x - 0.5
        return out

    def _dof_matrix(self, span: np.ndarray) -> np.ndarray:
        line = gauss_interval(2 * self._deg + 2)
        rule = element_rule(self.cell_type, 2 * self._deg + 2)
        rows = []
        for e in range(self.n_edges):
            pts = self.edge_points(e, line.points)
            vals = _eval(span, pts, self._deg)  # (nq, n, 2)
            flux = vals @ self.edge_scaled_normal(e)
            for j in range(self.dofs_per_edge):
                rows.append(np.einsum("q,qn->n", line.weights * edge_legendre(j, line.points), flux))
        vals = _eval(span, rule.points, self._deg)
        tests = self.interior_tests(rule.points)
        for i in range(self.n_interior):
            rows.append(np.einsum("q,qnc,qc->n", rule.weights, vals, tests[:, i]))
        return np.array(rows)

    # ------------------------------------------------------------ tabulation
    def values(self, pts) -> np.ndarray:
        """Basis values ``(npts, ndofs, 2)``."""
        return _eval(self.coef, np.atleast_2d(pts), self._deg)

    def gradients(self, pts) -> np.ndarray:
        """Basis gradients ``(npts, ndofs, 2, 2)`` indexed ``[.., component, direction]``."""
        pts = np.atleast_2d(pts)
        _, dx, dy = _monomial_table(pts, self._deg)
        gx = np.einsum("ncab,qab->qnc", self.coef, dx)
        gy = np.einsum("ncab,qab->qnc", self.coef, dy)
        return np.stack([gx, gy], axis=-1)

    def divergence(self, pts) -> np.ndarray:
        g = self.gradients(pts)
        return g[..., 0, 0] + g[..., 1, 1]

    def local_dofs(self, values_fn) -> np.ndarray:
        """Apply the DOF functionals to a reference vector field ``values_fn(pts)``."""
        line = gauss_interval(2 * self._deg + 2)
        rule = element_rule(self.cell_type, 2 * self._deg + 2)
        out = []
        for e in range(self.n_edges):
            flux = values_fn(self.edge_points(e, line.points)) @ self.edge_scaled_normal(e)
            for j in range(self.dofs_per_edge):
                out.append(np.sum(line.weights * edge_legendre(j, line.points) * flux))
        vals = values_fn(rule.points)
        tests = self.interior_tests(rule.points)
        for i in range(self.n_interior):
            out.append(np.einsum("q,qc,qc->", rule.weights, vals, tests[:, i]))
        return np.array(out)


def _eval(coef: np.ndarray, pts: np.ndarray, deg: int) -> np.ndarray:
    val, _, _ = _monomial_table(pts, deg)
    return np.einsum("ncab,qab->qnc", coef, val)


class ReferencePressure:
    """Discontinuous pressure basis: ``P_k`` on triangles, ``Q_k`` on squares.

    Monomials are centred at the reference centroid so that the first basis
    function is the constant.
    """

    def __init__(self, cell_type: str, k: int):
        if k not in SUPPORTED_DEGREES:
            raise ValueError(f"unsupported pressure degree {k}")
        self.cell_type = cell_type
        self.k = k
        self.centre = np.array([1 / 3, 1 / 3]) if cell_type == "triangle" else np.array([0.5, 0.5])
        if cell_type == "triangle":
            self.exponents = [(a, b) for a in range(k + 1) for b in range(k + 1 - a)]
        else:
            self.exponents = [(a, b) for a in range(k + 1) for b in range(k + 1)]
        self.exponents.sort(key=lambda ab: (ab[0] + ab[1], ab))
        self.ndofs = len(self.exponents)

    def values(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts) - self.centre
        return np.stack([pts[:, 0] ** a * pts[:, 1] ** b for a, b in self.exponents], axis=1)


@lru_cache(maxsize=None)
def reference_rt(cell_type: str, k: int) -> ReferenceRT:
    return ReferenceRT(cell_type, k)


@lru_cache(maxsize=None)
def reference_pressure(cell_type: str, k: int) -> ReferencePressure:
    return ReferencePressure(cell_type, k)

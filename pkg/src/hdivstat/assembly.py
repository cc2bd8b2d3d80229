"""Sparse assembly of the discrete forms of the H(div) scheme.

All matrices are assembled on the full velocity coefficient vector (Dirichlet
normal DOFs included); the solver restricts them to the free DOFs.  Local
contributions are accumulated as coordinate triples and merged with a stable
sort on the (row, column) key, so the result does not depend on how the
triples were produced.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.io
import scipy.sparse as sp

from .spaces import FaceSide, FaceTab, PressureSpace, VelocitySpace, _call


def default_penalty(k: int) -> float:
    return 10.0 * (k + 1) ** 2


@dataclass
class FormContext:
    """Viscosity, penalty, Dirichlet data ``g(x, t)`` and body force ``f(x, t)``."""

    nu: float
    sigma: float
    g: Optional[Callable] = None
    f: Optional[Callable] = None

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"viscosity must be positive, got {self.nu}")
        if not self.sigma > 0:
            raise ValueError(f"penalty must be positive, got {self.sigma}")


class _Pattern:
    """Cached merge plan for a fixed list of (row, col) triples."""

    def __init__(self, rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]):
        rows = rows.ravel().astype(np.int64)
        cols = cols.ravel().astype(np.int64)
        if len(rows) and (rows.min() < 0 or rows.max() >= shape[0] or cols.min() < 0 or cols.max() >= shape[1]):
            raise IndexError("assembly index out of range")
        key = rows * shape[1] + cols
        self.order = np.argsort(key, kind="stable")
        skey = key[self.order]
        self.starts = np.flatnonzero(np.r_[True, skey[1:] != skey[:-1]]) if len(skey) else np.array([], dtype=np.int64)
        ukey = skey[self.starts]
        self.rows = ukey // shape[1]
        self.cols = ukey % shape[1]
        self.shape = shape
        indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, self.rows + 1, 1)
        self.indptr = np.cumsum(indptr)

    def build(self, data: np.ndarray) -> sp.csr_matrix:
        data = data.ravel()
        vals = np.add.reduceat(data[self.order], self.starts) if len(self.starts) else np.zeros(0)
        return sp.csr_matrix((vals, self.cols.copy(), self.indptr.copy()), shape=self.shape)


def coo_merge(rows, cols, data, shape) -> sp.csr_matrix:
    """Sum duplicate triples into a CSR matrix with sorted indices."""
    return _Pattern(np.asarray(rows), np.asarray(cols), shape).build(np.asarray(data, dtype=float))


def _local_pattern(dofs: np.ndarray, shape) -> _Pattern:
    n = dofs.shape[1]
    rows = np.repeat(dofs[:, :, None], n, axis=2)
    cols = np.repeat(dofs[:, None, :], n, axis=1)
    return _Pattern(rows, cols, shape)


def _cached(space, name, factory):
    cache = space.__dict__.setdefault("_patterns", {})
    if name not in cache:
        cache[name] = factory()
    return cache[name]


def _sym(local: np.ndarray) -> np.ndarray:
    # einsum summation order differs between (i, j) and (j, i)
    return 0.5 * (local + local.transpose(0, 2, 1))


def _bilinear(test: np.ndarray, trial: np.ndarray) -> np.ndarray:
    """``sum_{q,c} test[n,q,i,c] trial[n,q,j,c]`` as a batched matmul."""
    n, nq, ni, nc = test.shape
    a = test.transpose(0, 2, 1, 3).reshape(n, ni, nq * nc)
    b = trial.transpose(0, 1, 3, 2).reshape(n, nq * nc, trial.shape[2])
    return a @ b


def _pair_dofs(tab: FaceTab) -> np.ndarray:
    return np.concatenate([tab.k1.dofs, tab.k2.dofs], axis=1)


# --------------------------------------------------------------------------
# mass
# --------------------------------------------------------------------------
def assemble_mass(space: VelocitySpace) -> sp.csr_matrix:
    """``M_ij = int phi_j . phi_i``."""
    tab = space.volume
    local = _sym(np.einsum("nq,nqic,nqjc->nij", tab.dx, tab.phi, tab.phi))
    pat = _cached(space, "volume", lambda: _local_pattern(space.element_dofs, (space.dim, space.dim)))
    return pat.build(local)


# --------------------------------------------------------------------------
# convection with upwind flux
# --------------------------------------------------------------------------
def assemble_convection_upwind(space: VelocitySpace, w) -> sp.csr_matrix:
    """Convection matrix ``C(w)[i, j] = c(w; phi_j, phi_i)``.

    Volume term ``(w . grad u) . v`` on every element, plus on interior faces
    ``-(w . n) [[u]] . {v}`` and ``|w . n| [[u]] . [[v]]`` evaluated pointwise
    at the face quadrature nodes.
    """
    coeffs = getattr(w, "values", w)
    wspace = getattr(w, "space", space)
    if wspace is not space and (wspace.mesh is not space.mesh or wspace.dim != space.dim):
        raise ValueError("advecting field lives on a different space")
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (space.dim,):
        raise ValueError("advecting field has the wrong length")

    tab = space.volume
    wq = np.einsum("nl,nqlc->nqc", coeffs[space.element_dofs], tab.phi)
    adv = np.einsum("nqb,nqjab->nqja", wq, tab.grad)  # (w . grad) phi_j
    local = _bilinear(tab.phi * tab.dx[:, :, None, None], adv)
    pat = _cached(space, "volume", lambda: _local_pattern(space.element_dofs, (space.dim, space.dim)))
    C = pat.build(local)

    ft = space.interior_faces
    if len(ft.faces):
        wn = np.einsum("fl,fqlc,fc->fq", coeffs[ft.k1.dofs], ft.k1.phi, ft.normal)
        jump = np.concatenate([ft.k1.phi, -ft.k2.phi], axis=2)   # [[phi]]
        avg = 0.5 * np.concatenate([ft.k1.phi, ft.k2.phi], axis=2)  # {phi}
        test = ((ft.ds * np.abs(wn))[:, :, None, None] * jump
                - (ft.ds * wn)[:, :, None, None] * avg)
        local_f = _bilinear(test, jump)
        fpat = _cached(space, "int_faces", lambda: _local_pattern(_pair_dofs(ft), (space.dim, space.dim)))
        C = C + fpat.build(local_f)
    return C


# --------------------------------------------------------------------------
# symmetric interior penalty diffusion
# --------------------------------------------------------------------------
@dataclass
class DiffusionParts:
    volume: sp.csr_matrix
    consistency: sp.csr_matrix  # both symmetric face terms
    penalty: sp.csr_matrix      # penalty term with sigma = 1

    def combine(self, sigma: float) -> sp.csr_matrix:
        return self.volume + self.consistency + sigma * self.penalty


def _sip_face_terms(tab: FaceTab, interior: bool):
    """Local consistency and unit-penalty matrices on a set of faces."""
    n = tab.normal[:, None, None, :]
    if interior:
        jump = np.concatenate([tab.k1.phi, -tab.k2.phi], axis=2)
        avg_grad = 0.5 * np.concatenate([tab.k1.grad, tab.k2.grad], axis=2)
    else:
        jump = tab.k1.phi
        avg_grad = tab.k1.grad
    flux = np.einsum("fqjab,fb->fqja", avg_grad, tab.normal)  # {grad phi_j} n
    cons = -np.einsum("fq,fqia,fqja->fij", tab.ds, jump, flux)
    cons = cons + cons.transpose(0, 2, 1)
    pen = _sym(np.einsum("fq,fqia,fqja->fij", tab.ds / tab.size[:, None], jump, jump))
    return cons, pen


def diffusion_parts(space: VelocitySpace) -> DiffusionParts:
    shape = (space.dim, space.dim)
    tab = space.volume
    vol = _sym(np.einsum("nq,nqiab,nqjab->nij", tab.dx, tab.grad, tab.grad))
    pat = _cached(space, "volume", lambda: _local_pattern(space.element_dofs, shape))
    volume = pat.build(vol)
    cons = sp.csr_matrix(shape)
    pen = sp.csr_matrix(shape)
    it = space.interior_faces
    if len(it.faces):
        c, p = _sip_face_terms(it, True)
        fpat = _cached(space, "int_faces", lambda: _local_pattern(_pair_dofs(it), shape))
        cons = cons + fpat.build(c)
        pen = pen + fpat.build(p)
    dt = space.dirichlet_faces
    if len(dt.faces):
        c, p = _sip_face_terms(dt, False)
        bpat = _cached(space, "dir_faces", lambda: _local_pattern(dt.k1.dofs, shape))
        cons = cons + bpat.build(c)
        pen = pen + bpat.build(p)
    return DiffusionParts(volume, cons, pen)


def assemble_diffusion_sip(space: VelocitySpace, ctx: FormContext) -> sp.csr_matrix:
    """SIP matrix ``A[i, j] = a(phi_j, phi_i)`` over interior and Dirichlet faces."""
    return diffusion_parts(space).combine(ctx.sigma)


# --------------------------------------------------------------------------
# divergence and pressure operators
# --------------------------------------------------------------------------
def assemble_divergence(vspace: VelocitySpace, pspace: PressureSpace) -> sp.csr_matrix:
    """``B[q_i, phi_j] = sum_K int q_i div phi_j``; shape ``(dim Q, dim V)``."""
    if vspace.mesh is not pspace.mesh:
        raise ValueError("velocity and pressure spaces live on different meshes")
    tab = vspace.volume
    q = pspace.values(tab.ref_points)  # (nq, np)
    local = np.einsum("nq,qi,nqj->nij", tab.dx, q, tab.div)
    ne = vspace.mesh.n_elements
    rows = np.repeat(pspace.element_dofs[:, :, None], vspace.nloc, axis=2)
    cols = np.repeat(vspace.element_dofs[:, None, :], pspace.nloc, axis=1)
    return coo_merge(rows, cols, local, (pspace.dim, vspace.dim))


def assemble_pressure_mass(pspace: PressureSpace, rule_points=None, rule_weights=None) -> sp.csr_matrix:
    from .quadrature import element_rule
    from .spaces import map_geometry

    rule = element_rule(pspace.mesh.cell_type, 2 * pspace.k + 2)
    _, _, _, det = map_geometry(pspace.mesh, np.arange(pspace.mesh.n_elements), rule.points)
    q = pspace.values(rule.points)
    local = np.einsum("nq,qi,qj->nij", rule.weights * det, q, q)
    rows = np.repeat(pspace.element_dofs[:, :, None], pspace.nloc, axis=2)
    cols = np.repeat(pspace.element_dofs[:, None, :], pspace.nloc, axis=1)
    return coo_merge(rows, cols, local, (pspace.dim, pspace.dim))


def assemble_pressure_moments(pspace: PressureSpace) -> np.ndarray:
    """``b_i = int q_i``."""
    from .quadrature import element_rule
    from .spaces import map_geometry

    rule = element_rule(pspace.mesh.cell_type, 2 * pspace.k + 2)
    _, _, _, det = map_geometry(pspace.mesh, np.arange(pspace.mesh.n_elements), rule.points)
    local = np.einsum("nq,qi->ni", rule.weights * det, pspace.values(rule.points))
    b = np.zeros(pspace.dim)
    b[pspace.element_dofs] = local
    return b


# --------------------------------------------------------------------------
# right-hand side
# --------------------------------------------------------------------------
@dataclass
class RhsParts:
    source: np.ndarray       # int f . v
    consistency: np.ndarray  # -nu sum_D int (g x n) : grad v
    penalty: np.ndarray      # nu sum_D h^-1 int g . v (multiply by sigma)

    def combine(self, sigma: float) -> np.ndarray:
        return self.source + self.consistency + sigma * self.penalty


def rhs_parts(space: VelocitySpace, ctx: FormContext, t: float = 0.0) -> RhsParts:
    source = np.zeros(space.dim)
    cons = np.zeros(space.dim)
    pen = np.zeros(space.dim)
    if ctx.f is not None:
        tab = space.volume
        f = _call(ctx.f, tab.x.reshape(-1, 2), t).reshape(tab.x.shape)
        local = np.einsum("nq,nqc,nqlc->nl", tab.dx, f, tab.phi)
        source = np.bincount(space.element_dofs.ravel(), weights=local.ravel(), minlength=space.dim)
    dt = space.dirichlet_faces
    if ctx.g is not None and len(dt.faces):
        g = _call(ctx.g, dt.x.reshape(-1, 2), t).reshape(dt.x.shape)
        gradv_n = np.einsum("fqlab,fb->fqla", dt.k1.grad, dt.normal)  # (grad v) n
        lc = -ctx.nu * np.einsum("fq,fqa,fqla->fl", dt.ds, g, gradv_n)
        lp = ctx.nu * np.einsum("fq,fqa,fqla->fl", dt.ds / dt.size[:, None], g, dt.k1.phi)
        cons = np.bincount(dt.k1.dofs.ravel(), weights=lc.ravel(), minlength=space.dim)
        pen = np.bincount(dt.k1.dofs.ravel(), weights=lp.ravel(), minlength=space.dim)
    return RhsParts(source, cons, pen)


def assemble_rhs(space: VelocitySpace, ctx: FormContext, t: float = 0.0) -> np.ndarray:
    """Load vector ``l(phi_i)`` at time ``t``."""
    return rhs_parts(space, ctx, t).combine(ctx.sigma)


def export_matrix_market(matrix, path, comment: str = "") -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), comment=comment)

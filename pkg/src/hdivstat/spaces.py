"""Raviart-Thomas velocity spaces and discontinuous pressure spaces.

Global velocity DOFs are numbered face-first: face ``f`` owns DOFs
``f * (k + 1) + j`` (moments of ``v . n_F`` against the face Legendre
polynomial ``q_j`` in the face parameter running from ``faces[f, 0]`` to
``faces[f, 1]``), then element-interior DOFs follow.  The local reference
basis is pushed forward with the contravariant Piola map and multiplied by a
per-element sign so that every shared face DOF has one meaning on both sides.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from .elements import ReferenceRT, reference_pressure, reference_rt, edge_legendre, SUPPORTED_DEGREES
from .mesh import FaceSets, Mesh2D
from .quadrature import element_rule, gauss_interval


class GeometryError(ValueError):
    """Element map with non-positive Jacobian determinant."""


class AssemblyError(RuntimeError):
    """Singular or otherwise unusable discrete operator."""


# --------------------------------------------------------------------------
# element geometry
# --------------------------------------------------------------------------
def map_geometry(mesh: Mesh2D, elements: np.ndarray, ref: np.ndarray):
    """Physical points, Jacobians, their derivatives and determinants.

    ``ref`` has shape ``(n, nq, 2)`` (one row of reference points per entry of
    ``elements``) or ``(nq, 2)`` (shared points).  Returns ``x (n,nq,2)``,
    ``J (n,nq,2,2)``, ``dJ (n,nq,2,2,2)`` with ``dJ[..., a, b, c] = dJ_ab/dxhat_c``
    and ``det (n,nq)``.
    """
    elements = np.asarray(elements, dtype=np.int64)
    xy = mesh.vertices[mesh.elements[elements]]  # (n, nv, 2)
    n = len(elements)
    if ref.ndim == 2:
        ref = np.broadcast_to(ref, (n,) + ref.shape)
    s, t = ref[..., 0], ref[..., 1]
    nq = ref.shape[1]
    if mesh.elements.shape[1] == 3:
        J0 = np.stack([xy[:, 1] - xy[:, 0], xy[:, 2] - xy[:, 0]], axis=2)  # (n, 2, 2)
        J = np.broadcast_to(J0[:, None], (n, nq, 2, 2))
        x = xy[:, None, 0, :] + np.einsum("nab,nqb->nqa", J0, ref)
        dJ = np.zeros((n, nq, 2, 2, 2))
    else:
        X0, X1, X2, X3 = (xy[:, i][:, None, :] for i in range(4))
        s_, t_ = s[..., None], t[..., None]
        x = (1 - s_) * (1 - t_) * X0 + s_ * (1 - t_) * X1 + s_ * t_ * X2 + (1 - s_) * t_ * X3
        ds = (1 - t_) * (X1 - X0) + t_ * (X2 - X3)
        dt = (1 - s_) * (X3 - X0) + s_ * (X2 - X1)
        J = np.stack([ds, dt], axis=-1)
        c = np.broadcast_to(X0 - X1 + X2 - X3, (n, nq, 2))
        dJ = np.zeros((n, nq, 2, 2, 2))
        dJ[..., :, 0, 1] = c
        dJ[..., :, 1, 0] = c
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    if np.any(det <= 0):
        bad = elements[np.flatnonzero((det <= 0).any(axis=1))[0]]
        raise GeometryError(f"element {bad} has a non-positive Jacobian determinant")
    return x, np.ascontiguousarray(J), dJ, det


def _inverse(J: np.ndarray, det: np.ndarray) -> np.ndarray:
    inv = np.empty_like(J)
    inv[..., 0, 0] = J[..., 1, 1]
    inv[..., 1, 1] = J[..., 0, 0]
    inv[..., 0, 1] = -J[..., 0, 1]
    inv[..., 1, 0] = -J[..., 1, 0]
    return inv / det[..., None, None]


def piola_values(J: np.ndarray, det: np.ndarray, ref_values: np.ndarray) -> np.ndarray:
    """Contravariant Piola map ``J v_ref / det J`` (trailing axis = vector)."""
    if np.any(det <= 0):
        raise GeometryError("degenerate element: det J <= 0")
    return np.einsum("...ab,...nb->...na", J, ref_values) / det[..., None, None]


def piola_gradients(J, dJ, det, ref_values, ref_grads):
    """Physical gradients ``[.., component, direction]`` of Piola-mapped fields."""
    ddet = (dJ[..., 0, 0, :] * J[..., 1, 1, None] + J[..., 0, 0, None] * dJ[..., 1, 1, :]
            - dJ[..., 0, 1, :] * J[..., 1, 0, None] - J[..., 0, 1, None] * dJ[..., 1, 0, :])
    dv = (np.einsum("...abc,...nb->...nac", dJ, ref_values)
          + np.einsum("...ab,...nbc->...nac", J, ref_grads)) / det[..., None, None, None]
    dv -= (np.einsum("...ab,...nb->...na", J, ref_values)[..., None]
           * ddet[..., None, None, :] / det[..., None, None, None] ** 2)
    return np.einsum("...nac,...ce->...nae", dv, _inverse(J, det))


@dataclass
class VolumeTab:
    """Basis data at volume quadrature points of every element."""

    x: np.ndarray       # (ne, nq, 2)
    dx: np.ndarray      # (ne, nq) quadrature weight times det J
    phi: np.ndarray     # (ne, nq, nl, 2)
    grad: np.ndarray    # (ne, nq, nl, 2, 2)
    div: np.ndarray     # (ne, nq, nl)
    det: np.ndarray     # (ne, nq)
    ref_points: np.ndarray
    ref_weights: np.ndarray


@dataclass
class FaceSide:
    elements: np.ndarray  # (nf,)
    dofs: np.ndarray      # (nf, nl)
    phi: np.ndarray       # (nf, nq, nl, 2)
    grad: np.ndarray      # (nf, nq, nl, 2, 2)


@dataclass
class FaceTab:
    faces: np.ndarray     # (nf,)
    x: np.ndarray         # (nf, nq, 2)
    ds: np.ndarray        # (nf, nq)
    tau: np.ndarray       # (nq,) global face parameter of the quadrature points
    normal: np.ndarray    # (nf, 2), n_F
    size: np.ndarray      # (nf,)
    k1: FaceSide
    k2: FaceSide | None


# --------------------------------------------------------------------------
# spaces
# --------------------------------------------------------------------------
class VelocitySpace:
    """Global ``RT_k`` space with strongly imposed normal DOFs on Dirichlet faces.

    ``dim`` counts every coefficient (the coefficient vector of a field holds
    the Dirichlet normal values too); ``free_dim`` counts the unknowns of the
    constrained space.
    """

    def __init__(self, mesh: Mesh2D, k: int, face_sets: FaceSets):
        if k not in SUPPORTED_DEGREES:
            raise ValueError(f"unsupported velocity degree {k}; use one of {SUPPORTED_DEGREES}")
        self.mesh = mesh
        self.k = k
        self.face_sets = face_sets
        self.ref: ReferenceRT = reference_rt(mesh.cell_type, k)
        self.dofs_per_face = k + 1
        self.n_interior = self.ref.n_interior
        self.nloc = self.ref.ndofs
        ne, nfe = mesh.elements.shape
        nf = mesh.n_faces
        kk = self.dofs_per_face

        face_dofs = mesh.element_faces[:, :, None] * kk + np.arange(kk)  # (ne, nfe, kk)
        interior = nf * kk + np.arange(ne)[:, None] * self.n_interior + np.arange(self.n_interior)
        self.element_dofs = np.concatenate([face_dofs.reshape(ne, -1), interior], axis=1)

        odd = (np.arange(kk) % 2 == 1)
        flip = np.where(mesh.element_face_flip[:, :, None] & odd, -1, 1)
        sign = mesh.element_face_sign[:, :, None] * flip
        self.element_signs = np.concatenate(
            [sign.reshape(ne, -1), np.ones((ne, self.n_interior), dtype=np.int64)], axis=1
        ).astype(float)

        self.dim = nf * kk + ne * self.n_interior
        self.dirichlet_dofs = (face_sets.dirichlet[:, None] * kk + np.arange(kk)).ravel()
        mask = np.ones(self.dim, dtype=bool)
        mask[self.dirichlet_dofs] = False
        self.free_dofs = np.flatnonzero(mask)
        self.free_dim = len(self.free_dofs)
        self.volume_degree = 3 * k + 3
        self.face_degree = 3 * k + 3

    def __repr__(self):
        return f"VelocitySpace(RT{self.k}, dim={self.dim}, free={self.free_dim})"

    def local_dimension(self) -> int:
        return self.nloc

    def zero(self, time: float = 0.0) -> "FieldCoefficients":
        return FieldCoefficients(self, np.zeros(self.dim), time)

    # ---------------------------------------------------------- tabulation
    def tabulate(self, elements: np.ndarray, ref: np.ndarray, gradients: bool = True):
        """Physical basis data of ``elements`` at reference points ``ref``.

        ``ref`` is ``(nq, 2)`` or ``(n, nq, 2)``.  Returns ``x, J, det, phi``
        and, if requested, ``grad`` and ``div``.
        """
        elements = np.asarray(elements, dtype=np.int64)
        x, J, dJ, det = map_geometry(self.mesh, elements, ref)
        sign = self.element_signs[elements][:, None, :, None]
        if ref.ndim == 2:
            rv = self.ref.values(ref)[None]
            rg = self.ref.gradients(ref)[None] if gradients else None
            rd = self.ref.divergence(ref)[None]
        else:
            flat = ref.reshape(-1, 2)
            shp = ref.shape[:2]
            rv = self.ref.values(flat).reshape(shp + (self.nloc, 2))
            rg = self.ref.gradients(flat).reshape(shp + (self.nloc, 2, 2)) if gradients else None
            rd = self.ref.divergence(flat).reshape(shp + (self.nloc,))
        phi = piola_values(J, det, rv) * sign
        out = {"x": x, "J": J, "det": det, "phi": phi,
               "div": rd * self.element_signs[elements][:, None, :] / det[..., None]}
        if gradients:
            out["grad"] = piola_gradients(J, dJ, det, np.broadcast_to(rv, phi.shape), rg) * sign[..., None]
        return out

    @cached_property
    def volume(self) -> VolumeTab:
        rule = element_rule(self.mesh.cell_type, self.volume_degree)
        tab = self.tabulate(np.arange(self.mesh.n_elements), rule.points)
        return VolumeTab(x=tab["x"], dx=rule.weights[None, :] * tab["det"], phi=tab["phi"],
                         grad=tab["grad"], div=tab["div"], det=tab["det"],
                         ref_points=rule.points, ref_weights=rule.weights)

    def _face_side(self, faces: np.ndarray, side: int, tau: np.ndarray) -> FaceSide:
        mesh = self.mesh
        els = mesh.face_adjacency[faces, side]
        local = np.argmax(mesh.element_faces[els] == faces[:, None], axis=1)
        flip = mesh.element_face_flip[els, local]
        t = np.where(flip[:, None], 1.0 - tau[None, :], tau[None, :])
        v = self.ref.vertices
        a = v[local]
        b = v[(local + 1) % len(v)]
        ref = a[:, None, :] + t[..., None] * (b - a)[:, None, :]
        tab = self.tabulate(els, ref)
        return FaceSide(elements=els, dofs=self.element_dofs[els], phi=tab["phi"], grad=tab["grad"])

    def _face_tab(self, faces: np.ndarray) -> FaceTab:
        mesh = self.mesh
        line = gauss_interval(self.face_degree)
        tau = line.points
        p0 = mesh.vertices[mesh.faces[faces, 0]]
        p1 = mesh.vertices[mesh.faces[faces, 1]]
        x = p0[:, None, :] + tau[None, :, None] * (p1 - p0)[:, None, :]
        size = mesh.face_sizes[faces]
        ds = size[:, None] * line.weights[None, :]
        k1 = self._face_side(faces, 0, tau)
        has2 = mesh.face_adjacency[faces, 1] >= 0
        k2 = self._face_side(faces, 1, tau) if len(faces) and has2.all() else None
        return FaceTab(faces=faces, x=x, ds=ds, tau=tau, normal=mesh.face_normals[faces],
                       size=size, k1=k1, k2=k2)

    @cached_property
    def interior_faces(self) -> FaceTab:
        return self._face_tab(self.face_sets.interior)

    @cached_property
    def dirichlet_faces(self) -> FaceTab:
        return self._face_tab(self.face_sets.dirichlet)

    # ---------------------------------------------------------- evaluation
    def evaluate(self, coeffs: np.ndarray, elements, ref_points) -> np.ndarray:
        """Field values at per-point reference coordinates.

        ``coeffs`` may be ``(dim,)`` or ``(m, dim)`` for several fields at once.
        """
        elements = np.atleast_1d(np.asarray(elements, dtype=np.int64))
        ref_points = np.asarray(ref_points, dtype=float).reshape(len(elements), 1, 2)
        tab = self.tabulate(elements, ref_points, gradients=False)
        phi = tab["phi"][:, 0]  # (n, nl, 2)
        c = np.asarray(coeffs)[..., self.element_dofs[elements]]  # (..., n, nl)
        return np.einsum("...nl,nlc->...nc", c, phi)

    def evaluate_at(self, coeffs: np.ndarray, points) -> np.ndarray:
        els, refs = self.mesh.locate(points)
        return self.evaluate(coeffs, els, refs)

    def evaluate_local(self, coeffs: np.ndarray, element: int, ref_points) -> np.ndarray:
        """Evaluate on one element by summing the reference field first, then mapping once."""
        ref_points = np.atleast_2d(ref_points)
        c = coeffs[self.element_dofs[element]] * self.element_signs[element]
        vhat = np.einsum("l,qlc->qc", c, self.ref.values(ref_points))
        _, J, _, det = map_geometry(self.mesh, np.array([element]), ref_points)
        return piola_values(J[0], det[0], vhat[:, None, :])[:, 0, :]

    # --------------------------------------------------------- interpolation
    def interpolate(self, u: Callable, faces: np.ndarray | None = None, t: float = 0.0,
                    include_interior: bool = True) -> np.ndarray:
        """Canonical (commuting) interpolant of ``u(x, t)``.

        Face DOFs are the moments of ``u . n_F`` against ``q_j``; interior DOFs
        are reference moments of the inverse-Piola pullback.  Restrict to
        ``faces`` to get only those face DOFs (the rest are left at zero).
        """
        mesh = self.mesh
        kk = self.dofs_per_face
        out = np.zeros(self.dim)
        faces = np.arange(mesh.n_faces) if faces is None else np.asarray(faces, dtype=np.int64)
        if len(faces):
            line = gauss_interval(2 * self.k + 6)
            p0 = mesh.vertices[mesh.faces[faces, 0]]
            p1 = mesh.vertices[mesh.faces[faces, 1]]
            x = p0[:, None, :] + line.points[None, :, None] * (p1 - p0)[:, None, :]
            val = _call(u, x.reshape(-1, 2), t).reshape(x.shape)
            flux = np.einsum("fqc,fc->fq", val, mesh.face_normals[faces]) * mesh.face_sizes[faces, None]
            for j in range(kk):
                out[faces * kk + j] = flux @ (line.weights * edge_legendre(j, line.points))
        if include_interior and self.n_interior:
            rule = element_rule(mesh.cell_type, 2 * self.k + 6)
            els = np.arange(mesh.n_elements)
            x, J, _, det = map_geometry(mesh, els, rule.points)
            val = _call(u, x.reshape(-1, 2), t).reshape(x.shape)
            uhat = np.einsum("nqab,nqb->nqa", _inverse(J, det), val) * det[..., None]
            tests = self.ref.interior_tests(rule.points)  # (nq, ni, 2)
            mom = np.einsum("q,nqc,qic->ni", rule.weights, uhat, tests)
            out[self.element_dofs[:, -self.n_interior:]] = mom
        return out


def _call(fn: Callable, x: np.ndarray, t: float) -> np.ndarray:
    try:
        val = fn(x, t)
    except TypeError:
        val = fn(x)
    return np.asarray(val, dtype=float)


class PressureSpace:
    """Discontinuous ``P_k`` (triangles) / ``Q_k`` (quadrilaterals) pressures."""

    def __init__(self, mesh: Mesh2D, k: int, zero_mean: bool = False):
        if k not in SUPPORTED_DEGREES:
            raise ValueError(f"unsupported pressure degree {k}")
        self.mesh = mesh
        self.k = k
        self.zero_mean = zero_mean
        self.ref = reference_pressure(mesh.cell_type, k)
        self.nloc = self.ref.ndofs
        self.element_dofs = np.arange(mesh.n_elements * self.nloc).reshape(mesh.n_elements, self.nloc)
        self.dim = mesh.n_elements * self.nloc

    def __repr__(self):
        return f"PressureSpace(k={self.k}, dim={self.dim}, zero_mean={self.zero_mean})"

    def values(self, ref_points) -> np.ndarray:
        return self.ref.values(ref_points)

    def evaluate(self, coeffs: np.ndarray, elements, ref_points) -> np.ndarray:
        elements = np.atleast_1d(np.asarray(elements, dtype=np.int64))
        q = self.ref.values(np.asarray(ref_points).reshape(-1, 2))
        return np.einsum("...nl,nl->...n", np.asarray(coeffs)[..., self.element_dofs[elements]], q)

    def constant(self, value: float = 1.0) -> np.ndarray:
        """Coefficients of the constant function ``value``."""
        c = np.zeros(self.dim)
        c[self.element_dofs[:, 0]] = value
        return c


def build_velocity_space(mesh: Mesh2D, k: int, face_sets: FaceSets) -> VelocitySpace:
    return VelocitySpace(mesh, k, face_sets)


def build_pressure_space(mesh: Mesh2D, k: int, zero_mean: bool = False) -> PressureSpace:
    return PressureSpace(mesh, k, zero_mean)


@dataclass
class FieldCoefficients:
    """Coefficient vector of a discrete field at one time."""

    space: object
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.space.dim,):
            raise ValueError(f"coefficient vector has shape {self.values.shape}, "
                             f"space dimension is {self.space.dim}")

    def copy(self) -> "FieldCoefficients":
        return FieldCoefficients(self.space, self.values.copy(), self.time)


def evaluate_field(field: FieldCoefficients, element: int, points) -> np.ndarray:
    """Values of ``field`` on ``element`` at reference ``points``."""
    space = field.space
    if not 0 <= element < space.mesh.n_elements:
        raise IndexError(f"element {element} out of range")
    points = np.atleast_2d(points)
    return space.evaluate(field.values, np.full(len(points), element), points)


def piola_transform(mesh: Mesh2D, element: int, reference_points, reference_values) -> np.ndarray:
    """Map reference vector values on ``element`` to physical ones."""
    reference_points = np.atleast_2d(reference_points)
    _, J, _, det = map_geometry(mesh, np.array([element]), reference_points)
    return piola_values(J[0], det[0], np.asarray(reference_values, dtype=float)[:, None, :])[:, 0, :]


# --------------------------------------------------------------------------
# L2 projection
# --------------------------------------------------------------------------
def l2_project_velocity(u0: Callable, space: VelocitySpace, boundary: Callable | None = None,
                        t: float = 0.0) -> FieldCoefficients:
    """L2-orthogonal projection of ``u0`` onto the constrained velocity space.

    Dirichlet normal DOFs are set from ``boundary`` (zero when omitted); the
    remaining DOFs minimise the L2 distance to ``u0``.
    """
    from scipy.sparse.linalg import splu

    from .assembly import assemble_mass

    tab = space.volume
    val = _call(u0, tab.x.reshape(-1, 2), t).reshape(tab.x.shape)
    local = np.einsum("nq,nqc,nqlc->nl", tab.dx, val, tab.phi)
    b = np.bincount(space.element_dofs.ravel(), weights=local.ravel(), minlength=space.dim)
    c = np.zeros(space.dim)
    if boundary is not None and len(space.dirichlet_dofs):
        c = space.interpolate(boundary, space.face_sets.dirichlet, t, include_interior=False)
    M = assemble_mass(space).tocsr()
    F = space.free_dofs
    rhs = b[F] - M[F][:, space.dirichlet_dofs] @ c[space.dirichlet_dofs]
    try:
        c[F] = splu(M[F][:, F].tocsc()).solve(rhs)
    except RuntimeError as exc:
        raise AssemblyError(f"mass matrix is singular: {exc}") from exc
    return FieldCoefficients(space, c, t)


# --------------------------------------------------------------------------
# CSV snapshots
# --------------------------------------------------------------------------
def write_field_csv(field: FieldCoefficients, path, kind: str = "velocity") -> None:
    """One ``index,value`` row per coefficient after a commented header."""
    space = field.space
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# kind={kind}\n# degree={space.k}\n")
        fh.write(f"# mesh_checksum={space.mesh.checksum()}\n# time={field.time!r}\n")
        fh.write(f"# dim={space.dim}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "value"])
        for i, v in enumerate(field.values.tolist()):
            w.writerow([i, repr(v)])


def read_field_csv(path, space) -> FieldCoefficients:
    header = {}
    values = []
    with Path(path).open() as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                header[key] = val
            elif line.startswith("index"):
                continue
            elif line.strip():
                values.append(float(line.split(",")[1]))
    if header.get("mesh_checksum") != space.mesh.checksum():
        raise ValueError(f"{path}: field was stored on a different mesh")
    if int(header.get("degree", -1)) != space.k:
        raise ValueError(f"{path}: field degree {header.get('degree')} does not match space")
    return FieldCoefficients(space, np.array(values), float(header.get("time", 0.0)))

"""Two-dimensional conforming meshes of triangles or quadrilaterals.

A :class:`Mesh2D` is built once from vertex coordinates and element
connectivity and then treated as immutable.  Construction derives the face
list, face-to-element adjacency, outward face normals, element areas and the
mesh size.  Faces are oriented so that ``n_F`` points out of the adjacent
element with the smaller index (``K1``).

The module also contains the ASCII Gmsh MSH 2.2 reader/writer, uniform
refinement, geometric boundary classification and the jump/average helpers
used by the discontinuous forms.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree


class MeshError(ValueError):
    """Invalid mesh input or degenerate geometry."""


class MeshParseError(MeshError):
    """Malformed Gmsh file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ClassificationError(MeshError):
    """A boundary face is not covered by exactly one boundary rule."""


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned rectangle ``(x1_left, x1_right) x (x2_left, x2_right)``."""

    x1_left: float
    x1_right: float
    x2_left: float
    x2_right: float

    def __post_init__(self):
        if not (self.x1_right > self.x1_left and self.x2_right > self.x2_left):
            raise ValueError(f"rectangle must have positive width and height, got {self}")

    @property
    def width(self) -> float:
        return self.x1_right - self.x1_left

    @property
    def height(self) -> float:
        return self.x2_right - self.x2_left

    @property
    def area(self) -> float:
        return self.width * self.height

    @classmethod
    def unit_square(cls) -> "Rectangle":
        return cls(0.0, 1.0, 0.0, 1.0)


# local edge e runs from local vertex e to local vertex (e + 1) % nv
def _local_edges(nv: int) -> np.ndarray:
    return np.array([[e, (e + 1) % nv] for e in range(nv)], dtype=np.int64)


class Mesh2D:
    """Conforming mesh of a polygonal domain.

    Parameters
    ----------
    vertices : (nv, 2) array_like
        Vertex coordinates.
    elements : (ne, 3) or (ne, 4) array_like of int
        Vertex indices per element.  Clockwise elements are reordered to
        counterclockwise; degenerate elements raise :class:`MeshError`.
    """

    def __init__(self, vertices, elements):
        vertices = np.array(vertices, dtype=float)
        elements = np.array(elements, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must be an (n, 2) array")
        if elements.ndim != 2 or elements.shape[1] not in (3, 4) or len(elements) == 0:
            raise MeshError("elements must be a non-empty (n, 3) or (n, 4) array")
        if elements.min() < 0 or elements.max() >= len(vertices):
            raise MeshError("element references a vertex that does not exist")

        signed = _signed_areas(vertices, elements)
        scale = np.max(np.ptp(vertices, axis=0)) ** 2
        if np.any(np.abs(signed) <= 1e-14 * scale):
            bad = int(np.argmin(np.abs(signed)))
            raise MeshError(f"element {bad} is degenerate (area {signed[bad]:g})")
        flip = signed < 0
        if np.any(flip):
            elements = elements.copy()
            elements[flip] = elements[flip][:, ::-1]
            signed = np.abs(signed)
        if elements.shape[1] == 4:
            _check_convex_quads(vertices, elements)

        self.vertices = vertices
        self.elements = elements
        self.element_areas = signed
        self._build_faces()
        self.vertices.setflags(write=False)
        self.elements.setflags(write=False)

    # ------------------------------------------------------------------ build
    def _build_faces(self):
        nve = self.elements.shape[1]
        edges = _local_edges(nve)
        ne = len(self.elements)
        pairs = self.elements[:, edges]  # (ne, nve, 2)
        keys = np.sort(pairs.reshape(-1, 2), axis=1)
        faces, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        if np.any(counts > 2):
            raise MeshError("non-manifold mesh: a face is shared by more than two elements")

        element_faces = inverse.reshape(ne, nve)
        owner = np.repeat(np.arange(ne), nve)
        adjacency = -np.ones((len(faces), 2), dtype=np.int64)
        # elements are visited in increasing order, so the first owner is K1
        for slot, f in enumerate(inverse):
            k = owner[slot]
            if adjacency[f, 0] < 0:
                adjacency[f, 0] = k
            else:
                adjacency[f, 1] = k

        element_face_sign = np.where(adjacency[element_faces, 0] == owner.reshape(ne, nve)[:, :], 1, -1)
        # local edge runs along the global face direction (faces[f,0] -> faces[f,1])?
        element_face_flip = pairs[:, :, 0] != faces[element_faces, 0]

        p0 = self.vertices[faces[:, 0]]
        p1 = self.vertices[faces[:, 1]]
        tangent = p1 - p0
        sizes = np.hypot(tangent[:, 0], tangent[:, 1])
        normals = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / sizes[:, None]
        # orient normals out of K1 using its centroid
        centroids = self._centroids()
        mid = 0.5 * (p0 + p1)
        outward = np.einsum("ij,ij->i", normals, mid - centroids[adjacency[:, 0]])
        normals[outward < 0] *= -1.0

        self.faces = faces
        self.face_adjacency = adjacency
        self.face_sizes = sizes
        self.face_normals = normals
        self.element_faces = element_faces
        self.element_face_sign = element_face_sign
        self.element_face_flip = element_face_flip
        self.centroids = centroids
        diam = np.zeros(ne)
        for a in range(nve):
            for b in range(a + 1, nve):
                d = self.vertices[self.elements[:, a]] - self.vertices[self.elements[:, b]]
                diam = np.maximum(diam, np.hypot(d[:, 0], d[:, 1]))
        self.element_diameters = diam
        self.h = float(diam.max())
        for arr in (self.faces, self.face_adjacency, self.face_sizes, self.face_normals,
                    self.element_faces, self.element_face_sign, self.element_face_flip,
                    self.centroids, self.element_areas, self.element_diameters):
            arr.setflags(write=False)

    def _centroids(self) -> np.ndarray:
        """Area centroids (for quads, the polygon centroid)."""
        xy = self.vertices[self.elements]  # (ne, nv, 2)
        if self.elements.shape[1] == 3:
            return xy.mean(axis=1)
        x, y = xy[..., 0], xy[..., 1]
        xn, yn = np.roll(x, -1, axis=1), np.roll(y, -1, axis=1)
        cross = x * yn - xn * y
        a = 0.5 * cross.sum(axis=1)
        cx = ((x + xn) * cross).sum(axis=1) / (6 * a)
        cy = ((y + yn) * cross).sum(axis=1) / (6 * a)
        return np.column_stack([cx, cy])

    # ------------------------------------------------------------- properties
    @property
    def cell_type(self) -> str:
        return "triangle" if self.elements.shape[1] == 3 else "quadrilateral"

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def interior_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_adjacency[:, 1] >= 0)

    @property
    def boundary_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_adjacency[:, 1] < 0)

    @property
    def face_midpoints(self) -> np.ndarray:
        return 0.5 * (self.vertices[self.faces[:, 0]] + self.vertices[self.faces[:, 1]])

    @property
    def area(self) -> float:
        return float(self.element_areas.sum())

    def bounding_box(self) -> Rectangle:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return Rectangle(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))

    def checksum(self) -> str:
        """Stable hash of the geometry and connectivity."""
        h = hashlib.sha256()
        h.update(self.cell_type.encode())
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.elements, dtype="<i8").tobytes())
        return h.hexdigest()[:16]

    def element_outward_normals(self, k: int) -> np.ndarray:
        """Outward unit normals of element ``k``, one per local edge."""
        return self.face_normals[self.element_faces[k]] * self.element_face_sign[k][:, None]

    def __repr__(self):
        return (f"Mesh2D({self.n_elements} {self.cell_type}s, {self.n_vertices} vertices, "
                f"{self.n_faces} faces, h={self.h:.4g})")

    # ---------------------------------------------------------- point lookup
    def reference_coordinates(self, elements: np.ndarray, points: np.ndarray,
                              tol: float = 1e-12, maxiter: int = 30) -> np.ndarray:
        """Invert the element maps for ``points[i]`` inside ``elements[i]``."""
        elements = np.asarray(elements, dtype=np.int64)
        points = np.atleast_2d(np.asarray(points, dtype=float))
        xy = self.vertices[self.elements[elements]]
        if self.elements.shape[1] == 3:
            J = np.stack([xy[:, 1] - xy[:, 0], xy[:, 2] - xy[:, 0]], axis=2)
            return np.linalg.solve(J, (points - xy[:, 0])[..., None])[..., 0]
        ref = np.full_like(points, 0.5)
        for _ in range(maxiter):
            x = _bilinear_map(xy, ref)
            J = _bilinear_jacobian(xy, ref)
            delta = np.linalg.solve(J, (points - x)[..., None])[..., 0]
            ref = ref + delta
            if np.max(np.abs(delta), initial=0.0) < tol:
                break
        return ref

    def locate(self, points, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
        """Find the element containing each point and its reference coordinates.

        Raises
        ------
        MeshError
            If a point lies outside every element (beyond ``tol``).
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if not hasattr(self, "_tree"):
            object.__setattr__(self, "_tree", cKDTree(self.centroids))
        n = len(points)
        found = -np.ones(n, dtype=np.int64)
        refs = np.zeros((n, 2))
        kq = min(12, self.n_elements)
        _, cand = self._tree.query(points, k=kq)
        cand = np.asarray(cand).reshape(n, kq)
        for c in range(kq):
            todo = np.flatnonzero(found < 0)
            if len(todo) == 0:
                break
            els = cand[todo, c]
            r = self.reference_coordinates(els, points[todo])
            ok = _inside_reference(r, self.elements.shape[1], tol)
            found[todo[ok]] = els[ok]
            refs[todo[ok]] = r[ok]
        for i in np.flatnonzero(found < 0):
            els = np.arange(self.n_elements)
            r = self.reference_coordinates(els, np.repeat(points[i:i + 1], len(els), axis=0))
            ok = np.flatnonzero(_inside_reference(r, self.elements.shape[1], tol))
            if len(ok) == 0:
                raise MeshError(f"point {points[i].tolist()} lies outside the mesh")
            found[i] = ok[0]
            refs[i] = r[ok[0]]
        return found, refs


def _inside_reference(ref: np.ndarray, nve: int, tol: float) -> np.ndarray:
    x, y = ref[:, 0], ref[:, 1]
    if nve == 3:
        return (x >= -tol) & (y >= -tol) & (x + y <= 1 + tol)
    return (x >= -tol) & (y >= -tol) & (x <= 1 + tol) & (y <= 1 + tol)


def _bilinear_map(xy: np.ndarray, ref: np.ndarray) -> np.ndarray:
    s, t = ref[:, 0:1], ref[:, 1:2]
    return ((1 - s) * (1 - t) * xy[:, 0] + s * (1 - t) * xy[:, 1]
            + s * t * xy[:, 2] + (1 - s) * t * xy[:, 3])


def _bilinear_jacobian(xy: np.ndarray, ref: np.ndarray) -> np.ndarray:
    s, t = ref[:, 0:1], ref[:, 1:2]
    ds = (1 - t) * (xy[:, 1] - xy[:, 0]) + t * (xy[:, 2] - xy[:, 3])
    dt = (1 - s) * (xy[:, 3] - xy[:, 0]) + s * (xy[:, 2] - xy[:, 1])
    return np.stack([ds, dt], axis=2)


def _signed_areas(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    xy = vertices[elements]
    x, y = xy[..., 0], xy[..., 1]
    return 0.5 * (x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y).sum(axis=1)


def _check_convex_quads(vertices: np.ndarray, elements: np.ndarray):
    xy = vertices[elements]
    for a in range(4):
        p0, p1, p2 = xy[:, a], xy[:, (a + 1) % 4], xy[:, (a + 2) % 4]
        cross = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p1[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p1[:, 0])
        if np.any(cross <= 0):
            bad = int(np.flatnonzero(cross <= 0)[0])
            raise MeshError(f"quadrilateral {bad} is not strictly convex")


# --------------------------------------------------------------------------
# generation and refinement
# --------------------------------------------------------------------------
def generate_uniform_quad_mesh(nx: int, ny: int, domain: Rectangle | None = None) -> Mesh2D:
    """Uniform ``nx`` by ``ny`` grid of congruent rectangles."""
    if domain is None:
        domain = Rectangle.unit_square()
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"nx and ny must be positive integers, got {nx}, {ny}")
    nx, ny = int(nx), int(ny)
    xs = domain.x1_left + domain.width * np.arange(nx + 1) / nx
    ys = domain.x2_left + domain.height * np.arange(ny + 1) / ny
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    v0 = (j * (nx + 1) + i).ravel()
    elements = np.column_stack([v0, v0 + 1, v0 + nx + 2, v0 + nx + 1])
    return Mesh2D(vertices, elements)


def generate_uniform_tri_mesh(nx: int, ny: int, domain: Rectangle | None = None) -> Mesh2D:
    """Uniform grid with every rectangle split along its rising diagonal."""
    quads = generate_uniform_quad_mesh(nx, ny, domain)
    q = quads.elements
    tris = np.concatenate([q[:, [0, 1, 2]], q[:, [0, 2, 3]]])
    return Mesh2D(quads.vertices, tris)


def generate_channel_mesh(level: int = 0, length: float = 1.5, height: float = 0.5,
                          h_wall: float = 0.0015, h_core: float = 0.013) -> Mesh2D:
    """Graded triangular channel mesh clustered toward the no-slip walls.

    Level 0 uses the given wall and core sizes; level ``l`` applies ``l``
    uniform refinements to it.  Vertical spacing grows geometrically from
    ``h_wall`` at the walls to at most ``h_core`` in the middle, horizontal
    spacing is uniform at ``h_core``.
    """
    if level < 0:
        raise ValueError("level must be nonnegative")
    half = []
    y, dy = 0.0, h_wall
    while y < 0.5 * height - 1e-12:
        half.append(y)
        y += dy
        dy = min(dy * 1.25, h_core)
    half = np.array(half + [0.5 * height])
    # rescale the last gap so the stack lands exactly on the mid-line
    if half[-1] - half[-2] < 0.5 * h_wall and len(half) > 2:
        half = np.delete(half, -2)
    ys = np.concatenate([half, height - half[-2::-1]])
    nx = max(1, int(np.ceil(length / h_core)))
    xs = np.linspace(0.0, length, nx + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    ny = len(ys) - 1
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    v0 = (j * (nx + 1) + i).ravel()
    q = np.column_stack([v0, v0 + 1, v0 + nx + 2, v0 + nx + 1])
    # alternate the diagonal so the triangulation has no preferred direction
    even = ((i + j) % 2 == 0).ravel()
    tris = np.concatenate([
        np.where(even[:, None], q[:, [0, 1, 2]], q[:, [0, 1, 3]]),
        np.where(even[:, None], q[:, [0, 2, 3]], q[:, [1, 2, 3]]),
    ])
    mesh = Mesh2D(vertices, tris)
    for _ in range(level):
        mesh = uniform_refine(mesh)
    return mesh


def uniform_refine(mesh: Mesh2D) -> Mesh2D:
    """Split every element into four children through its edge midpoints.

    Triangles are split into four congruent triangles; quadrilaterals into four
    quadrilaterals meeting at the bilinear centre.  Midpoints are shared
    between neighbours, so the result is conforming.
    """
    nv = mesh.n_vertices
    mids = mesh.face_midpoints
    vertices = [mesh.vertices, mids]
    m = nv + mesh.element_faces  # midpoint vertex of local edge e
    el = mesh.elements
    if mesh.elements.shape[1] == 3:
        # edge e joins local vertices e and e+1
        children = np.concatenate([
            np.column_stack([el[:, 0], m[:, 0], m[:, 2]]),
            np.column_stack([m[:, 0], el[:, 1], m[:, 1]]),
            np.column_stack([m[:, 2], m[:, 1], el[:, 2]]),
            np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
        ])
    else:
        centre = mesh.vertices[el].mean(axis=1)
        c = nv + mesh.n_faces + np.arange(mesh.n_elements)
        vertices.append(centre)
        children = np.concatenate([
            np.column_stack([el[:, 0], m[:, 0], c, m[:, 3]]),
            np.column_stack([m[:, 0], el[:, 1], m[:, 1], c]),
            np.column_stack([c, m[:, 1], el[:, 2], m[:, 2]]),
            np.column_stack([m[:, 3], c, m[:, 2], el[:, 3]]),
        ])
    # keep children of a parent contiguous
    ne = mesh.n_elements
    order = np.arange(4 * ne).reshape(4, ne).T.ravel()
    return Mesh2D(np.concatenate(vertices), children[order])


# --------------------------------------------------------------------------
# boundary classification
# --------------------------------------------------------------------------
DIRICHLET = "dirichlet"
OUTFLOW = "outflow"
_SIDES = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class BoundaryRule:
    """Boundary segment on one rectangle side, matched on ``[lo, hi)``.

    ``lo``/``hi`` are coordinates along the side (x2 for left/right, x1 for
    bottom/top); ``None`` means the corresponding end of the side.
    """

    side: str
    kind: str
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.side not in _SIDES:
            raise ValueError(f"side must be one of {_SIDES}, got {self.side!r}")
        if self.kind not in (DIRICHLET, OUTFLOW):
            raise ValueError(f"kind must be {DIRICHLET!r} or {OUTFLOW!r}, got {self.kind!r}")


@dataclass(frozen=True)
class BoundarySpec:
    rectangle: Rectangle
    rules: tuple[BoundaryRule, ...]

    @classmethod
    def all_dirichlet(cls, rectangle: Rectangle) -> "BoundarySpec":
        return cls(rectangle, tuple(BoundaryRule(s, DIRICHLET) for s in _SIDES))

    @classmethod
    def channel(cls, rectangle: Rectangle) -> "BoundarySpec":
        return cls(rectangle, (BoundaryRule("left", DIRICHLET), BoundaryRule("bottom", DIRICHLET),
                               BoundaryRule("top", DIRICHLET), BoundaryRule("right", OUTFLOW)))


@dataclass(frozen=True)
class FaceSets:
    interior: np.ndarray
    dirichlet: np.ndarray
    outflow: np.ndarray

    @property
    def has_outflow(self) -> bool:
        return len(self.outflow) > 0


def _rule_matches(rule: BoundaryRule, rect: Rectangle, mid: np.ndarray, tol: float) -> np.ndarray:
    x, y = mid[:, 0], mid[:, 1]
    if rule.side == "left":
        on, s, a, b = np.abs(x - rect.x1_left) <= tol, y, rect.x2_left, rect.x2_right
    elif rule.side == "right":
        on, s, a, b = np.abs(x - rect.x1_right) <= tol, y, rect.x2_left, rect.x2_right
    elif rule.side == "bottom":
        on, s, a, b = np.abs(y - rect.x2_left) <= tol, x, rect.x1_left, rect.x1_right
    else:
        on, s, a, b = np.abs(y - rect.x2_right) <= tol, x, rect.x1_left, rect.x1_right
    lo = a if rule.lo is None else rule.lo
    hi = b + tol if rule.hi is None else rule.hi
    return on & (s >= lo - tol) & (s < hi - tol)


def classify_faces(mesh: Mesh2D, boundary_spec: BoundarySpec, tol: float = 1e-10) -> FaceSets:
    """Split boundary faces into Dirichlet and outflow sets by their midpoints."""
    bnd = mesh.boundary_faces
    mid = mesh.face_midpoints[bnd]
    hits = np.zeros(len(bnd), dtype=int)
    outflow = np.zeros(len(bnd), dtype=bool)
    for rule in boundary_spec.rules:
        m = _rule_matches(rule, boundary_spec.rectangle, mid, tol)
        hits += m
        if rule.kind == OUTFLOW:
            outflow |= m
    if np.any(hits != 1):
        i = int(np.flatnonzero(hits != 1)[0])
        what = "uncovered" if hits[i] == 0 else "covered by several rules"
        raise ClassificationError(f"boundary face {int(bnd[i])} with midpoint "
                                  f"({mid[i, 0]:.6g}, {mid[i, 1]:.6g}) is {what}")
    return FaceSets(interior=mesh.interior_faces, dirichlet=bnd[~outflow], outflow=bnd[outflow])


# --------------------------------------------------------------------------
# jumps and averages
# --------------------------------------------------------------------------
JUMP_KINDS = ("vector-dot-n", "vector-tensor-n", "tensor-avg", "vector-avg", "bracket-jump")


def jump_and_average(mesh: Mesh2D, face: int, trace_k1, trace_k2=None, kind: str = "bracket-jump"):
    """Face jump or average of element traces.

    ``trace_k1`` is the trace from ``K1`` (the element ``n_F`` points out of)
    and ``trace_k2`` from ``K2``.  On boundary faces only ``trace_k1`` is given
    and the single-trace convention applies.
    """
    if kind not in JUMP_KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    interior = mesh.face_adjacency[face, 1] >= 0
    if interior and trace_k2 is None:
        raise ValueError(f"interior face {face} needs traces from both elements")
    if not interior and trace_k2 is not None:
        raise ValueError(f"boundary face {face} has a single adjacent element")
    n = mesh.face_normals[face]
    w1 = np.asarray(trace_k1, dtype=float)
    if not interior:
        if kind == "vector-dot-n":
            return float(w1 @ n)
        if kind == "vector-tensor-n":
            return np.outer(w1, n)
        return w1.copy()
    w2 = np.asarray(trace_k2, dtype=float)
    if kind == "vector-dot-n":
        return float(w1 @ n - w2 @ n)
    if kind == "vector-tensor-n":
        return np.outer(w1, n) + np.outer(w2, -n)
    if kind in ("tensor-avg", "vector-avg"):
        return 0.5 * (w1 + w2)
    return w1 - w2


# --------------------------------------------------------------------------
# Gmsh MSH 2.2 ASCII
# --------------------------------------------------------------------------
_GMSH_NODES_PER_TYPE = {1: 2, 2: 3, 3: 4, 4: 4, 5: 8, 6: 6, 7: 5, 8: 3, 9: 6, 10: 9, 11: 10,
                        12: 27, 13: 18, 14: 14, 15: 1, 16: 8, 17: 20}
_GMSH_SURFACE = {2: 3, 3: 4}
_GMSH_IGNORED = {1, 15}


def load_gmsh_mesh(path) -> Mesh2D:
    """Read an ASCII MSH 2.2 file with triangle or quadrilateral elements.

    Line and point elements are skipped; physical tags are ignored.
    """
    lines = Path(path).read_text().splitlines()
    pos = 0

    def next_line():
        nonlocal pos
        while pos < len(lines):
            pos += 1
            text = lines[pos - 1].strip()
            if text:
                return text, pos
        raise MeshParseError("unexpected end of file", pos)

    text, ln = next_line()
    if text != "$MeshFormat":
        raise MeshParseError(f"expected $MeshFormat, found {text!r}", ln)
    text, ln = next_line()
    parts = text.split()
    if len(parts) != 3 or parts[0] not in ("2.2", "2.1", "2"):
        raise MeshParseError(f"unsupported MSH format header {text!r} (need 2.2 ASCII)", ln)
    if parts[1] != "0":
        raise MeshParseError("binary MSH files are not supported", ln)
    text, ln = next_line()
    if text != "$EndMeshFormat":
        raise MeshParseError(f"expected $EndMeshFormat, found {text!r}", ln)

    node_ids: dict[int, int] = {}
    coords: list[tuple[float, float]] = []
    cells: list[list[int]] = []
    cell_lines: list[int] = []
    seen_nodes = seen_elements = False
    while pos < len(lines):
        text, ln = next_line()
        if text == "$Nodes":
            seen_nodes = True
            text, ln = next_line()
            try:
                count = int(text)
            except ValueError:
                raise MeshParseError(f"bad node count {text!r}", ln) from None
            for _ in range(count):
                text, ln = next_line()
                parts = text.split()
                try:
                    nid = int(parts[0])
                    x, y = float(parts[1]), float(parts[2])
                    z = float(parts[3]) if len(parts) > 3 else 0.0
                except (ValueError, IndexError):
                    raise MeshParseError(f"bad node record {text!r}", ln) from None
                if abs(z) > 1e-12:
                    raise MeshParseError("node has nonzero z coordinate; only 2D meshes are supported", ln)
                node_ids[nid] = len(coords)
                coords.append((x, y))
            text, ln = next_line()
            if text != "$EndNodes":
                raise MeshParseError(f"expected $EndNodes, found {text!r}", ln)
        elif text == "$Elements":
            seen_elements = True
            text, ln = next_line()
            try:
                count = int(text)
            except ValueError:
                raise MeshParseError(f"bad element count {text!r}", ln) from None
            for _ in range(count):
                text, ln = next_line()
                try:
                    parts = [int(v) for v in text.split()]
                    etype, ntags = parts[1], parts[2]
                except (ValueError, IndexError):
                    raise MeshParseError(f"bad element record {text!r}", ln) from None
                if etype in _GMSH_IGNORED:
                    continue
                if etype not in _GMSH_SURFACE:
                    raise MeshParseError(f"unsupported element type {etype}", ln)
                nodes = parts[3 + ntags:]
                if len(nodes) != _GMSH_SURFACE[etype]:
                    raise MeshParseError(f"element of type {etype} needs {_GMSH_SURFACE[etype]} nodes", ln)
                cells.append(nodes)
                cell_lines.append(ln)
            text, ln = next_line()
            if text != "$EndElements":
                raise MeshParseError(f"expected $EndElements, found {text!r}", ln)
        elif text.startswith("$"):
            # skip unknown sections such as $PhysicalNames
            end = "$End" + text[1:]
            while True:
                t, ln = next_line()
                if t == end:
                    break
        else:
            raise MeshParseError(f"unexpected content {text!r}", ln)
    if not seen_nodes or not seen_elements:
        raise MeshParseError("file lacks a $Nodes or $Elements section", pos)
    if not cells:
        raise MeshParseError("file contains no triangle or quadrilateral elements", pos)
    if len({len(c) for c in cells}) != 1:
        raise MeshParseError("mixed triangle/quadrilateral meshes are not supported", cell_lines[0])
    elements = []
    for nodes, ln in zip(cells, cell_lines):
        try:
            elements.append([node_ids[n] for n in nodes])
        except KeyError as exc:
            raise MeshParseError(f"element references undefined node {exc.args[0]}", ln) from None
    return Mesh2D(np.array(coords), np.array(elements))


def write_gmsh_mesh(mesh: Mesh2D, path) -> None:
    """Write ``mesh`` as ASCII MSH 2.2 (surface elements only)."""
    etype = 2 if mesh.elements.shape[1] == 3 else 3
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$Nodes", str(mesh.n_vertices)]
    out += [f"{i + 1} {x!r} {y!r} 0" for i, (x, y) in enumerate(mesh.vertices.tolist())]
    out += ["$EndNodes", "$Elements", str(mesh.n_elements)]
    out += [f"{k + 1} {etype} 2 1 1 " + " ".join(str(v + 1) for v in el)
            for k, el in enumerate(mesh.elements.tolist())]
    out += ["$EndElements", ""]
    Path(path).write_text("\n".join(out))

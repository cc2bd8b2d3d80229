"""Structure functions on unstructured meshes via a uniform cell hash.

Elements are binned by centroid into an ``N_x1 x N_x2`` grid whose cells are
at least ``r`` wide, so every element within the box ``|dx1|, |dx2| <= r`` of
a given element lies in the 3x3 block of cells around it.  The grid is stored
packed: elements sorted by linear cell index ``c = j * N_x1 + i`` with
``cell_start`` offsets.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .. import _kernels
from ..mesh import Mesh2D, Rectangle


class GridError(ValueError):
    """Element centroid outside the hashed rectangle, or unusable grid size."""


class HashCorruptionError(RuntimeError):
    pass


@dataclass(frozen=True)
class HashGrid:
    domain: Rectangle
    nx: int
    ny: int
    ids: np.ndarray          # element id per slot, cell-major
    areas: np.ndarray
    centroids: np.ndarray    # (n, 2)
    velocities: np.ndarray   # (n, 2)
    cells: np.ndarray        # linear cell index per slot
    cell_start: np.ndarray   # (nx * ny + 1,)

    def __len__(self) -> int:
        return len(self.ids)

    def cell(self, i: int, j: int) -> list:
        """Tuples ``(id, |K|, centroid, velocity)`` stored in cell ``(i, j)``."""
        c = j * self.nx + i
        sl = slice(self.cell_start[c], self.cell_start[c + 1])
        return [(int(k), float(a), tuple(x), tuple(v)) for k, a, x, v in
                zip(self.ids[sl], self.areas[sl], self.centroids[sl], self.velocities[sl])]

    @property
    def cell_width(self) -> float:
        return self.domain.width / self.nx

    @property
    def cell_height(self) -> float:
        return self.domain.height / self.ny


def cell_indices(domain: Rectangle, nx: int, ny: int, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Floor formulas mapping points to integer cell coordinates."""
    points = np.atleast_2d(points)
    i = np.floor(nx * (points[:, 0] - domain.x1_left) / domain.width).astype(np.int64)
    j = np.floor(ny * (points[:, 1] - domain.x2_left) / domain.height).astype(np.int64)
    return i, j


def grid_size(domain: Rectangle, r: float) -> tuple[int, int]:
    """``N_xi = max(3, floor(side_i / r))``; cells are at least ``r`` wide."""
    if not r > 0:
        raise ValueError("offset r must be positive")
    nx = max(3, int(np.floor(domain.width / r)))
    ny = max(3, int(np.floor(domain.height / r)))
    return nx, ny


def make_hash_table(domain: Rectangle, mesh: Mesh2D, nx: int, ny: int) -> HashGrid:
    if nx < 1 or ny < 1:
        raise GridError("grid dimensions must be positive")
    cen = mesh.centroids
    i, j = cell_indices(domain, nx, ny, cen)
    bad = np.flatnonzero((i < 0) | (i >= nx) | (j < 0) | (j >= ny))
    if len(bad):
        k = bad[0]
        raise GridError(f"centroid {tuple(cen[k])} of element {k} lies outside the hashed rectangle")
    c = j * nx + i
    order = np.argsort(c, kind="stable")
    counts = np.bincount(c, minlength=nx * ny)
    start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return HashGrid(domain, nx, ny, ids=order.astype(np.int64), areas=mesh.element_areas[order].copy(),
                    centroids=cen[order].copy(), velocities=np.zeros((len(order), 2)),
                    cells=c[order], cell_start=start)


def update_hash_table(grid: HashGrid, avg_field: np.ndarray) -> HashGrid:
    """Replace the velocity slot of every tuple by the element average of ``avg_field``."""
    avg_field = np.asarray(avg_field, dtype=float)
    if avg_field.ndim != 2 or avg_field.shape[1] != 2 or avg_field.shape[0] != len(grid.ids):
        raise ValueError("element-averaged field has the wrong shape for this grid")
    i, j = cell_indices(grid.domain, grid.nx, grid.ny, grid.centroids)
    if np.any(j * grid.nx + i != grid.cells):
        k = np.flatnonzero(j * grid.nx + i != grid.cells)[0]
        raise HashCorruptionError(f"element {grid.ids[k]} not found in its computed cell")
    return replace(grid, velocities=avg_field[grid.ids])


def structure_function_of_sample(grid: HashGrid, r: float, p: float) -> float:
    """Un-rooted single-sample structure function over interior cells."""
    if grid.nx < 3 or grid.ny < 3:
        raise GridError(f"grid {grid.nx}x{grid.ny} has no interior cells; need at least 3x3")
    tol = 1e-12 * max(grid.domain.width, grid.domain.height)
    if grid.cell_width < r - tol or grid.cell_height < r - tol:
        raise GridError(f"cells ({grid.cell_width:g} x {grid.cell_height:g}) are narrower than r={r:g}")
    if not p > 0:
        raise ValueError("degree p must be positive")
    v = grid.velocities
    return float(_kernels.structure_sum(
        grid.cell_start, grid.areas, np.ascontiguousarray(grid.centroids[:, 0]),
        np.ascontiguousarray(grid.centroids[:, 1]), np.ascontiguousarray(v[:, 0]),
        np.ascontiguousarray(v[:, 1]), int(grid.nx), int(grid.ny), float(r), float(p)))


@dataclass
class StructureFunctionResult:
    p: float
    r: list = field(default_factory=list)
    values: list = field(default_factory=list)
    M: int = 0

    def add(self, r: float, value: float):
        self.r.append(float(r))
        self.values.append(float(value))

    def rows(self) -> list:
        return [(r, self.p, s) for r, s in zip(self.r, self.values)]


def _sample_sums(grid: HashGrid, avg_fields: Sequence, r: float, p: float) -> list:
    out = []
    for avg in avg_fields:
        grid = update_hash_table(grid, avg)
        out.append(structure_function_of_sample(grid, r, p))
    return out


def _chunk_task(args):
    grid, fields, r, p = args
    return _sample_sums(grid, fields, r, p)


def structure_function_ensemble(domain: Rectangle, mesh: Mesh2D, nx: int, ny: int, avg_fields: Sequence,
                                r: float, p: float, workers: int = 1) -> float:
    """Rooted ensemble structure function ``((1/M) sum_m S_m)^(1/p)``.

    Per-member sums are reduced in member order, so the result does not depend
    on ``workers``; the root is taken once, after the reduction.
    """
    M = len(avg_fields)
    if M < 1:
        raise ValueError("need at least one ensemble member")
    grid = make_hash_table(domain, mesh, nx, ny)
    if workers <= 1 or M == 1:
        sums = _sample_sums(grid, avg_fields, r, p)
    else:
        chunks = np.array_split(np.arange(M), min(workers, M))
        tasks = [(grid, [avg_fields[k] for k in idx], r, p) for idx in chunks]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            sums = [s for part in pool.map(_chunk_task, tasks) for s in part]
    total = 0.0
    for s in sums:
        total += s
    return (total / M) ** (1.0 / p)


def structure_functions(domain: Rectangle, mesh: Mesh2D, avg_fields: Sequence, offsets: Sequence[float],
                        degrees: Sequence[float], workers: int = 1,
                        grid: Optional[tuple[int, int]] = None) -> list:
    """One StructureFunctionResult per degree.

    All offsets share one hash grid, by default sized for the largest offset,
    so every value integrates over the same set of interior cells and the
    values are comparable across ``r``.
    """
    if not len(offsets):
        raise ValueError("need at least one offset")
    nx, ny = grid if grid is not None else grid_size(domain, max(offsets))
    results = []
    for p in degrees:
        res = StructureFunctionResult(p=float(p), M=len(avg_fields))
        for r in offsets:
            res.add(r, structure_function_ensemble(domain, mesh, nx, ny, avg_fields, r, p, workers))
        results.append(res)
    return results


def default_offsets(h: float, max_r: Optional[float] = None, count: int = 5) -> list:
    """Geometric offsets ``r = h * 2^j``, ``j = 0..count-1``, stopping above ``max_r``."""
    out = [h * 2.0 ** j for j in range(count)]
    if max_r is not None:
        out = [r for r in out if r <= max_r * (1 + 1e-12)]
    if not out:
        raise ValueError(f"no offset h * 2^j fits below {max_r!r}")
    return out


def characteristic_size(mesh: Mesh2D) -> float:
    """``sqrt(|D| / n_elements)``, the side of an average square element."""
    return float(np.sqrt(mesh.area / mesh.n_elements))

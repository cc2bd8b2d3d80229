"""Ensemble statistics: element averages, mean, variance and Cauchy errors."""
from __future__ import annotations

import numpy as np

from ..mesh import MeshError
from ..spaces import FieldCoefficients, VelocitySpace


def element_average(field) -> np.ndarray:
    """Per-element mean ``(1/|K|) int_K u``; shape ``(n_elements, 2)``.

    ``field`` is a FieldCoefficients or a ``(space, coefficients)`` pair, where
    the coefficients may be stacked ``(M, dim)`` to average several members.
    """
    space, coeffs = _unpack(field)
    tab = space.volume
    c = np.asarray(coeffs)[..., space.element_dofs]  # (..., ne, nl)
    integral = np.einsum("...nl,nq,nqlc->...nc", c, tab.dx, tab.phi)
    return integral / space.mesh.element_areas[:, None]


def _unpack(field):
    if isinstance(field, FieldCoefficients):
        return field.space, field.values
    space, coeffs = field
    return space, coeffs


class StatisticField:
    """Pointwise statistic of an ensemble that can be evaluated anywhere on its mesh."""

    space: VelocitySpace

    @property
    def mesh(self):
        return self.space.mesh

    def evaluate(self, elements, ref_points) -> np.ndarray:
        raise NotImplementedError

    def evaluate_at(self, points) -> np.ndarray:
        els, refs = self.mesh.locate(points)
        return self.evaluate(els, refs)

    def quadrature_values(self) -> np.ndarray:
        """Values at the volume quadrature points, ``(ne, nq, 2)``."""
        tab = self.space.volume
        ne, nq = tab.dx.shape
        els = np.repeat(np.arange(ne), nq)
        refs = np.tile(tab.ref_points, (ne, 1))
        return self.evaluate(els, refs).reshape(ne, nq, 2)

    def l2_norm(self) -> float:
        vals = self.quadrature_values()
        return float(np.sqrt(np.einsum("nq,nqc,nqc->", self.space.volume.dx, vals, vals)))


class MeanField(StatisticField):
    """Sample mean; itself a velocity field with coefficients ``mean(c_m)``."""

    def __init__(self, space: VelocitySpace, coefficients: np.ndarray):
        self.space = space
        self.coefficients = np.asarray(coefficients, dtype=float)

    def as_field(self, time: float = 0.0) -> FieldCoefficients:
        return FieldCoefficients(self.space, self.coefficients, time)

    def evaluate(self, elements, ref_points) -> np.ndarray:
        return self.space.evaluate(self.coefficients, elements, ref_points)


class VarianceField(StatisticField):
    """Unbiased componentwise variance ``M/(M-1) (E[u^2] - E[u]^2)``."""

    def __init__(self, space: VelocitySpace, members: np.ndarray):
        members = np.asarray(members, dtype=float)
        if members.shape[0] < 2:
            raise ValueError("variance needs at least two samples")
        self.space = space
        self.members = members

    @property
    def M(self) -> int:
        return self.members.shape[0]

    def evaluate(self, elements, ref_points) -> np.ndarray:
        vals = self.space.evaluate(self.members, elements, ref_points)  # (M, n, 2)
        return self.M / (self.M - 1) * ((vals ** 2).mean(axis=0) - vals.mean(axis=0) ** 2)


class ConstantField(StatisticField):
    """Identically zero (or constant) statistic on a mesh; handy as a reference."""

    def __init__(self, space: VelocitySpace, value=(0.0, 0.0)):
        self.space = space
        self.value = np.asarray(value, dtype=float)

    def evaluate(self, elements, ref_points) -> np.ndarray:
        return np.broadcast_to(self.value, (len(np.atleast_1d(elements)), 2)).copy()


def _members(ens) -> tuple[VelocitySpace, np.ndarray]:
    if hasattr(ens, "coefficients") and callable(ens.coefficients):
        return ens.space, ens.coefficients()
    space, coeffs = ens
    return space, np.atleast_2d(coeffs)


def ensemble_mean(ens) -> MeanField:
    space, C = _members(ens)
    if C.shape[0] < 1:
        raise ValueError("mean needs at least one sample")
    return MeanField(space, C.mean(axis=0))


def ensemble_variance(ens) -> VarianceField:
    space, C = _members(ens)
    if C.shape[0] < 2:
        raise ValueError("variance needs at least two samples")
    return VarianceField(space, C)


def _as_statistic(x) -> StatisticField:
    if isinstance(x, StatisticField):
        return x
    if isinstance(x, FieldCoefficients):
        return MeanField(x.space, x.values)
    raise TypeError(f"cannot compare object of type {type(x).__name__}")


def cauchy_error(a, b) -> float:
    """``||a - b||_{L2(D)}``, integrated on the finer of the two meshes.

    The coarser statistic is evaluated at the quadrature points of the finer
    mesh, which is exact prolongation when the meshes are nested.
    """
    a, b = _as_statistic(a), _as_statistic(b)
    ma, mb = a.mesh, b.mesh
    box_a, box_b = ma.bounding_box(), mb.bounding_box()
    if not np.allclose([box_a.x1_left, box_a.x1_right, box_a.x2_left, box_a.x2_right],
                       [box_b.x1_left, box_b.x1_right, box_b.x2_left, box_b.x2_right], atol=1e-12) \
            or abs(ma.area - mb.area) > 1e-10 * ma.area:
        raise ValueError("statistics live on different domains")
    fine, coarse = (b, a) if mb.n_elements >= ma.n_elements else (a, b)
    tab = fine.space.volume
    vf = fine.quadrature_values()
    if coarse.mesh is fine.mesh:
        vc = coarse.quadrature_values()
    else:
        try:
            vc = coarse.evaluate_at(tab.x.reshape(-1, 2)).reshape(vf.shape)
        except MeshError as exc:
            raise ValueError(f"meshes are not comparable: {exc}") from exc
    d = vf - vc
    return float(np.sqrt(max(np.einsum("nq,nqc,nqc->", tab.dx, d, d), 0.0)))

"""Monte Carlo sampling of random initial data and ensemble evolution.

Every random variable ``Y_j`` of sample ``m`` is drawn from a generator seeded
by ``SeedSequence(base_seed, spawn_key=(m,))``, consumed in the fixed order
``j = 0, 1, ...``.  A sample is therefore a pure function of
``(base_seed, m)`` and the ensemble does not depend on which worker evolved
which member.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .assembly import FormContext
from .mesh import BoundarySpec, Mesh2D, Rectangle, classify_faces
from .solver import Matrices, SolverConfig, SolverError, StepError, evolve, precompute_matrices
from .spaces import (
    FieldCoefficients,
    VelocitySpace,
    build_pressure_space,
    build_velocity_space,
    l2_project_velocity,
    read_field_csv,
    write_field_csv,
)

log = logging.getLogger(__name__)

LID_DRIVEN = "lid_driven_cavity"
CHANNEL = "channel_flow"


class SpecError(ValueError):
    pass


class MonteCarloError(RuntimeError):
    def __init__(self, m: int, cause: Exception):
        step = getattr(cause, "step", None)
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"sample {m} failed{where}: {cause}")
        self.m = m
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class RandomFieldSpec:
    """Law of the random initial data.

    Cavity runs use ``Y_0..Y_K`` (``K`` odd, ``Y_K`` also drives the lid);
    channel runs use ``Y_0..Y_{K+1}`` (``K`` even).
    """

    kind: str
    gamma1: float
    gamma2: float
    K: int
    base_seed: int = 0

    def __post_init__(self):
        if self.kind == LID_DRIVEN:
            if self.K % 2 != 1:
                raise SpecError(f"cavity perturbation needs an odd mode count, got K={self.K}")
        elif self.kind == CHANNEL:
            if self.K % 2 != 0:
                raise SpecError(f"channel perturbation needs an even mode count, got K={self.K}")
        else:
            raise SpecError(f"unknown experiment kind {self.kind!r}")
        if self.K < 0:
            raise SpecError("mode count must be nonnegative")
        if not 0 <= self.base_seed < 2 ** 64:
            raise SpecError("base seed must be a 64-bit unsigned integer")

    @classmethod
    def lid_driven(cls, base_seed: int = 0, gamma1: float = 0.025, gamma2: float = 0.01,
                   K: int = 11) -> "RandomFieldSpec":
        return cls(LID_DRIVEN, gamma1, gamma2, K, base_seed)

    @classmethod
    def channel(cls, base_seed: int = 0, gamma1: float = 0.025, gamma2: float = 0.025,
                K: int = 10) -> "RandomFieldSpec":
        return cls(CHANNEL, gamma1, gamma2, K, base_seed)

    @property
    def n_variables(self) -> int:
        return self.K + 1 if self.kind == LID_DRIVEN else self.K + 2


def _seed_sequence(spec: RandomFieldSpec, m: int) -> np.random.SeedSequence:
    if m < 0:
        raise ValueError("sample index must be nonnegative")
    return np.random.SeedSequence(spec.base_seed, spawn_key=(m,))


def sample_seed(spec: RandomFieldSpec, m: int) -> int:
    """64-bit seed identifying sample ``m`` (recorded in manifests)."""
    return int(_seed_sequence(spec, m).generate_state(1, np.uint64)[0])


def sample_variables(spec: RandomFieldSpec, m: int) -> np.ndarray:
    """The i.i.d. ``U[-1, 1]`` variables ``Y_j`` of sample ``m``."""
    rng = np.random.default_rng(_seed_sequence(spec, m))
    return rng.uniform(-1.0, 1.0, size=spec.n_variables)


# --------------------------------------------------------------------------
# cavity
# --------------------------------------------------------------------------
def cavity_perturbation(spec: RandomFieldSpec, Y: np.ndarray) -> Callable:
    """Coordinate map ``f(x)`` displacing each axis by a random sine series."""
    g1 = spec.gamma1
    modes = np.arange((spec.K - 1) // 2 + 1)
    ye, yo = Y[2 * modes], Y[2 * modes + 1]

    def f(x):
        x = np.atleast_2d(x)
        x1, x2 = x[:, :1], x[:, 1:2]
        d1 = (ye * np.sin(2 * np.pi * modes * (x1 - 0.5 + yo))).sum(axis=1)
        d2 = (yo * np.sin(2 * np.pi * modes * (x2 - 0.5 + ye))).sum(axis=1)
        return np.column_stack([x[:, 0] + g1 * d1, x[:, 1] + g1 * d2])

    return f


def rotation_field(x):
    x = np.atleast_2d(x)
    return np.column_stack([x[:, 1] - 0.5, -(x[:, 0] - 0.5)])


def draw_sample_lid_driven(spec: RandomFieldSpec, m: int, Y: Optional[np.ndarray] = None,
                           lid_tol: float = 1e-10):
    """Initial velocity ``u0 = u_rot o f`` and the Dirichlet data with the random lid."""
    if spec.kind != LID_DRIVEN:
        raise SpecError("spec is not a lid-driven cavity spec")
    Y = sample_variables(spec, m) if Y is None else np.asarray(Y, dtype=float)
    if len(Y) != spec.n_variables:
        raise SpecError(f"expected {spec.n_variables} random variables, got {len(Y)}")
    f = cavity_perturbation(spec, Y)
    lid_speed = 1.0 + spec.gamma2 * np.sin(2 * np.pi * Y[spec.K])

    def u0(x, t=0.0):
        return rotation_field(f(x))

    def boundary(x, t=0.0):
        x = np.atleast_2d(x)
        on_lid = np.abs(x[:, 1] - 1.0) <= lid_tol
        return np.column_stack([np.where(on_lid, lid_speed, 0.0), np.zeros(len(x))])

    boundary.lid_speed = lid_speed
    return u0, boundary


# --------------------------------------------------------------------------
# channel
# --------------------------------------------------------------------------
def channel_perturbation(spec: RandomFieldSpec, Y: np.ndarray) -> Callable:
    modes = np.arange(spec.K // 2 + 1)
    ye, yo = Y[2 * modes], Y[2 * modes + 1]

    def f(x2):
        x2 = np.asarray(x2, dtype=float)[..., None]
        return (ye * np.sin(2 * np.pi * modes * (x2 + yo))).sum(axis=-1)

    return f


def draw_sample_channel(spec: RandomFieldSpec, m: int, Y: Optional[np.ndarray] = None,
                        L: float = 0.5, u_max: float = 1.5, inflow_tol: float = 1e-10):
    """Perturbed parabolic initial velocity and the matching inflow data on ``x1 = 0``."""
    if spec.kind != CHANNEL:
        raise SpecError("spec is not a channel-flow spec")
    Y = sample_variables(spec, m) if Y is None else np.asarray(Y, dtype=float)
    if len(Y) != spec.n_variables:
        raise SpecError(f"expected {spec.n_variables} random variables, got {len(Y)}")
    f = channel_perturbation(spec, Y)

    def u0(x, t=0.0):
        x = np.atleast_2d(x)
        x2 = x[:, 1]
        bump = x2 * (L - x2) / L ** 2
        fx = f(x2)
        return np.column_stack([(1.0 + spec.gamma1 * fx) * 4.0 * u_max * bump, spec.gamma2 * fx * bump])

    def inflow(x, t=0.0):
        x = np.atleast_2d(x)
        on_inlet = (np.abs(x[:, 0]) <= inflow_tol)[:, None]
        return np.where(on_inlet, u0(x), 0.0)

    return u0, inflow


def draw_sample(spec: RandomFieldSpec, m: int, **kw):
    if spec.kind == LID_DRIVEN:
        return draw_sample_lid_driven(spec, m, **kw)
    return draw_sample_channel(spec, m, **kw)


# --------------------------------------------------------------------------
# ensembles
# --------------------------------------------------------------------------
@dataclass
class EnsembleMember:
    m: int
    seed: int
    field: FieldCoefficients


@dataclass
class Ensemble:
    """Final-time fields of ``M`` samples on one mesh, ordered by sample index."""

    space: VelocitySpace
    members: list
    T: float
    spec: Optional[RandomFieldSpec] = None

    def __post_init__(self):
        seeds = [mb.seed for mb in self.members]
        if len(set(seeds)) != len(seeds):
            raise ValueError("ensemble member seeds must be pairwise distinct")
        for mb in self.members:
            if mb.field.space is not self.space:
                raise ValueError("ensemble members must share one space")

    @property
    def mesh(self) -> Mesh2D:
        return self.space.mesh

    def __len__(self) -> int:
        return len(self.members)

    @property
    def M(self) -> int:
        return len(self.members)

    def coefficients(self) -> np.ndarray:
        """Stacked member coefficient vectors, shape ``(M, dim)``."""
        return np.stack([mb.field.values for mb in self.members])

    def subset(self, count: int) -> "Ensemble":
        return Ensemble(self.space, self.members[:count], self.T, self.spec)


@dataclass
class SampleProblem:
    """Everything a worker needs to evolve one sample; cheap to pickle."""

    mesh: Mesh2D
    k: int
    boundary: BoundarySpec
    spec: RandomFieldSpec
    ctx: FormContext
    cfg: SolverConfig
    _work: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_work"] = None
        return state

    def workspace(self) -> tuple:
        if self._work is None:
            fs = classify_faces(self.mesh, self.boundary)
            vs = build_velocity_space(self.mesh, self.k, fs)
            ps = build_pressure_space(self.mesh, self.k, zero_mean=not fs.has_outflow)
            self._work = (vs, ps, precompute_matrices(vs, ps, self.ctx))
        return self._work

    def initial_field(self, m: int) -> tuple[FieldCoefficients, FormContext]:
        vs, _, _ = self.workspace()
        u0, g = draw_sample(self.spec, m)
        ctx = replace(self.ctx, g=g)
        return l2_project_velocity(u0, vs, boundary=g), ctx

    def solve(self, m: int) -> np.ndarray:
        _, _, mats = self.workspace()
        u0h, ctx = self.initial_field(m)
        state = evolve(u0h, ctx, self.cfg, mats)
        return state.u.values


_WORKER_PROBLEM: Optional[SampleProblem] = None


def _worker_init(problem: SampleProblem):
    global _WORKER_PROBLEM
    _WORKER_PROBLEM = problem


def _worker_solve(m: int):
    try:
        return m, _WORKER_PROBLEM.solve(m), None
    except (SolverError, np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
        return m, None, MonteCarloError(m, exc)


def run_monte_carlo(spec: RandomFieldSpec, ctx: FormContext, cfg: SolverConfig, M: int, mesh: Mesh2D,
                    k: int = 1, boundary: Optional[BoundarySpec] = None, workers: int = 1,
                    first_sample: int = 0, progress: Optional[Callable] = None) -> Ensemble:
    """Evolve samples ``first_sample .. first_sample + M - 1`` to ``T = cfg.T``.

    With ``workers > 1`` samples are handed out one at a time to a process
    pool; members are stored by sample index regardless of completion order.
    """
    if M < 1:
        raise ValueError("need at least one sample")
    if workers < 1:
        raise ValueError("worker count must be positive")
    if boundary is None:
        rect = mesh.bounding_box()
        boundary = BoundarySpec.all_dirichlet(rect) if spec.kind == LID_DRIVEN else BoundarySpec.channel(rect)
    problem = SampleProblem(mesh, k, boundary, spec, replace(ctx, g=None), cfg)
    vs, _, _ = problem.workspace()
    indices = list(range(first_sample, first_sample + M))
    results: dict = {}
    if workers == 1:
        for m in indices:
            try:
                results[m] = problem.solve(m)
            except (SolverError, np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
                raise MonteCarloError(m, exc) from exc
            if progress is not None:
                progress(m)
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                 initargs=(problem,)) as pool:
            for m, values, err in pool.map(_worker_solve, indices, chunksize=1):
                if err is not None:
                    raise err
                results[m] = values
                if progress is not None:
                    progress(m)
    members = [EnsembleMember(m, sample_seed(spec, m), FieldCoefficients(vs, results[m], cfg.T))
               for m in indices]
    return Ensemble(vs, members, cfg.T, spec)


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------
def file_checksum(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


MANIFEST_COLUMNS = ["m", "seed", "path", "T", "mesh_checksum"]


def write_ensemble(ens: Ensemble, directory, prefix: str = "member") -> Path:
    """Write one field CSV per member plus ``ensemble.csv``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "ensemble.csv"
    checksum = ens.mesh.checksum()
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for mb in ens.members:
            name = f"{prefix}_{mb.m:05d}.csv"
            write_field_csv(mb.field, directory / name)
            w.writerow([mb.m, mb.seed, name, repr(ens.T), checksum])
    return manifest


def read_ensemble(manifest, space: VelocitySpace) -> Ensemble:
    manifest = Path(manifest)
    members = []
    T = None
    with manifest.open() as fh:
        for row in csv.DictReader(fh):
            if row["mesh_checksum"] != space.mesh.checksum():
                raise ValueError(f"{manifest}: member {row['m']} was computed on a different mesh")
            fieldc = read_field_csv(manifest.parent / row["path"], space)
            fieldc.space = space
            members.append(EnsembleMember(int(row["m"]), int(row["seed"]), fieldc))
            T = float(row["T"])
    if not members:
        raise ValueError(f"{manifest}: empty ensemble")
    return Ensemble(space, members, T)

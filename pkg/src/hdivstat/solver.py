"""Implicit Euler time stepping with a preconditioned GMRES saddle-point solve.

Each step solves the rescaled system

    [ K_FF   B_F^T ] [ u_F ]   [ (M u^{n-1})_F + dt l_F - K_FD u_D ]
    [ B_F    0     ] [ p~  ] = [ -B_D u_D                          ]

with ``K = M + dt (C(u^{n-1}) + nu A)`` and ``p~ = dt p``.  ``F`` are the free
velocity DOFs and ``D`` the Dirichlet normal DOFs, whose values ``u_D`` are
the face moments of the boundary data at ``t_n``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .assembly import (
    FormContext,
    assemble_convection_upwind,
    assemble_divergence,
    assemble_mass,
    assemble_pressure_mass,
    assemble_pressure_moments,
    diffusion_parts,
    rhs_parts,
)
from .spaces import FieldCoefficients, PressureSpace, VelocitySpace

log = logging.getLogger(__name__)

SCHUR_CHOICES = ("augmented", "mass", "simple", "exact")


class SolverError(RuntimeError):
    pass


class NonConvergenceError(SolverError):
    """GMRES hit its iteration limit; carries the final relative residual."""

    def __init__(self, residual: float, iterations: int):
        super().__init__(f"GMRES did not converge in {iterations} iterations "
                         f"(relative residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


class StepError(SolverError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"time step {step} failed: {cause}")
        self.step = step
        self.cause = cause


class PreconditionerSetupError(SolverError):
    pass


@dataclass
class SolverConfig:
    """Time grid and linear-solver settings.  ``T = dt * n_steps``."""

    dt: float
    n_steps: int
    nu: float
    sigma: Optional[float] = None
    tol: float = 1e-10
    restart: int = 50
    max_iter: int = 5000
    zero_mean_pressure: bool = True
    schur: str = "augmented"
    gamma: float = 10.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 0:
            raise ValueError("step count must be nonnegative")
        if not 0 < self.tol < 1:
            raise ValueError("GMRES tolerance must lie in (0, 1)")
        if self.restart < 1 or self.max_iter < 1:
            raise ValueError("restart and max_iter must be at least 1")
        if not self.nu > 0:
            raise ValueError("viscosity must be positive")
        if not self.gamma > 0:
            raise ValueError("augmentation parameter must be positive")
        if self.schur not in SCHUR_CHOICES:
            raise ValueError(f"unknown Schur approximation {self.schur!r}")

    @classmethod
    def from_final_time(cls, T: float, n_steps: int, nu: float, **kw) -> "SolverConfig":
        if n_steps < 1:
            raise ValueError("need at least one step")
        return cls(dt=T / n_steps, n_steps=n_steps, nu=nu, **kw)

    @property
    def T(self) -> float:
        return self.dt * self.n_steps


@dataclass
class Matrices:
    """Time-independent operators, assembled once per mesh."""

    vspace: VelocitySpace
    pspace: PressureSpace
    M: sp.csr_matrix
    A: sp.csr_matrix
    B: sp.csr_matrix
    Mp: sp.csr_matrix
    b: np.ndarray  # pressure moments int q_i
    area: float
    _grad_div: Optional[sp.csr_matrix] = None

    def grad_div(self) -> sp.csr_matrix:
        """``B_F^T Mp^-1 B_F`` on the free velocity DOFs (element-local coupling)."""
        if self._grad_div is None:
            Bf = self.B[:, self.vspace.free_dofs].tocsr()
            Winv = _block_inverse_matrix(self.Mp, self.pspace.nloc)
            self._grad_div = (Bf.T @ Winv @ Bf).tocsr()
        return self._grad_div


def precompute_matrices(vspace: VelocitySpace, pspace: PressureSpace, ctx: FormContext) -> Matrices:
    M = assemble_mass(vspace)
    A = diffusion_parts(vspace).combine(ctx.sigma)
    B = assemble_divergence(vspace, pspace)
    Mp = assemble_pressure_mass(pspace)
    b = assemble_pressure_moments(pspace)
    return Matrices(vspace, pspace, M, A, B, Mp, b, float(b @ pspace.constant(1.0)))


@dataclass
class TrajectoryState:
    n: int
    u: FieldCoefficients
    p: FieldCoefficients  # rescaled pressure dt * p
    iterations: int = 0
    dt: float = 1.0

    @property
    def time(self) -> float:
        return self.u.time

    @property
    def pressure(self) -> np.ndarray:
        return self.p.values / self.dt


@dataclass
class SaddleSystem:
    """Restricted block system on free velocity DOFs and all pressure DOFs."""

    K: sp.csr_matrix           # velocity block on free DOFs
    B: sp.csr_matrix           # divergence rows, free velocity columns
    rhs_u: np.ndarray
    rhs_p: np.ndarray
    u_dirichlet: np.ndarray    # full-length vector holding only Dirichlet values
    free: np.ndarray
    dt: float
    rescaled: bool = True
    mean_area: float = 1.0
    Bt: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        self.Bt = self.B.T.tocsr()
        self.pressure_scale = 1.0 if self.rescaled else self.dt

    @property
    def nu_free(self) -> int:
        return self.K.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        n = self.K.shape[0] + self.B.shape[0]
        return (n, n)

    @property
    def rhs(self) -> np.ndarray:
        return np.concatenate([self.rhs_u, self.rhs_p])

    def matvec(self, x: np.ndarray) -> np.ndarray:
        n = self.nu_free
        u, p = x[:n], x[n:]
        return np.concatenate([self.K @ u + self.pressure_scale * (self.Bt @ p), self.B @ u])

    def matrix(self) -> sp.csr_matrix:
        return sp.bmat([[self.K, self.pressure_scale * self.Bt], [self.B, None]], format="csr")

    def split(self, x: np.ndarray):
        return x[: self.nu_free], x[self.nu_free:]


def dirichlet_values(vspace: VelocitySpace, g: Optional[Callable], t: float) -> np.ndarray:
    if g is None or not len(vspace.dirichlet_dofs):
        return np.zeros(vspace.dim)
    return vspace.interpolate(g, vspace.face_sets.dirichlet, t, include_interior=False)


def velocity_block(mats: Matrices, u_prev: np.ndarray, ctx: FormContext, dt: float) -> sp.csr_matrix:
    C = assemble_convection_upwind(mats.vspace, u_prev)
    return (mats.M + dt * (C + ctx.nu * mats.A)).tocsr()


def build_saddle_system(prev: TrajectoryState, mats: Matrices, ctx: FormContext, cfg: SolverConfig,
                        rescaled: bool = True) -> SaddleSystem:
    """System for step ``prev.n + 1``; ``C`` is assembled from ``prev.u``."""
    vs = mats.vspace
    t_new = prev.time + cfg.dt
    Kfull = velocity_block(mats, prev.u.values, ctx, cfg.dt)
    F, D = vs.free_dofs, vs.dirichlet_dofs
    uD = dirichlet_values(vs, ctx.g, t_new)
    load = rhs_parts(vs, ctx, t_new).combine(ctx.sigma)
    ru = mats.M @ prev.u.values + cfg.dt * load - Kfull[:, D] @ uD[D]
    Bf = mats.B[:, F].tocsr()
    rp = -(mats.B[:, D] @ uD[D])
    return SaddleSystem(K=Kfull[F][:, F].tocsr(), B=Bf, rhs_u=ru[F], rhs_p=rp,
                        u_dirichlet=uD, free=F, dt=cfg.dt, rescaled=rescaled,
                        mean_area=mats.area / vs.mesh.n_elements)


# --------------------------------------------------------------------------
# GMRES
# --------------------------------------------------------------------------
@dataclass
class GMRESResult:
    x: np.ndarray
    iterations: int
    residuals: list  # relative residual estimates, one per inner iteration (plus the start)
    converged: bool


def gmres(matvec: Callable, b: np.ndarray, precond: Optional[Callable] = None, x0=None,
          tol: float = 1e-10, restart: int = 50, max_iter: int = 5000) -> GMRESResult:
    """Restarted right-preconditioned GMRES with Givens rotations.

    Stops when ``||b - A x|| <= tol ||b||``.  Raises NonConvergenceError after
    ``max_iter`` inner iterations.
    """
    b = np.asarray(b, dtype=float)
    n = len(b)
    P = precond if precond is not None else (lambda v: v)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return GMRESResult(np.zeros(n), 0, [0.0], True)
    m = min(restart, n)
    its = 0
    hist: list = []
    while True:
        r = b - matvec(x)
        beta = np.linalg.norm(r)
        if not hist:
            hist.append(beta / bnorm)
        if beta <= tol * bnorm:
            return GMRESResult(x, its, hist, True)
        if its >= max_iter:
            raise NonConvergenceError(beta / bnorm, its)
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        V[0] = r / beta
        g[0] = beta
        j = -1
        for j in range(m):
            w = matvec(P(V[j]))
            its += 1
            for i in range(j + 1):  # modified Gram-Schmidt
                H[i, j] = V[i] @ w
                w = w - H[i, j] * V[i]
            H[j + 1, j] = np.linalg.norm(w)
            if H[j + 1, j] > 0:
                V[j + 1] = w / H[j + 1, j]
            for i in range(j):
                tmp = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = tmp
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                cs[j], sn[j] = 1.0, 0.0
            else:
                cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            res = abs(g[j + 1])
            hist.append(res / bnorm)
            if res <= tol * bnorm or its >= max_iter or denom == 0.0:
                break
        k = j + 1
        y = scipy.linalg.solve_triangular(H[:k, :k], g[:k]) if np.all(np.diag(H[:k, :k]) != 0) \
            else np.linalg.lstsq(H[:k, :k], g[:k], rcond=None)[0]
        x = x + P(V[:k].T @ y)


# --------------------------------------------------------------------------
# preconditioning
# --------------------------------------------------------------------------
def pressure_mean_projector(pspace: PressureSpace, mats: Optional[Matrices] = None,
                            has_outflow: bool = False) -> Callable:
    """``q -> q - (int q / |D|) * 1``, i.e. ``I - |D|^-1 Mp^-1 b b^T``."""
    if has_outflow:
        raise ValueError("pressure is already pinned by the outflow boundary; "
                         "the zero-mean projector does not apply")
    b = mats.b if mats is not None else assemble_pressure_moments(pspace)
    one = pspace.constant(1.0)
    area = float(b @ one)

    def project(q: np.ndarray) -> np.ndarray:
        return q - (b @ q / area) * one

    return project


class BlockTriangularPreconditioner:
    """Inverse of ``[A_hat, B^T; 0, -S_hat]`` applied to ``(r_u, r_p)``."""

    def __init__(self, solve_a: Callable, solve_s: Callable, Bt: sp.csr_matrix, n_u: int,
                 projector: Optional[Callable] = None, pressure_scale: float = 1.0):
        self.solve_a = solve_a
        self.solve_s = solve_s
        self.Bt = Bt
        self.n_u = n_u
        self.projector = projector
        self.pressure_scale = pressure_scale

    def __call__(self, r: np.ndarray) -> np.ndarray:
        ru, rp = r[: self.n_u], r[self.n_u:]
        yp = -self.solve_s(rp)
        if self.projector is not None:
            yp = self.projector(yp)
        yu = self.solve_a(ru - self.pressure_scale * (self.Bt @ yp))
        return np.concatenate([yu, yp])


def _element_blocks_inverse(Mp: sp.csr_matrix, nloc: int) -> np.ndarray:
    n = Mp.shape[0] // nloc
    dense = np.zeros((n, nloc, nloc))
    coo = Mp.tocoo()
    e = coo.row // nloc
    if np.any(coo.col // nloc != e):
        raise PreconditionerSetupError("pressure mass matrix is not element-block diagonal")
    dense[e, coo.row % nloc, coo.col % nloc] = coo.data
    return np.linalg.inv(dense)


def _block_inverse_matrix(Mp: sp.csr_matrix, nloc: int) -> sp.csr_matrix:
    return sp.block_diag(list(_element_blocks_inverse(Mp, nloc)), format="csr")


def _block_inverse(Mp: sp.csr_matrix, nloc: int) -> Callable:
    """Exact inverse of the element-block-diagonal pressure mass matrix."""
    inv = _element_blocks_inverse(Mp, nloc)
    n = len(inv)

    def apply(v: np.ndarray) -> np.ndarray:
        return np.einsum("nij,nj->ni", inv, v.reshape(n, nloc)).ravel()

    return apply


def factorize(K: sp.spmatrix):
    """Sparse LU tuned for the structurally symmetric, mass-dominated velocity block."""
    return splu(K.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1,
                options=dict(SymmetricMode=True))


def block_triangular_preconditioner(system: SaddleSystem, mats: Matrices, cfg: SolverConfig,
                                    ctx: Optional[FormContext] = None, schur: Optional[str] = None,
                                    projector: Optional[Callable] = None) -> BlockTriangularPreconditioner:
    """Block upper-triangular preconditioner with ``A_hat = LU(K_FF)``.

    ``schur`` selects ``S_hat``:

    * ``"augmented"`` ``A_hat = LU(K_FF + gamma B^T Mp^-1 B)`` and
      ``S_hat^-1 = (gamma + dt nu) Mp^-1`` (the default);
    * ``"mass"``   ``S_hat^-1 = (dt nu + h^2) Mp^-1``;
    * ``"simple"`` ``S_hat = B diag(K)^-1 B^T`` (plus a small mass shift);
    * ``"exact"``  dense ``B K^-1 B^T`` (small systems only).
    """
    schur = schur or cfg.schur
    nu = ctx.nu if ctx is not None else cfg.nu
    ps = system.pressure_scale
    area = mats.area
    Ahat = system.K
    if schur == "augmented":
        Ahat = system.K + (cfg.gamma * ps) * mats.grad_div()
    try:
        lu = factorize(Ahat)
    except RuntimeError as exc:
        raise PreconditionerSetupError(f"velocity block is singular: {exc}") from exc
    if schur == "augmented":
        minv = _block_inverse(mats.Mp, mats.pspace.nloc)
        scale = cfg.gamma + cfg.dt * nu

        def solve_s(r):
            return scale * minv(r)
    elif schur == "mass":
        h = mats.vspace.mesh.h
        minv = _block_inverse(mats.Mp, mats.pspace.nloc)
        scale = cfg.dt * nu + h * h

        def solve_s(r):
            return scale * minv(r)
    elif schur == "simple":
        dinv = sp.diags(1.0 / system.K.diagonal())
        S = (system.B @ dinv @ system.Bt) * ps
        shift = 1e-8 * abs(S).max() / max(abs(mats.Mp).max(), 1e-300)
        try:
            slu = splu((S + shift * mats.Mp).tocsc())
        except RuntimeError as exc:
            raise PreconditionerSetupError(f"Schur approximation is singular: {exc}") from exc
        if projector is not None:
            # S annihilates constant pressures; keep the right-hand side in its range so the
            # tiny shift does not blow up the constant mode
            one = mats.pspace.constant(1.0)
            one = one / np.linalg.norm(one)

            def solve_s(r):
                return slu.solve(r - (one @ r) * one)
        else:
            solve_s = slu.solve
    elif schur == "exact":
        Kinv_Bt = lu.solve(system.Bt.toarray())
        S = ps * (system.B @ Kinv_Bt)
        if projector is not None:
            S = S + np.outer(mats.b, mats.b) / area
        try:
            factor = scipy.linalg.lu_factor(S)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise PreconditionerSetupError(f"Schur complement is singular: {exc}") from exc
        if not np.all(np.isfinite(factor[0])) or np.min(np.abs(np.diag(factor[0]))) == 0:
            raise PreconditionerSetupError("Schur complement is singular")

        def solve_s(r):
            return scipy.linalg.lu_solve(factor, r)
    else:
        raise ValueError(f"unknown Schur approximation {schur!r}")
    return BlockTriangularPreconditioner(lu.solve, solve_s, system.Bt, system.nu_free, projector, ps)


def gmres_solve(system: SaddleSystem, precond: Optional[Callable], cfg: SolverConfig, x0=None,
                constraint_scale: Optional[float] = None):
    """Solve the saddle system; returns ``(u_free, p, iterations, residual history)``.

    The constraint rows are multiplied by ``constraint_scale`` (default: one
    over the mean element area) so that the stopping test controls the
    elementwise divergence and not only the much larger momentum residual.
    The solution is unchanged; the preconditioner is rescaled to match.
    """
    n = system.nu_free
    s = constraint_scale
    if s is None:
        s = 1.0 / system.mean_area
    scale = np.ones(system.shape[0])
    scale[n:] = s

    def matvec(x):
        return system.matvec(x) * scale

    pre = None if precond is None else (lambda r: precond(r / scale))
    res = gmres(matvec, system.rhs * scale, pre, x0=x0, tol=cfg.tol, restart=cfg.restart,
                max_iter=cfg.max_iter)
    u, p = system.split(res.x)
    return u, p, res.iterations, res.residuals


# --------------------------------------------------------------------------
# time stepping
# --------------------------------------------------------------------------
def divergence_at_quadrature(vspace: VelocitySpace, coeffs: np.ndarray) -> np.ndarray:
    return np.einsum("nl,nql->nq", coeffs[vspace.element_dofs], vspace.volume.div)


def l2_norm(mats: Matrices, coeffs: np.ndarray) -> float:
    return float(np.sqrt(max(coeffs @ (mats.M @ coeffs), 0.0)))


def initial_state(u0: FieldCoefficients, pspace: PressureSpace, dt: float = 1.0) -> TrajectoryState:
    return TrajectoryState(0, u0.copy(), FieldCoefficients(pspace, np.zeros(pspace.dim), u0.time), 0, dt)


def _uses_projector(mats: Matrices, cfg: SolverConfig) -> bool:
    return cfg.zero_mean_pressure and not mats.vspace.face_sets.has_outflow


def step_implicit_euler(state: TrajectoryState, mats: Matrices, ctx: FormContext,
                        cfg: SolverConfig) -> TrajectoryState:
    """One implicit Euler step with the convection field lagged at ``u^{n-1}``."""
    system = build_saddle_system(state, mats, ctx, cfg)
    proj = pressure_mean_projector(mats.pspace, mats) if _uses_projector(mats, cfg) else None
    pre = block_triangular_preconditioner(system, mats, cfg, ctx, projector=proj)
    uf, p, its, _ = gmres_solve(system, pre, cfg)
    if proj is not None:
        p = proj(p)
    u = system.u_dirichlet.copy()
    u[system.free] = uf
    t = state.time + cfg.dt
    return TrajectoryState(state.n + 1, FieldCoefficients(mats.vspace, u, t),
                           FieldCoefficients(mats.pspace, p, t), state.iterations + its, cfg.dt)


@dataclass
class StepDiagnostics:
    step: int
    time: float
    l2: float
    max_div: float
    iterations: int


def evolve(u0: FieldCoefficients, ctx: FormContext, cfg: SolverConfig, mats: Optional[Matrices] = None,
           pspace: Optional[PressureSpace] = None, callback: Optional[Callable] = None,
           diagnostics: Optional[list] = None) -> TrajectoryState:
    """Advance ``u0`` through ``cfg.n_steps`` implicit Euler steps.

    ``callback(state)`` is invoked after every accepted step.  When
    ``diagnostics`` is a list, one StepDiagnostics row per step is appended.
    """
    if mats is None:
        from .spaces import build_pressure_space

        vs = u0.space
        pspace = pspace or build_pressure_space(vs.mesh, vs.k)
        mats = precompute_matrices(vs, pspace, ctx)
    state = initial_state(u0, mats.pspace, cfg.dt)
    for n in range(1, cfg.n_steps + 1):
        prev_its = state.iterations
        try:
            state = step_implicit_euler(state, mats, ctx, cfg)
        except SolverError as exc:
            raise StepError(n, exc) from exc
        if diagnostics is not None:
            div = divergence_at_quadrature(mats.vspace, state.u.values)
            diagnostics.append(StepDiagnostics(n, state.time, l2_norm(mats, state.u.values),
                                               float(np.abs(div).max()), state.iterations - prev_its))
        if callback is not None:
            callback(state)
        log.debug("step %d: t=%g, GMRES iterations %d", n, state.time, state.iterations - prev_its)
    return state


def write_diagnostics_csv(rows: list, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "time", "l2_norm", "max_div", "gmres_iterations"])
        for r in rows:
            w.writerow([r.step, repr(r.time), repr(r.l2), repr(r.max_div), r.iterations])

"""Acceptance criteria 1-10, one test each, at the stated tolerances."""
import itertools
import time

import numpy as np
import pytest
from conftest import make_spaces, stream_velocity

from hdivstat.assembly import FormContext, default_penalty
from hdivstat.cli import fit_slope, run_experiment
from hdivstat.config import preset
from hdivstat.mc import (
    Ensemble,
    EnsembleMember,
    RandomFieldSpec,
    SampleProblem,
    draw_sample_channel,
    run_monte_carlo,
)
from hdivstat.mesh import BoundarySpec, Rectangle, generate_uniform_quad_mesh, generate_uniform_tri_mesh
from hdivstat.observables import (
    cauchy_error,
    element_average,
    ensemble_mean,
    grid_size,
    make_hash_table,
    structure_function_ensemble,
    structure_function_of_sample,
    structure_functions,
    update_hash_table,
    wasserstein_distances,
)
from hdivstat.observables.wasserstein import emd
from hdivstat.solver import (
    SolverConfig,
    block_triangular_preconditioner,
    build_saddle_system,
    divergence_at_quadrature,
    evolve,
    gmres_solve,
    initial_state,
    l2_norm,
    precompute_matrices,
    pressure_mean_projector,
)
from hdivstat.spaces import FieldCoefficients, l2_project_velocity


def _l2_error(space, coeffs, exact, t):
    tab = space.volume
    ne, nq = tab.dx.shape
    uh = space.evaluate(coeffs, np.repeat(np.arange(ne), nq), np.tile(tab.ref_points, (ne, 1)))
    ue = exact(tab.x.reshape(-1, 2), t)
    d = (uh - ue).reshape(ne, nq, 2)
    return float(np.sqrt(np.einsum("nq,nqc,nqc->", tab.dx, d, d)))


# --------------------------------------------------------------------------
# 1. divergence-free invariant
# --------------------------------------------------------------------------
@pytest.mark.criterion(1, "divergence free after every step (cavity desk preset)")
def test_divergence_free_every_step():
    start = time.perf_counter()
    cfg = preset("cavity-desk")
    assert (cfg.resolution, cfg.k, cfg.n_steps, cfg.M) == (16, 1, 20, 4)
    mesh = generate_uniform_quad_mesh(cfg.resolution, cfg.resolution)
    ctx = FormContext(nu=cfg.nu, sigma=default_penalty(cfg.k))
    scfg = SolverConfig.from_final_time(cfg.T, cfg.n_steps, cfg.nu)
    problem = SampleProblem(mesh, cfg.k, BoundarySpec.all_dirichlet(mesh.bounding_box()),
                            RandomFieldSpec.lid_driven(cfg.base_seed), ctx, scfg)
    vs, _, mats = problem.workspace()
    worst = 0.0
    for m in range(cfg.M):
        u0, ctx_m = problem.initial_field(m)
        rows = []

        def check(state):
            div = np.abs(divergence_at_quadrature(vs, state.u.values)).max()
            rows.append(div / l2_norm(mats, state.u.values))

        evolve(u0, ctx_m, scfg, mats, callback=check)
        assert len(rows) == cfg.n_steps
        worst = max(worst, max(rows))
    assert worst <= 1e-8, f"max |div u| / ||u|| = {worst:.3e}"
    assert time.perf_counter() - start <= 120


# --------------------------------------------------------------------------
# 2. L2 stability
# --------------------------------------------------------------------------
@pytest.mark.criterion(2, "L2 norm nonincreasing with f = 0 and g = 0")
def test_l2_stability():
    start = time.perf_counter()
    mesh, vs, ps = make_spaces(8, 1)
    ctx = FormContext(nu=1.0 / 3200.0, sigma=default_penalty(1))
    mats = precompute_matrices(vs, ps, ctx)
    c = np.random.default_rng(3).normal(size=(4, 4)) / 4.0
    u0 = FieldCoefficients(vs, vs.interpolate(stream_velocity(c)), 0.0)
    cfg = SolverConfig.from_final_time(1.0, 50, ctx.nu)
    norms = [l2_norm(mats, u0.values)]
    evolve(u0, ctx, cfg, mats, callback=lambda s: norms.append(l2_norm(mats, s.u.values)))
    norms = np.array(norms)
    assert len(norms) == 51
    growth = norms[1:] - norms[:-1] * (1.0 + 1e-10)
    assert np.all(growth <= 0.0), f"largest growth {growth.max():.3e}"
    assert norms[-1] < norms[0]
    assert time.perf_counter() - start <= 60


# --------------------------------------------------------------------------
# 3. deterministic convergence on a manufactured solution
# --------------------------------------------------------------------------
class Manufactured:
    """``u = cos(w t) curl(sin^2(pi x) sin^2(pi y))``, ``p = cos(w t) cos(pi x) cos(pi y)``."""

    def __init__(self, nu, w):
        self.nu, self.w = nu, w

    @staticmethod
    def _factors(s):
        pi = np.pi
        return (np.sin(pi * s) ** 2, pi * np.sin(2 * pi * s), 2 * pi ** 2 * np.cos(2 * pi * s),
                -4 * pi ** 3 * np.sin(2 * pi * s))

    def velocity(self, x, t=0.0):
        x = np.atleast_2d(x)
        a, a1, _, _ = self._factors(x[:, 0])
        b, b1, _, _ = self._factors(x[:, 1])
        return np.cos(self.w * t) * np.column_stack([a * b1, -a1 * b])

    def forcing(self, x, t=0.0):
        x = np.atleast_2d(x)
        pi = np.pi
        a, a1, a2, a3 = self._factors(x[:, 0])
        b, b1, b2, b3 = self._factors(x[:, 1])
        ph, dph = np.cos(self.w * t), -self.w * np.sin(self.w * t)
        u1, u2 = ph * a * b1, -ph * a1 * b
        conv1 = u1 * ph * a1 * b1 + u2 * ph * a * b2
        conv2 = -u1 * ph * a2 * b - u2 * ph * a1 * b1
        lap1, lap2 = ph * (a2 * b1 + a * b3), -ph * (a3 * b + a1 * b2)
        px = -pi * ph * np.sin(pi * x[:, 0]) * np.cos(pi * x[:, 1])
        py = -pi * ph * np.cos(pi * x[:, 0]) * np.sin(pi * x[:, 1])
        return np.column_stack([dph * a * b1 + conv1 - self.nu * lap1 + px,
                                -dph * a1 * b + conv2 - self.nu * lap2 + py])

    def error(self, n, n_steps, T):
        _, vs, ps = make_spaces(n, 1)
        ctx = FormContext(nu=self.nu, sigma=default_penalty(1), f=self.forcing)
        mats = precompute_matrices(vs, ps, ctx)
        u0 = FieldCoefficients(vs, vs.interpolate(self.velocity), 0.0)
        state = evolve(u0, ctx, SolverConfig.from_final_time(T, n_steps, self.nu), mats)
        return _l2_error(vs, state.u.values, self.velocity, T)


@pytest.mark.criterion(3, "manufactured solution: space rate >= 1.7, time rate >= 0.8")
def test_manufactured_convergence():
    start = time.perf_counter()
    sol = Manufactured(nu=0.1, w=2.0)
    T = 0.1
    ns = [4, 8, 16, 32]
    space_err = [sol.error(n, int(np.ceil(T * n * n)), T) for n in ns]  # dt <= h^2
    space_rate = fit_slope([1.0 / n for n in ns], space_err)
    assert space_rate >= 1.7, f"spatial rate {space_rate:.3f}, errors {space_err}"

    sol = Manufactured(nu=0.1, w=2.0 * np.pi)
    steps = [8, 16, 32, 64]
    time_err = [sol.error(32, s, 1.0) for s in steps]
    time_rate = fit_slope([1.0 / s for s in steps], time_err)
    assert time_rate >= 0.8, f"temporal rate {time_rate:.3f}, errors {time_err}"
    assert time.perf_counter() - start <= 600


# --------------------------------------------------------------------------
# 4. structure-function oracle
# --------------------------------------------------------------------------
def brute_force_structure(domain, mesh, nx, ny, avg, r, p):
    """All-pairs double loop with the box test, over elements hashed to interior cells."""
    cen, area = mesh.centroids, mesh.element_areas
    i = np.floor(nx * (cen[:, 0] - domain.x1_left) / domain.width).astype(int)
    j = np.floor(ny * (cen[:, 1] - domain.x2_left) / domain.height).astype(int)
    total = 0.0
    for a in range(mesh.n_elements):
        if not (1 <= i[a] <= nx - 2 and 1 <= j[a] <= ny - 2):
            continue
        num = den = 0.0
        for b in range(mesh.n_elements):
            if abs(cen[a, 0] - cen[b, 0]) <= r and abs(cen[a, 1] - cen[b, 1]) <= r:
                num += area[b] * (abs(avg[a, 0] - avg[b, 0]) ** p + abs(avg[a, 1] - avg[b, 1]) ** p)
                den += area[b]
        total += area[a] * num / den
    return total


def _oracle_meshes():
    rng = np.random.default_rng(5)
    jittered = generate_uniform_tri_mesh(9, 9)
    v = jittered.vertices.copy()
    inner = (v[:, 0] > 0) & (v[:, 0] < 1) & (v[:, 1] > 0) & (v[:, 1] < 1)
    v[inner] += rng.uniform(-0.03, 0.03, size=(inner.sum(), 2))
    from hdivstat.mesh import Mesh2D

    return {
        "quad4": generate_uniform_quad_mesh(4, 4),
        "quad10": generate_uniform_quad_mesh(10, 10),
        "tri8": generate_uniform_tri_mesh(8, 8),
        "tri_jitter": Mesh2D(v, jittered.elements),
        "rect_quad": generate_uniform_quad_mesh(14, 7, Rectangle(0.0, 1.5, 0.0, 0.5)),
    }


@pytest.mark.criterion(4, "structure functions equal the brute-force all-pairs oracle")
def test_structure_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    for name, mesh in _oracle_meshes().items():
        assert mesh.n_elements <= 200
        domain = mesh.bounding_box()
        side = min(domain.width, domain.height)
        fields = [rng.normal(size=(mesh.n_elements, 2)) for _ in range(3)]
        for r in (0.09 * side, 0.17 * side, 0.3 * side):
            nx, ny = grid_size(domain, r)
            grid = make_hash_table(domain, mesh, nx, ny)
            for p in (1.0, 2.0, 3.0):
                oracle = [brute_force_structure(domain, mesh, nx, ny, f, r, p) for f in fields]
                for f, ref in zip(fields, oracle):
                    got = structure_function_of_sample(update_hash_table(grid, f), r, p)
                    assert got == pytest.approx(ref, rel=1e-12, abs=0), (name, r, p)
                ens = structure_function_ensemble(domain, mesh, nx, ny, fields, r, p)
                assert ens == pytest.approx((np.mean(oracle)) ** (1.0 / p), rel=1e-12, abs=0), (name, r, p)
    assert time.perf_counter() - start <= 60


# --------------------------------------------------------------------------
# 5. structure-function scaling
# --------------------------------------------------------------------------
def smooth_random_field(rng, modes=3):
    A = rng.normal(size=(modes, modes, 2))
    ph = rng.uniform(0.0, 2.0 * np.pi, size=(modes, modes, 2))

    def u(x, t=0.0):
        x = np.atleast_2d(x)
        out = np.zeros((len(x), 2))
        for i in range(modes):
            for j in range(modes):
                arg = 2.0 * np.pi * (i * x[:, :1] + j * x[:, 1:2]) + ph[i, j]
                out += A[i, j] / (1.0 + i * i + j * j) * np.sin(arg)
        return out

    return u


@pytest.mark.criterion(5, "structure-function log-log slope in [0.7, 1.05] on 64x64")
def test_structure_scaling():
    start = time.perf_counter()
    n = 64
    mesh, vs, _ = make_spaces(n, 1)
    rng = np.random.default_rng(2024)
    coeffs = np.array([vs.interpolate(smooth_random_field(rng)) for _ in range(8)])
    avg = element_average((vs, coeffs))
    h = 1.0 / n
    offsets = [1.5 * h * 2 ** j for j in range(4)]
    for res in structure_functions(mesh.bounding_box(), mesh, list(avg), offsets, [1.0, 2.0, 3.0]):
        slope = fit_slope(res.r, res.values)
        assert 0.7 <= slope <= 1.05, f"p={res.p}: slope {slope:.3f}"
    assert time.perf_counter() - start <= 180


# --------------------------------------------------------------------------
# 6. Wasserstein oracle and metric properties
# --------------------------------------------------------------------------
def _ensemble(space, coeffs, first_seed=0):
    members = [EnsembleMember(m, first_seed + m, FieldCoefficients(space, c, 1.0)) for m, c in enumerate(coeffs)]
    return Ensemble(space, members, 1.0)


@pytest.mark.criterion(6, "exact EMD matches enumeration; W1(A, A) = 0; triangle inequality")
def test_wasserstein_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    for M in (1, 2, 3, 4):
        for dim in (1, 2, 4):
            for _ in range(10):
                a, b = rng.normal(size=(M, dim)), rng.normal(size=(M, dim))
                best = min(np.linalg.norm(a - b[list(s)], axis=1).sum() / M
                           for s in itertools.permutations(range(M)))
                assert emd(a, b) == pytest.approx(best, rel=1e-12, abs=1e-15)

    _, vs, _ = make_spaces(3, 1)
    ens = [_ensemble(vs, rng.normal(size=(3, vs.dim)), first_seed=10 * i) for i in range(60)]
    same = wasserstein_distances(ens[0], ens[0], n_grid=8, n_pairs=32)
    assert same.w1 == 0.0 and same.w2 == 0.0
    for t in range(20):
        A, B, C = ens[3 * t], ens[3 * t + 1], ens[3 * t + 2]
        kw = dict(n_grid=8, n_pairs=32, seed=t)
        ab, bc, ac = (wasserstein_distances(X, Y, **kw) for X, Y in ((A, B), (B, C), (A, C)))
        assert ac.w1 <= ab.w1 + bc.w1 + 1e-10
        assert ac.w2 <= ab.w2 + bc.w2 + 1e-10
    assert time.perf_counter() - start <= 60


# --------------------------------------------------------------------------
# 7. Monte Carlo rate
# --------------------------------------------------------------------------
@pytest.mark.criterion(7, "Monte Carlo RMS error of the mean decays like M^-1/2")
def test_monte_carlo_rate():
    start = time.perf_counter()
    L, length, u_max = 0.5, 1.5, 1.5
    xg, wg = np.polynomial.legendre.leggauss(40)
    x2 = 0.5 * L * (xg + 1.0)
    pts = np.column_stack([np.zeros_like(x2), x2])
    weights = 0.5 * L * wg * length  # u0 does not depend on x1

    def observable(spec, m):
        u0, _ = draw_sample_channel(spec, m, L=L, u_max=u_max)
        return float(weights @ u0(pts)[:, 0])

    exact = length * 4.0 * u_max * L / 6.0  # the perturbation has zero mean
    Ms = [4, 16, 64, 256]
    rms = []
    for M in Ms:
        errs = []
        for rep in range(64):
            spec = RandomFieldSpec.channel(base_seed=1000 * M + rep)
            errs.append(np.mean([observable(spec, m) for m in range(M)]) - exact)
        rms.append(float(np.sqrt(np.mean(np.square(errs)))))
    slope = fit_slope(Ms, rms)
    assert -0.65 <= slope <= -0.35, f"slope {slope:.3f}, rms {rms}"
    assert time.perf_counter() - start <= 120


# --------------------------------------------------------------------------
# 8. desk-scale convergence trend
# --------------------------------------------------------------------------
@pytest.mark.criterion(8, "cavity Cauchy errors and W1 decrease over 8, 16, 32")
def test_desk_convergence_trend():
    start = time.perf_counter()
    levels = [(8, 25, 4), (16, 50, 8), (32, 100, 16)]
    spec = RandomFieldSpec.lid_driven(base_seed=0)
    nu = 1.0 / 3200.0
    ens = []
    for n, steps, M in levels:
        mesh = generate_uniform_quad_mesh(n, n)
        ctx = FormContext(nu=nu, sigma=default_penalty(1))
        cfg = SolverConfig.from_final_time(1.0, steps, nu)
        ens.append(run_monte_carlo(spec, ctx, cfg, M, mesh, k=1))
    cauchy = [cauchy_error(ensemble_mean(a), ensemble_mean(b)) for a, b in zip(ens, ens[1:])]
    w1 = [wasserstein_distances(a, b).w1 for a, b in zip(ens, ens[1:])]
    assert cauchy[1] < cauchy[0], f"mean Cauchy errors {cauchy}"
    assert w1[1] < w1[0], f"W1 distances {w1}"
    assert time.perf_counter() - start <= 1200


# --------------------------------------------------------------------------
# 9. preconditioner effectiveness
# --------------------------------------------------------------------------
@pytest.mark.criterion(9, "preconditioned GMRES beats unpreconditioned; exact blocks <= 3 iterations")
def test_preconditioner_effectiveness():
    start = time.perf_counter()
    mesh, vs, ps = make_spaces(6, 1)
    spec = RandomFieldSpec.lid_driven(base_seed=0)
    from hdivstat.mc import draw_sample_lid_driven

    u0, g = draw_sample_lid_driven(spec, 0)
    ctx = FormContext(nu=1.0 / 3200.0, sigma=default_penalty(1), g=g)
    mats = precompute_matrices(vs, ps, ctx)
    cfg = SolverConfig.from_final_time(1.0, 19, ctx.nu, tol=1e-10, restart=600, max_iter=600)
    state = initial_state(l2_project_velocity(u0, vs, boundary=g), ps, cfg.dt)
    system = build_saddle_system(state, mats, ctx, cfg)
    assert system.shape[0] <= 500
    proj = pressure_mean_projector(ps, mats)
    _, _, its_none, _ = gmres_solve(system, None, cfg)
    _, _, its_pre, _ = gmres_solve(system, block_triangular_preconditioner(system, mats, cfg, ctx,
                                                                           projector=proj), cfg)
    _, _, its_exact, _ = gmres_solve(system, block_triangular_preconditioner(system, mats, cfg, ctx, schur="exact",
                                                                             projector=proj), cfg)
    assert its_pre < its_none, (its_pre, its_none)
    assert its_exact <= 3, its_exact
    assert time.perf_counter() - start <= 60


# --------------------------------------------------------------------------
# 10. reproducibility
# --------------------------------------------------------------------------
@pytest.mark.criterion(10, "identical configs give byte-identical statistics for any worker count")
def test_reproducible_runs(tmp_path):
    start = time.perf_counter()
    outputs = []
    for workers, name in ((1, "a"), (2, "b")):
        cfg = preset("cavity-desk", output=str(tmp_path / name), workers=workers)
        run_experiment(cfg)
        outputs.append(tmp_path / name)
    for fname in ("stats.csv", "stats_elements.csv", "structure.csv", "mean.csv"):
        assert (outputs[0] / fname).read_bytes() == (outputs[1] / fname).read_bytes(), fname
    assert time.perf_counter() - start <= 300

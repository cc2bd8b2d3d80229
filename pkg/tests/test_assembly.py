import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp

from conftest import make_spaces, stream_velocity
from hdivstat.assembly import (
    FormContext,
    assemble_convection_upwind,
    assemble_diffusion_sip,
    assemble_divergence,
    assemble_mass,
    assemble_rhs,
    coo_merge,
    default_penalty,
    diffusion_parts,
    export_matrix_market,
    rhs_parts,
)
from hdivstat.mesh import BoundaryRule, BoundarySpec, FaceSets, Mesh2D, classify_faces, generate_uniform_quad_mesh
from hdivstat.quadrature import element_rule, gauss_interval
from hdivstat.solver import SolverConfig, build_saddle_system, initial_state, precompute_matrices
from hdivstat.spaces import FieldCoefficients, build_pressure_space, build_velocity_space


def bubble_velocity(x, t=0.0):
    """curl of sin^2(pi x) sin^2(pi y): vanishes on the whole boundary of the unit square."""
    x = np.atleast_2d(x)
    s1, s2 = np.sin(np.pi * x[:, 0]), np.sin(np.pi * x[:, 1])
    c1, c2 = np.cos(np.pi * x[:, 0]), np.cos(np.pi * x[:, 1])
    return np.pi * np.column_stack([2 * s1 ** 2 * s2 * c2, -2 * s1 * c1 * s2 ** 2])


def all_outflow(mesh):
    rect = mesh.bounding_box()
    return classify_faces(mesh, BoundarySpec(rect, tuple(BoundaryRule(s, "outflow")
                                                         for s in ("left", "right", "bottom", "top"))))


# -------------------------------------------------------------------- context
def test_form_context_rejects_nonpositive():
    with pytest.raises(ValueError):
        FormContext(nu=0.0, sigma=1.0)
    with pytest.raises(ValueError):
        FormContext(nu=1.0, sigma=-1.0)
    assert default_penalty(0) == 10.0 and default_penalty(1) == 40.0


# ----------------------------------------------------------------------- mass
@pytest.mark.parametrize("cell", ["quad", "tri"])
def test_mass_is_symmetric_positive_definite(cell, rng):
    _, vs, _ = make_spaces(3, k=1, cell=cell)
    M = assemble_mass(vs)
    assert abs(M - M.T).max() == 0
    for _ in range(100):
        v = rng.standard_normal(vs.dim)
        assert v @ M @ v > 0


def test_mass_matches_direct_quadrature(rng):
    _, vs, _ = make_spaces(3, k=1)
    c = rng.standard_normal(vs.dim)
    rule = element_rule("quadrilateral", 12)
    total = 0.0
    for e in range(vs.mesh.n_elements):
        u = vs.evaluate_local(c, e, rule.points)
        tab = vs.tabulate(np.array([e]), rule.points, gradients=False)
        total += np.sum(rule.weights * tab["det"][0] * np.sum(u * u, axis=1))
    assert c @ assemble_mass(vs) @ c == pytest.approx(total, rel=1e-12)


# ----------------------------------------------------------------- convection
def test_convection_with_zero_wind_is_zero():
    _, vs, _ = make_spaces(3, k=1)
    assert abs(assemble_convection_upwind(vs, np.zeros(vs.dim))).max() == 0


def test_convection_is_linear_up_to_the_upwind_penalty(rng):
    # |w.n| makes the penalty only positively homogeneous; the odd part C(w) - C(-w) is linear
    _, vs, _ = make_spaces(3, k=1, cell="tri")
    a, b = rng.standard_normal((2, vs.dim))

    def odd(w):
        return assemble_convection_upwind(vs, w) - assemble_convection_upwind(vs, -w)

    scale = abs(odd(a)).max()
    assert abs(odd(a + b) - odd(a) - odd(b)).max() <= 1e-12 * scale
    assert abs(assemble_convection_upwind(vs, 2.5 * a) - 2.5 * assemble_convection_upwind(vs, a)).max() \
        <= 1e-12 * scale


def brute_force_convection(vs, w):
    """Independent element and face loops with mesh-level reference inversion."""
    mesh = vs.mesh
    n = vs.dim
    C = np.zeros((n, n))
    rule = element_rule(mesh.cell_type, 10)
    for e in range(mesh.n_elements):
        tab = vs.tabulate(np.array([e]), rule.points)
        dx = rule.weights * tab["det"][0]
        phi, grad = tab["phi"][0], tab["grad"][0]
        wq = np.einsum("l,qlc->qc", w[vs.element_dofs[e]], phi)
        for i, gi in enumerate(vs.element_dofs[e]):
            for j, gj in enumerate(vs.element_dofs[e]):
                adv = np.einsum("qb,qab->qa", wq, grad[:, j])
                C[gi, gj] += np.sum(dx * np.sum(adv * phi[:, i], axis=1))
    line = gauss_interval(10)
    for f in mesh.interior_faces:
        a, b = mesh.vertices[mesh.faces[f]]
        x = a + line.points[:, None] * (b - a)
        ds = line.weights * np.linalg.norm(b - a)
        nrm = mesh.face_normals[f]
        k1, k2 = mesh.face_adjacency[f]
        sides = []
        for el in (k1, k2):
            ref = mesh.reference_coordinates(np.full(len(x), el), x)
            tab = vs.tabulate(np.full(len(x), el), ref.reshape(len(x), 1, 2), gradients=False)
            sides.append((vs.element_dofs[el], tab["phi"][:, 0]))
        wn = np.einsum("l,qlc,c->q", w[sides[0][0]], sides[0][1], nrm)
        for s_u, sign_u in ((0, 1.0), (1, -1.0)):
            for s_v, sign_v in ((0, 1.0), (1, -1.0)):
                du, pu = sides[s_u]
                dv, pv = sides[s_v]
                jump_u = sign_u * pu
                for i, gi in enumerate(dv):
                    for j, gj in enumerate(du):
                        prod_avg = np.sum(jump_u[:, j] * 0.5 * pv[:, i], axis=1)
                        prod_jump = np.sum(jump_u[:, j] * sign_v * pv[:, i], axis=1)
                        C[gi, gj] += np.sum(ds * (-wn * prod_avg + np.abs(wn) * prod_jump))
    return C


@pytest.mark.parametrize("k", [0, 1])
def test_convection_on_two_triangles_matches_brute_force(k, rng):
    mesh = Mesh2D(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]), np.array([[0, 1, 2], [0, 2, 3]]))
    fs = FaceSets(mesh.interior_faces, mesh.boundary_faces, np.zeros(0, dtype=np.int64))
    vs = build_velocity_space(mesh, k, fs)
    w = rng.standard_normal(vs.dim)
    got = assemble_convection_upwind(vs, w).toarray()
    assert np.allclose(got, brute_force_convection(vs, w), rtol=0, atol=1e-12 * np.abs(got).max())


def test_convection_on_jittered_quads_matches_brute_force(rng):
    mesh = generate_uniform_quad_mesh(2, 2)
    v = mesh.vertices.copy()
    v[4] += [0.08, -0.05]
    mesh = Mesh2D(v, mesh.elements)
    vs = build_velocity_space(mesh, 1, classify_faces(mesh, BoundarySpec.all_dirichlet(mesh.bounding_box())))
    # non-affine integrands are rational and |w.n| has kinks, so compare on the oracle's rule
    vs.volume_degree = vs.face_degree = 10
    w = rng.standard_normal(vs.dim)
    got = assemble_convection_upwind(vs, w).toarray()
    assert np.allclose(got, brute_force_convection(vs, w), rtol=0, atol=1e-12 * np.abs(got).max())


@pytest.mark.parametrize("cell", ["quad", "tri"])
def test_convection_sign_for_solenoidal_wind(cell, rng):
    _, vs, _ = make_spaces(4, k=1, cell=cell)
    w = vs.interpolate(stream_velocity(np.array([[1.0, 0.3], [-0.5, 0.2]])))
    C = assemble_convection_upwind(vs, w)
    for _ in range(20):
        v = rng.standard_normal(vs.dim)
        assert v @ C @ v >= -1e-10 * (v @ v)


def test_convection_annihilates_constant_fields(rng):
    _, vs, _ = make_spaces(3, k=1)
    u = vs.interpolate(lambda x: np.tile([0.7, -1.3], (len(x), 1)))
    w = rng.standard_normal(vs.dim)
    assert np.abs(assemble_convection_upwind(vs, w) @ u).max() <= 1e-12 * np.abs(w).max()


def test_convection_rejects_foreign_wind():
    _, vs, _ = make_spaces(3)
    _, other, _ = make_spaces(4)
    with pytest.raises(ValueError):
        assemble_convection_upwind(vs, other.zero())
    with pytest.raises(ValueError):
        assemble_convection_upwind(vs, np.zeros(vs.dim + 2))


# ------------------------------------------------------------------ diffusion
@pytest.mark.parametrize("cell", ["quad", "tri"])
def test_sip_is_symmetric(cell):
    _, vs, _ = make_spaces(4, k=1, cell=cell)
    A = assemble_diffusion_sip(vs, FormContext(1.0, default_penalty(1)))
    assert abs(A - A.T).max() <= 1e-13


@pytest.mark.parametrize("k", [0, 1])
@pytest.mark.parametrize("cell", ["quad", "tri"])
def test_sip_is_semidefinite_at_default_penalty(k, cell):
    _, vs, _ = make_spaces(3, k=k, cell=cell)
    assert vs.free_dim <= 100
    A = assemble_diffusion_sip(vs, FormContext(1.0, default_penalty(k))).toarray()
    F = vs.free_dofs
    assert np.linalg.eigvalsh(A[np.ix_(F, F)]).min() >= -1e-10


def test_sip_parts_scale_with_penalty():
    _, vs, _ = make_spaces(3, k=1)
    parts = diffusion_parts(vs)
    a1 = assemble_diffusion_sip(vs, FormContext(1.0, 5.0))
    a2 = assemble_diffusion_sip(vs, FormContext(1.0, 12.0))
    assert abs((a2 - a1) - 7.0 * parts.penalty).max() <= 1e-12 * abs(a1).max()
    assert abs(a1 - (parts.volume + parts.consistency + 5.0 * parts.penalty)).max() <= 1e-12 * abs(a1).max()


@pytest.mark.parametrize("cell", ["quad", "tri"])
def test_sip_face_terms_vanish_for_h1_fields(cell, rng):
    mesh, _, _ = make_spaces(3, cell=cell)
    vs = build_velocity_space(mesh, 1, all_outflow(mesh))
    assert len(vs.face_sets.dirichlet) == 0
    u = vs.interpolate(lambda x: np.column_stack([1 + x[:, 1], 2 * x[:, 0] - 0.5]))
    parts = diffusion_parts(vs)
    scale = u @ parts.volume @ u + 1.0
    assert abs(u @ parts.consistency @ u) <= 1e-12 * scale
    assert abs(u @ parts.penalty @ u) <= 1e-12 * scale


def test_sip_energy_approximates_dirichlet_integral():
    # int |grad u|^2 for the bubble field, from a fine tensor rule with finite differences
    pts1 = gauss_interval(40)
    X, Y = np.meshgrid(pts1.points, pts1.points, indexing="ij")
    x = np.column_stack([X.ravel(), Y.ravel()])
    w = np.outer(pts1.weights, pts1.weights).ravel()
    eps = 1e-6
    gx = (bubble_velocity(x + [eps, 0]) - bubble_velocity(x - [eps, 0])) / (2 * eps)
    gy = (bubble_velocity(x + [0, eps]) - bubble_velocity(x - [0, eps])) / (2 * eps)
    exact = np.sum(w * (np.sum(gx ** 2, axis=1) + np.sum(gy ** 2, axis=1)))
    errs = []
    for n in (8, 16):
        _, vs, _ = make_spaces(n, k=1)
        u = vs.interpolate(bubble_velocity)
        A = assemble_diffusion_sip(vs, FormContext(1.0, default_penalty(1)))
        errs.append(abs(u @ A @ u - exact) / exact)
    assert errs[1] < 0.1 and errs[1] < errs[0]


# ------------------------------------------------------------------ divergence
def test_divergence_shape():
    _, vs, ps = make_spaces(3, k=1)
    B = assemble_divergence(vs, ps)
    assert B.shape == (ps.dim, vs.dim)


@pytest.mark.parametrize("cell", ["quad", "tri"])
def test_divergence_kernel_contains_curls(cell):
    _, vs, ps = make_spaces(4, k=1, cell=cell)
    # curl of the cubic potential x^2 y + x y^3, integrated exactly by the interpolation rules
    u = vs.interpolate(lambda x: np.column_stack([x[:, 0] ** 2 + 3 * x[:, 0] * x[:, 1] ** 2,
                                                  -2 * x[:, 0] * x[:, 1] - x[:, 1] ** 3]))
    assert np.abs(assemble_divergence(vs, ps) @ u).max() <= 1e-12 * np.abs(u).max()


@pytest.mark.parametrize("k", [0, 1])
def test_divergence_of_identity_field(k):
    mesh = Mesh2D(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
    fs = FaceSets(mesh.interior_faces, mesh.boundary_faces, np.zeros(0, dtype=np.int64))
    vs = build_velocity_space(mesh, k, fs)
    ps = build_pressure_space(mesh, k)
    u = vs.interpolate(lambda x: x)
    rule = element_rule("triangle", 4)
    moments = rule.weights @ ps.values(rule.points)
    assert np.allclose(assemble_divergence(vs, ps) @ u, 2 * moments, rtol=1e-13, atol=1e-15)


def test_divergence_rejects_mesh_mismatch():
    _, vs, _ = make_spaces(3)
    _, _, ps = make_spaces(4)
    with pytest.raises(ValueError):
        assemble_divergence(vs, ps)


def test_pressure_gradient_block_is_divergence_transpose():
    mesh, vs, ps = make_spaces(3, k=1)
    ctx = FormContext(1e-2, default_penalty(1))
    mats = precompute_matrices(vs, ps, ctx)
    cfg = SolverConfig(dt=0.1, n_steps=1, nu=ctx.nu)
    sys = build_saddle_system(initial_state(vs.zero(), ps, cfg.dt), mats, ctx, cfg)
    K = sys.matrix()
    n = sys.nu_free
    Bf = mats.B[:, vs.free_dofs]
    assert abs(K[:n, n:] - Bf.T).max() == 0
    assert abs(K[n:, :n] - Bf).max() == 0


# ------------------------------------------------------------------------ rhs
def test_rhs_zero_data_is_zero():
    _, vs, _ = make_spaces(3)
    assert np.all(assemble_rhs(vs, FormContext(1.0, 10.0)) == 0)
    zero = lambda x, t=0.0: np.zeros_like(x)
    assert np.all(assemble_rhs(vs, FormContext(1.0, 10.0, g=zero, f=zero)) == 0)


def lid(x, t=0.0):
    out = np.zeros_like(x)
    out[np.abs(x[:, 1] - 1.0) < 1e-12, 0] = 1.0
    return out


@pytest.mark.parametrize("cell", ["quad", "tri"])
def test_lid_data_touches_only_top_elements(cell):
    mesh, vs, _ = make_spaces(4, k=1, cell=cell)
    r = assemble_rhs(vs, FormContext(1 / 3200, default_penalty(1), g=lid))
    top = np.flatnonzero(np.any(np.abs(mesh.vertices[mesh.elements][..., 1] - 1.0) < 1e-12, axis=1))
    touching = np.zeros(vs.dim, dtype=bool)
    touching[vs.element_dofs[top].ravel()] = True
    assert np.any(r[touching] != 0)
    assert np.all(r[~touching] == 0)


def test_rhs_penalty_term_isolated_by_differencing():
    _, vs, _ = make_spaces(4, k=1)
    s = 7.0
    r1 = assemble_rhs(vs, FormContext(0.1, s, g=lid))
    r2 = assemble_rhs(vs, FormContext(0.1, 2 * s, g=lid))
    parts = rhs_parts(vs, FormContext(0.1, s, g=lid))
    assert np.allclose(r2 - r1, s * parts.penalty, rtol=0, atol=1e-14 * np.abs(r1).max())
    assert np.any(parts.consistency != 0)


def test_source_term_matches_mass_for_space_members(rng):
    _, vs, _ = make_spaces(3, k=1)
    c = rng.standard_normal(vs.dim)
    r = assemble_rhs(vs, FormContext(1.0, 10.0, f=lambda x: vs.evaluate_at(c, x)))
    assert np.allclose(r, assemble_mass(vs) @ c, atol=1e-10)


# ------------------------------------------------------------------ plumbing
def test_merge_is_order_independent(rng):
    rows = rng.integers(0, 20, 500)
    cols = rng.integers(0, 15, 500)
    data = rng.standard_normal(500)
    a = coo_merge(rows, cols, data, (20, 15))
    perm = rng.permutation(500)
    b = coo_merge(rows[perm], cols[perm], data[perm], (20, 15))
    assert abs(a - b).max() <= 1e-13
    assert np.allclose(a.toarray(), sp.coo_matrix((data, (rows, cols)), shape=(20, 15)).toarray(), atol=1e-13)


def test_merge_rejects_out_of_range():
    with pytest.raises(IndexError):
        coo_merge(np.array([0, 5]), np.array([0, 0]), np.ones(2), (5, 5))


def test_matrix_market_round_trip(tmp_path):
    _, vs, _ = make_spaces(2, k=1)
    M = assemble_mass(vs)
    export_matrix_market(M, tmp_path / "mass.mtx", comment="velocity mass")
    back = scipy.io.mmread(str(tmp_path / "mass.mtx"))
    assert abs(sp.csr_matrix(back) - M).max() <= 1e-15 * abs(M).max()


def test_field_coefficients_accepted_as_wind(rng):
    _, vs, _ = make_spaces(3)
    c = rng.standard_normal(vs.dim)
    a = assemble_convection_upwind(vs, FieldCoefficients(vs, c))
    b = assemble_convection_upwind(vs, c)
    assert abs(a - b).max() == 0

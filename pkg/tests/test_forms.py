import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from conftest import heterogeneous, base_params
from polythm import forms
from polythm.fespace import build_space, mesh_element_quadrature, mesh_face_quadrature
from polythm.forms import (
    ModelParams,
    ParameterError,
    PenaltyParams,
    TransportOptions,
    assemble_AT,
    assemble_Ae,
    assemble_Ap,
    assemble_B,
    assemble_C,
    assemble_D,
    assemble_M,
    darcy_field,
    discrete_field,
    evaluate_B,
    evaluate_form,
    evaluate_inflow,
    evaluate_transport_identity,
    evaluate_upwind,
    face_coefficients,
    inflow_matrix,
    negative_part,
    square_field,
    upwind_matrix,
    wsip_weights,
)
from polythm.mesh import build_mesh

PEN = PenaltyParams()


def fc_for(mesh, params, ell, m=None):
    return face_coefficients(mesh, params, PEN, ell, ell if m is None else m)


def asym(A):
    return abs(A - A.T).max() if A.nnz else 0.0


@pytest.mark.parametrize(
    "dp, dm, wp, wm, g",
    [(1, 1, 0.5, 0.5, 0.5), (2, 1, 1 / 3, 2 / 3, 2 / 3), (1, 0, 0, 1, 0), (0, 0, 0.5, 0.5, 0)],
)
def test_wsip_weights(dp, dm, wp, wm, g):
    out = wsip_weights(dp, dm)
    assert np.allclose(out, (wp, wm, g), atol=1e-15)


def test_wsip_negative_rejected():
    with pytest.raises(ParameterError):
        wsip_weights(-1.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1e6), st.floats(0, 1e6))
def test_wsip_invariants(dp, dm):
    wp, wm, g = wsip_weights(dp, dm)
    assert wp + wm == pytest.approx(1.0)
    assert g <= min(dp, dm) * (1 + 1e-14)


def test_boundary_penalty_value():
    s = 0.1 / np.sqrt(2)  # square with diameter 0.1
    mesh = build_mesh(np.array([[0, 0], [s, 0], [s, s], [0, s]]), [[0, 1, 2, 3]])
    fc = face_coefficients(mesh, ModelParams.uniform(1, Theta=1.0), PEN, 2, 2)
    assert np.allclose(fc.sigma, 400.0)
    assert np.allclose(fc.omega_T, [1.0, 0.0])
    assert np.allclose(fc.rho, 10 * 0.1 / 2)


def test_face_coefficient_invariants(mesh100):
    fc = fc_for(mesh100, heterogeneous(mesh100), 2)
    inner = mesh100.interior_faces
    for w in (fc.omega_T, fc.omega_K, fc.omega_mu):
        assert np.allclose(w.sum(1), 1.0)
        assert np.all((w >= 0) & (w <= 1))
    for name in ("sigma", "xi", "zeta", "rho", "gamma_T", "gamma_K", "gamma_mu"):
        assert np.all(getattr(fc, name) >= 0)
    assert np.all(fc.rho[inner] > 0)


def test_params_validation(square):
    with pytest.raises(ParameterError):
        ModelParams.uniform(1, lam=0.0)
    with pytest.raises(ParameterError):
        ModelParams.uniform(1, K=[[1, 0], [0, -1]])
    with pytest.raises(ParameterError):
        ModelParams.uniform(1, a0=0.0, b0=0.01)
    with pytest.raises(ParameterError):
        ModelParams.uniform(1, alpha=0.2, porosity=0.3)
    with pytest.raises(ParameterError):
        ModelParams.uniform(1, nonsense=1.0)
    with pytest.raises(ParameterError):
        PenaltyParams(alpha1=0.0)


def test_AT_zero_conductivity(mesh20):
    prm = base_params(mesh20, Theta=0.0)
    A, b = assemble_AT(build_space(mesh20, 2), prm, fc_for(mesh20, prm, 2), g_T=lambda x, y: x)
    assert abs(A).max() == 0 and not np.any(b)


def test_AT_single_square_constant_entry(square):
    prm = ModelParams.uniform(1, Theta=1.0)
    A, _ = assemble_AT(build_space(square, 1), prm, fc_for(square, prm, 1))
    assert A[0, 0] == pytest.approx(10 / np.sqrt(2) * 4, rel=1e-12)


@pytest.mark.parametrize("ell", [1, 2, 4])
def test_diffusion_forms_symmetric(mesh100, ell):
    prm = heterogeneous(mesh100)
    fc = fc_for(mesh100, prm, ell)
    V, Vv = build_space(mesh100, ell), build_space(mesh100, ell, 2)
    for A in (assemble_AT(V, prm, fc)[0], assemble_Ap(V, prm, fc)[0], assemble_Ae(Vv, prm, fc)[0]):
        assert asym(A) <= 1e-12


@pytest.mark.parametrize("ell", [1, 2, 3, 4])
def test_diffusion_forms_positive_definite(mesh20, ell):
    prm = heterogeneous(mesh20, seed=ell)
    prm = prm.with_(Theta=prm.Theta + 1e-3 * np.eye(2))  # PD so A_T is definite
    fc = fc_for(mesh20, prm, ell)
    V, Vv = build_space(mesh20, ell), build_space(mesh20, ell, 2)
    for A in (assemble_AT(V, prm, fc)[0], assemble_Ap(V, prm, fc)[0], assemble_Ae(Vv, prm, fc)[0]):
        assert np.linalg.eigvalsh(A.toarray())[0] > 0


def test_Ap_equals_AT_for_identity(mesh20):
    prm = ModelParams.uniform(mesh20.n_cells, K=1.0, Theta=1.0)
    fc = fc_for(mesh20, prm, 2)
    V = build_space(mesh20, 2)
    g = lambda x, y: np.sin(x + y)  # noqa: E731
    AT, bT = assemble_AT(V, prm, fc, g)
    Ap, bp = assemble_Ap(V, prm, fc, g)
    assert abs(AT - Ap).max() == 0 and np.array_equal(bT, bp)


@pytest.mark.parametrize("c", [1e-10, 3.7])
def test_diffusion_linear_in_tensor(mesh20, c):
    V = build_space(mesh20, 2)
    p1 = heterogeneous(mesh20)
    pc = p1.with_(K=c * p1.K, Theta=c * p1.Theta)
    Ap1 = assemble_Ap(V, p1, fc_for(mesh20, p1, 2))[0]
    Apc = assemble_Ap(V, pc, fc_for(mesh20, pc, 2))[0]
    AT1 = assemble_AT(V, p1, fc_for(mesh20, p1, 2))[0]
    ATc = assemble_AT(V, pc, fc_for(mesh20, pc, 2))[0]
    for A1, Ac in ((Ap1, Apc), (AT1, ATc)):
        assert abs(Ac - c * A1).max() <= 1e-12 * c * abs(A1).max()


def test_Ae_rigid_translation(mesh20):
    prm = base_params(mesh20)
    Vv = build_space(mesh20, 2, 2)
    g = lambda x, y: np.stack(np.broadcast_arrays(0.3 + 0 * x, -1.2 + 0 * y), -1)  # noqa: E731
    A, b = assemble_Ae(Vv, prm, fc_for(mesh20, prm, 2), g)
    u = Vv.project(g)
    assert np.abs(A @ u - b).max() < 1e-11 * np.abs(b).max()


def test_homogeneous_data_gives_zero_lifting(mesh20):
    prm = base_params(mesh20)
    fc = fc_for(mesh20, prm, 2)
    V, Vv = build_space(mesh20, 2), build_space(mesh20, 2, 2)
    zero = lambda x, y: 0 * x  # noqa: E731
    zero_v = lambda x, y: np.zeros(x.shape + (2,))  # noqa: E731
    assert not np.any(assemble_AT(V, prm, fc, zero)[1])
    assert not np.any(assemble_Ap(V, prm, fc, zero)[1])
    assert not np.any(assemble_Ae(Vv, prm, fc, zero_v)[1])
    assert not np.any(assemble_B(Vv, V, zero_v)[1])


def test_B_single_cell(square):
    V, Vv = build_space(square, 1), build_space(square, 1, 2)
    B, _ = assemble_B(Vv, V)
    phi = V.project(lambda x, y: 1 + 0 * x)
    v = Vv.project(lambda x, y: np.stack([x, 0 * y], -1))
    assert evaluate_form(B, phi, v) == pytest.approx(0.0, abs=1e-13)


def test_B_divergence_theorem(mesh20):
    V, Vv = build_space(mesh20, 3), build_space(mesh20, 3, 2)
    B, _ = assemble_B(Vv, V)
    phi = V.project(lambda x, y: 1 + 0 * x)
    v = Vv.project(lambda x, y: np.stack([x * (1 - x) * y, 0 * y], -1))
    assert abs(evaluate_form(B, phi, v)) < 1e-12


def test_B_matches_pointwise_evaluation(mesh20):
    V, Vv = build_space(mesh20, 2), build_space(mesh20, 2, 2)
    B, _ = assemble_B(Vv, V)
    rng = np.random.default_rng(4)
    phi, v = rng.standard_normal(V.ndofs), rng.standard_normal(Vv.ndofs)
    direct = evaluate_B(mesh20, discrete_field(V, phi), discrete_field(Vv, v), 8)
    assert evaluate_form(B, phi, v) == pytest.approx(direct, rel=1e-12)


def test_B_degree_condition(mesh20):
    with pytest.raises(ParameterError):
        assemble_B(build_space(mesh20, 1, 2), build_space(mesh20, 3))


def _hdiv_seminorm(mesh, Vv, v, ell):
    q = mesh_element_quadrature(mesh, 2 * ell + 2)
    _, g = Vv.field_at_quadrature(v, np.arange(mesh.n_cells), q.points)
    div2 = np.sum(q.weights * (g[..., 0, 0] + g[..., 1, 1]) ** 2)
    fq = mesh_face_quadrature(mesh, 2 * ell + 2)
    own, nbr = mesh.face_cells.T
    inner = nbr >= 0
    nb = np.where(inner, nbr, own)
    a = Vv.field_at_quadrature(v, own, fq.points, deriv=0)[0]
    b = np.where(inner[:, None, None], Vv.field_at_quadrature(v, nb, fq.points, deriv=0)[0], 0)
    jn = np.einsum("fqa,fa->fq", a - b, mesh.normals)
    h = mesh.cell_diameters
    return np.sqrt(div2 + np.sum(ell**2 / np.minimum(h[own], h[nb]) * np.sum(fq.weights * jn**2, 1)))


@pytest.mark.parametrize("fixture", ["mesh20", "mesh100"])
def test_B_bounded_by_hdiv_seminorm(request, fixture):
    mesh = request.getfixturevalue(fixture)
    ell = 2
    V, Vv = build_space(mesh, ell), build_space(mesh, ell, 2)
    B, _ = assemble_B(Vv, V)
    rng = np.random.default_rng(5)
    ratios = []
    for _ in range(30):
        phi, v = rng.standard_normal(V.ndofs), rng.standard_normal(Vv.ndofs)
        ratios.append(abs(evaluate_form(B, phi, v)) / (_hdiv_seminorm(mesh, Vv, v, ell) * np.linalg.norm(phi)))
    # hidden constant: mesh independent and of order one
    assert max(ratios) < 1.0


def test_D_properties(mesh20, square):
    prm = base_params(mesh20)
    Q = build_space(mesh20, 2)
    D = assemble_D(Q, fc_for(mesh20, prm, 2))
    assert asym(D) <= 1e-12
    assert np.linalg.eigvalsh(D.toarray())[0] >= -1e-12
    one = Q.project(lambda x, y: 1 + 0 * x)
    assert np.abs(D @ one).max() < 1e-12
    D1 = assemble_D(build_space(square, 2), fc_for(square, ModelParams.uniform(1), 2))
    assert D1.nnz == 0 or abs(D1).max() == 0


def _M_dense(mesh, prm, ell=2):
    blocks = assemble_M(build_space(mesh, ell), build_space(mesh, ell), prm)
    return sp.bmat([[blocks[(r, c)] for c in range(3)] for r in range(3)]).toarray()


@pytest.mark.parametrize("kw", [dict(a0=0.0, b0=0.0, c0=0.0), {}])
def test_M_symmetric_psd(mesh20, kw):
    M = _M_dense(mesh20, base_params(mesh20, **kw))
    assert np.abs(M - M.T).max() <= 1e-12
    assert np.linalg.eigvalsh(M)[0] >= -1e-12


def test_M_single_cell_total_pressure(square):
    M = _M_dense(square, ModelParams.uniform(1, lam=5.0), ell=1)
    n = 3
    phi = np.zeros(3 * n)
    phi[2 * n] = 1.0  # constant mode of phi on the unit square is 1
    assert phi @ M @ phi == pytest.approx(0.2, rel=1e-14)


def test_M_rejects_nonpositive_lambda(square):
    prm = ModelParams.uniform(1, validate=False, lam=0.0)
    with pytest.raises(ParameterError):
        assemble_M(build_space(square, 1), build_space(square, 1), prm)


@pytest.mark.parametrize("variant", forms.VARIANTS)
def test_transport_vanishes_for_constant_pressure(mesh20, variant):
    prm = base_params(mesh20)
    V = build_space(mesh20, 2)
    c = V.project(lambda x, y: 2.0 + 0 * x)
    T = np.random.default_rng(0).standard_normal(V.ndofs)
    C, b = assemble_C(variant, V, prm, c, T_prev=c, g_T=lambda x, y: x, fc=fc_for(mesh20, prm, 2))
    assert abs(C).max() < 1e-12 and np.abs(b).max() < 1e-12


@pytest.mark.parametrize("variant", forms.VARIANTS)
def test_transport_vanishes_without_convection(mesh20, variant):
    prm = base_params(mesh20, cf=0.0)
    V = build_space(mesh20, 2)
    rng = np.random.default_rng(1)
    p, T = rng.standard_normal(V.ndofs), rng.standard_normal(V.ndofs)
    C, b = assemble_C(variant, V, prm, p, T_prev=T, g_T=lambda x, y: x, fc=fc_for(mesh20, prm, 2))
    assert abs(C).max() == 0 and not np.any(b)


def test_transport_first_iterate_is_zero(mesh20):
    V = build_space(mesh20, 2)
    for variant in forms.VARIANTS:
        C, _ = assemble_C(variant, V, base_params(mesh20), None, None)
        assert C.nnz == 0


def test_transport_unknown_variant(mesh20):
    with pytest.raises(ValueError):
        assemble_C("upwind", build_space(mesh20, 1), base_params(mesh20), None)


def _identity_pair(mesh, ell, rng):
    prm = base_params(mesh, K=np.array([[1.0, 0.3], [0.3, 0.5]]))
    V = build_space(mesh, ell)
    T, p = rng.standard_normal(V.ndofs), rng.standard_normal(V.ndofs)
    return prm, V, T, p


@pytest.mark.parametrize("ell", [1, 2, 3])
def test_plain_transport_identity(mesh20, ell):
    rng = np.random.default_rng(ell)
    for _ in range(5):
        prm, V, T, p = _identity_pair(mesh20, ell, rng)
        C, _ = assemble_C("plain", V, prm, p)
        lhs = evaluate_form(C, T, T)
        rhs = evaluate_transport_identity(mesh20, darcy_field(V, prm, p), square_field(V, T), 3 * ell + 2)
        assert lhs == pytest.approx(rhs, rel=1e-10)


@pytest.mark.parametrize("ell", [1, 2, 3])
def test_stab_transport_identity(mesh20, ell):
    rng = np.random.default_rng(10 + ell)
    order = 3 * ell + 2
    for _ in range(5):
        prm, V, T, p = _identity_pair(mesh20, ell, rng)
        C, _ = assemble_C("stab", V, prm, p)
        eta, Tf = darcy_field(V, prm, p), discrete_field(V, T)
        rhs = (
            0.5 * evaluate_B(mesh20, square_field(V, T), eta, order)
            + evaluate_upwind(mesh20, eta, Tf, order)
            + evaluate_inflow(mesh20, eta, Tf, order)
        )
        assert evaluate_form(C, T, T) == pytest.approx(rhs, rel=1e-10)


def test_upwind_on_all_faces_is_equivalent(mesh20):
    prm = base_params(mesh20)
    V = build_space(mesh20, 2)
    p = np.random.default_rng(7).standard_normal(V.ndofs)
    g = lambda x, y: np.cos(x) * y  # noqa: E731
    Ci, bi = assemble_C("stab", V, prm, p, g_T=g)
    Ca, ba = assemble_C("stab", V, prm, p, g_T=g, options=TransportOptions(upwind_faces="all"))
    assert abs(Ci - Ca).max() < 1e-13
    assert np.abs(bi - ba).max() < 1e-13


def test_stabilizations_psd(mesh20):
    prm = base_params(mesh20)
    V = build_space(mesh20, 2)
    rng = np.random.default_rng(8)
    p = rng.standard_normal(V.ndofs)
    for S in (upwind_matrix(V, prm, p), inflow_matrix(V, prm, p)):
        S = S.toarray()
        assert np.abs(S - S.T).max() < 1e-12
        assert np.linalg.eigvalsh(S)[0] >= -1e-12 * np.abs(S).max()
    eta = darcy_field(V, prm, p)
    for _ in range(20):
        T = discrete_field(V, rng.standard_normal(V.ndofs))
        assert evaluate_upwind(mesh20, eta, T, 8) >= 0
        assert evaluate_inflow(mesh20, eta, T, 8) >= 0


def test_AT_nonnegative_on_random_fields(mesh100):
    prm = base_params(mesh100)
    V = build_space(mesh100, 2)
    A, _ = assemble_AT(V, prm, fc_for(mesh100, prm, 2))
    X = np.random.default_rng(9).standard_normal((100, V.ndofs))
    assert np.all(np.einsum("ki,ki->k", X, (A @ X.T).T) >= 0)


def test_B_of_zero_square(mesh20):
    V = build_space(mesh20, 2)
    prm = base_params(mesh20)
    eta = darcy_field(V, prm, np.random.default_rng(0).standard_normal(V.ndofs))
    assert evaluate_B(mesh20, square_field(V, np.zeros(V.ndofs)), eta, 8) == 0.0


@pytest.mark.parametrize("x, expected", [(-3.0, 3.0), (5.0, 0.0), (0.0, 0.0)])
def test_negative_part(x, expected):
    assert negative_part(x) == expected


def test_old_variant_couples_pressure(mesh20):
    prm = base_params(mesh20)
    V = build_space(mesh20, 2)
    rng = np.random.default_rng(11)
    T_prev, p = rng.standard_normal(V.ndofs), rng.standard_normal(V.ndofs)
    C, _ = assemble_C("old", V, prm, None, T_prev)
    # (-c_f K grad p . grad T_prev, S) for S = T_prev, by pointwise quadrature
    q = mesh_element_quadrature(mesh20, 8)
    e = np.arange(mesh20.n_cells)
    tv, tg = V.field_at_quadrature(T_prev, e, q.points)
    _, pg = V.field_at_quadrature(p, e, q.points)
    ref = -np.sum(q.weights * np.einsum("eqa,eab,eqb->eq", tg, prm.K, pg) * tv)
    assert evaluate_form(C, p, T_prev) == pytest.approx(ref, rel=1e-12)

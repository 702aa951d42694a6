import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from conftest import mixed_cloud
from rpimc.assembly import (
    AssemblyError, PenaltyConfig, TransientProblem, apply_dirichlet, apply_neumann_penalty,
    assemble_divergence_operator, assemble_flux_operator, assemble_mass, build_system,
    check_operator, dump_operator, load_operator, neumann_flux_residual, neumann_load_operator,
    penalty_projector,
)
from rpimc.basis import mls_params_for, nodal_shape_functions
from rpimc.geometry import DIRICHLET, NEUMANN, find_supports, generate_regular_grid, tag_boundaries, uniform_tags


LD = np.longdouble


def _inv_ld(A):
    """Gauss-Jordan inverse with partial pivoting in extended precision."""
    n = len(A)
    M = np.hstack([np.asarray(A, dtype=LD), np.eye(n, dtype=LD)])
    for k in range(n):
        p = k + np.argmax(np.abs(M[k:, k]))
        M[[k, p]] = M[[p, k]]
        M[k] /= M[k, k]
        f = M[:, k].copy()
        f[k] = 0
        M -= np.outer(f, M[k])
    return M[:, n:]


def _rpi_gradients_ld(point, X, rc, q):
    point, X, rc, q = (np.asarray(v, dtype=LD) for v in (point, X, rc, q))
    n, d = X.shape
    m = d + 1
    R = (((X[:, None] - X[None]) ** 2).sum(-1) + rc * rc) ** q
    P = np.hstack([np.ones((n, 1), dtype=LD), X])
    Gi = _inv_ld(np.block([[R, P], [P.T, np.zeros((m, m), dtype=LD)]]))
    dx = point - X
    dr = 2 * q * ((dx**2).sum(-1) + rc * rc)[:, None] ** (q - 1) * dx
    return np.vstack([np.concatenate([dr[:, k], [0.0], np.eye(d)[k]]) @ Gi for k in range(d)])[:, :n].T


def dense_kprime(cloud, a_c, alpha, cond=1.0, alpha_c=1.5, q=1.03):
    """Brute-force K' from first principles: box search, G^-1, numeric Q^-1.

    Everything runs in extended precision; ``I + alpha n n^T`` has condition
    number ``1 + alpha`` and G is ill conditioned for ``q`` near 1, so a
    float64 oracle would be less accurate than the code under test.
    """
    pos = cloud.positions
    n, d = pos.shape
    h = cloud.spacing
    D = np.eye(d, dtype=LD) * cond if np.ndim(cond) == 0 else np.asarray(cond, dtype=LD)
    Ka = np.zeros((d * n, n), dtype=LD)
    Ks = np.zeros((n, d * n), dtype=LD)
    for I in range(n):
        sup = np.flatnonzero(np.all(np.abs(pos - pos[I]) <= a_c * h * (1 + 1e-9), axis=1))
        dphi = _rpi_gradients_ld(pos[I], pos[sup], LD(alpha_c) * LD(h), q)
        for k, i in enumerate(sup):
            Ka[d * I:d * I + d, i] = -D @ dphi[k]
            Ks[I, d * i:d * i + d] = dphi[k]
    P = np.eye(d * n, dtype=LD)
    for I in np.flatnonzero(cloud.boundary_tags == NEUMANN):
        nv = np.asarray(cloud.normals[I], dtype=LD)
        P[d * I:d * I + d, d * I:d * I + d] = _inv_ld(np.eye(d) + LD(alpha) * np.outer(nv, nv))
    return (Ks @ P @ Ka).astype(float), Ka.astype(float), Ks.astype(float)


@pytest.mark.parametrize("a_c", [1.5, 2.1])
@pytest.mark.parametrize("dim,n", [(2, 5), (3, 4)])
def test_kprime_matches_dense_oracle(dim, n, a_c):
    cloud = mixed_cloud(dim, n)
    sys_ = build_system(cloud, a_c=a_c, penalty=PenaltyConfig(1e6))
    dense, Ka, Ks = dense_kprime(cloud, a_c, 1e6)
    # float64 shape gradients carry about cond(G) * eps of rounding, a few 1e-12
    np.testing.assert_allclose(sys_.stiffness.toarray(), dense, rtol=0, atol=1e-11 * np.abs(dense).max())
    np.testing.assert_allclose(sys_.flux_operator.toarray(), Ka, rtol=0, atol=1e-11 * np.abs(Ka).max())
    np.testing.assert_allclose(sys_.divergence_operator.toarray(), Ks, rtol=0, atol=1e-11 * np.abs(Ks).max())


def test_penalty_block_single_node():
    cloud = tag_boundaries(generate_regular_grid(((0, 0), (1, 1)), 0.5),
                           {"x-": "dirichlet", "x+": "neumann", "y-": "dirichlet", "y+": "dirichlet"})
    P = penalty_projector(cloud, PenaltyConfig(1e6)).toarray()
    i = np.flatnonzero(cloud.boundary_tags == NEUMANN)
    assert len(i) == 1
    i = i[0]
    np.testing.assert_allclose(P[2 * i:2 * i + 2, 2 * i:2 * i + 2], np.diag([1 / (1 + 1e6), 1.0]), rtol=1e-12)
    np.testing.assert_allclose(P[2 * i:2 * i + 2, 2 * i:2 * i + 2],
                               np.linalg.inv(np.eye(2) + 1e6 * np.diag([1.0, 0.0])), rtol=1e-10)


def _shapes(cloud, a_c=1.5, method="rpi"):
    sup = find_supports(cloud, a_c)
    params = None if method == "rpi" else mls_params_for(cloud, a_c)
    return nodal_shape_functions(cloud, sup, method, params)


def test_flux_of_linear_field(square_cloud):
    sh = _shapes(square_cloud)
    Ka = assemble_flux_operator(square_cloud, sh, 2.0)
    np.testing.assert_allclose(Ka @ np.ones(len(square_cloud)), 0.0, atol=1e-10)
    q = (Ka @ square_cloud.positions[:, 0]).reshape(-1, 2)
    np.testing.assert_allclose(q, np.tile([-2.0, 0.0], (len(square_cloud), 1)), atol=1e-9)


def test_flux_3x3_lattice_dense():
    c = generate_regular_grid(((0, 0), (1, 1)), 0.5)
    sh = _shapes(c)
    u = c.positions[:, 0] + 2 * c.positions[:, 1]
    q = (assemble_flux_operator(c, sh) @ u).reshape(-1, 2)
    np.testing.assert_allclose(q, np.tile([-1.0, -2.0], (9, 1)), atol=1e-10)
    _, Ka, _ = dense_kprime(c, 1.5, 1e6)
    np.testing.assert_allclose(Ka @ u, q.ravel(), atol=1e-10)


def test_tensor_conductivity_flux(square_cloud):
    D = np.array([[2.0, 0.5], [0.5, 1.0]])
    sh = _shapes(square_cloud)
    q = (assemble_flux_operator(square_cloud, sh, D) @ square_cloud.positions[:, 1]).reshape(-1, 2)
    np.testing.assert_allclose(q, np.tile(-D @ [0.0, 1.0], (len(square_cloud), 1)), atol=1e-9)
    per_node = np.broadcast_to(D, (len(square_cloud), 2, 2))
    Ka2 = assemble_flux_operator(square_cloud, sh, per_node)
    np.testing.assert_allclose(Ka2.toarray(), assemble_flux_operator(square_cloud, sh, D).toarray(), atol=1e-14)
    with pytest.raises(AssemblyError):
        assemble_flux_operator(square_cloud, sh, np.ones((3, 2, 2)))


def test_divergence_of_constant_flux(square_cloud):
    sh = _shapes(square_cloud)
    Ks = assemble_divergence_operator(square_cloud, sh)
    q = np.tile([1.0, 0.0], len(square_cloud))
    np.testing.assert_allclose(Ks @ q, 0.0, atol=1e-10)


def test_laplacian_of_quadratic():
    # exact two layers in from the boundary; the first layer inherits the
    # one-sided boundary flux error, O(h) in q and O(1) after the divergence
    for h in (0.1, 0.05):
        c = generate_regular_grid(((0, 0), (1, 1)), h)
        sh = _shapes(c)
        K = assemble_divergence_operator(c, sh) @ assemble_flux_operator(c, sh)
        x = c.positions
        err = np.abs(K @ x[:, 0] ** 2 + 2.0)
        depth = np.minimum(x.min(axis=1), (1 - x).min(axis=1))
        assert err[depth > 1.5 * h].max() < 1e-9
        assert err[np.isclose(depth, h)].max() == pytest.approx(0.5, abs=1e-9)


def test_composition_is_associative(square_cloud):
    sh = _shapes(square_cloud)
    Ka = assemble_flux_operator(square_cloud, sh)
    Ks = assemble_divergence_operator(square_cloud, sh)
    v = np.random.default_rng(0).random(len(square_cloud))
    np.testing.assert_allclose((Ks @ Ka) @ v, Ks @ (Ka @ v), atol=1e-12 * np.abs(Ks @ (Ka @ v)).max())


def test_mass_lumping(square_cloud):
    m = assemble_mass(square_cloud, _shapes(square_cloud), 2.5).diagonal()
    np.testing.assert_allclose(m, 2.5, atol=1e-12)
    m = assemble_mass(square_cloud, _shapes(square_cloud, method="mls"), 1.0).diagonal()
    np.testing.assert_allclose(m, 1.0, atol=1e-10)


def test_all_dirichlet_has_no_penalty(square_cloud):
    sh = _shapes(square_cloud)
    Ka = assemble_flux_operator(square_cloud, sh)
    Ks = assemble_divergence_operator(square_cloud, sh)
    Kp, rhs = apply_neumann_penalty(Ka, Ks, square_cloud, PenaltyConfig(), qbar=None)
    np.testing.assert_allclose(Kp.toarray(), (Ks @ Ka).toarray(), atol=1e-14)
    assert not rhs.any()


def test_zero_flux_gives_zero_correction():
    c = mixed_cloud(2, 6)
    sh = _shapes(c)
    Ka = assemble_flux_operator(c, sh)
    Ks = assemble_divergence_operator(c, sh)
    _, rhs = apply_neumann_penalty(Ka, Ks, c, PenaltyConfig(1e5), qbar=np.zeros(len(c.indices(NEUMANN))))
    assert not rhs.any()


def test_rhs_correction_matches_formula():
    c = mixed_cloud(2, 6)
    sh = _shapes(c)
    Ka = assemble_flux_operator(c, sh)
    Ks = assemble_divergence_operator(c, sh)
    neu = c.indices(NEUMANN)
    qbar = np.random.default_rng(2).random(len(neu))
    alpha = 1e6
    _, rhs = apply_neumann_penalty(Ka, Ks, c, PenaltyConfig(alpha), qbar)
    lift = np.zeros(2 * len(c))
    for k, i in enumerate(neu):
        nv = c.normals[i]
        lift[2 * i:2 * i + 2] = np.linalg.inv(np.eye(2) + alpha * np.outer(nv, nv)) @ nv * qbar[k]
    np.testing.assert_allclose(rhs, -alpha * (Ks @ lift), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(neumann_load_operator(Ks, c, PenaltyConfig(alpha)) @ qbar, rhs, atol=1e-12)


def test_two_hop_row_structure():
    c = mixed_cloud(2, 7)
    sys_ = build_system(c, a_c=1.5)
    S = sp.csr_matrix((np.ones(len(sys_.supports.indices)), sys_.supports.indices, sys_.supports.indptr))
    reach = (S @ S).tocsr()
    K = sys_.stiffness
    for i in range(len(c)):
        assert set(K.indices[K.indptr[i]:K.indptr[i + 1]]) <= set(reach.indices[reach.indptr[i]:reach.indptr[i + 1]])


def test_patch_test_linear_field():
    c = tag_boundaries(generate_regular_grid(((0, 0), (1, 1)), 0.1), uniform_tags("dirichlet", 2))
    sys_ = build_system(c, a_c=1.5)
    u = 0.3 + 2 * c.positions[:, 0] - c.positions[:, 1]
    interior = c.boundary_tags != DIRICHLET
    assert np.abs((sys_.stiffness @ u)[interior]).max() < 1e-8


def test_operators_are_sorted_csr():
    sys_ = build_system(mixed_cloud(3, 4), a_c=2.1)
    for op in (sys_.stiffness, sys_.flux_operator, sys_.divergence_operator):
        assert op.has_sorted_indices
        assert check_operator(op)


def test_check_operator_rejects_bad_entries():
    bad = sp.csr_matrix((np.array([1.0, np.nan]), np.array([0, 1]), np.array([0, 2])), shape=(1, 2))
    with pytest.raises(AssemblyError, match="non-finite"):
        check_operator(bad)
    dup = sp.csr_matrix((np.array([1.0, 2.0]), np.array([1, 0]), np.array([0, 2])), shape=(1, 2))
    with pytest.raises(AssemblyError, match="row 0"):
        check_operator(dup)


def test_dump_roundtrip(tmp_path):
    sys_ = build_system(mixed_cloud(2, 5), a_c=1.5)
    p = tmp_path / "k.txt"
    dump_operator(sys_.stiffness, p)
    head = p.read_text().splitlines()[0].split()
    assert [int(t) for t in head] == [25, 25, sys_.stiffness.nnz]
    back = load_operator(p)
    assert (back != sys_.stiffness).nnz == 0


def test_apply_dirichlet_values():
    c = tag_boundaries(generate_regular_grid(((0, 0), (1, 1)), 0.1), uniform_tags("dirichlet", 2))
    u = np.full(len(c), 7.0)
    apply_dirichlet(u, c, lambda x, t: np.exp(-t) * np.sin(np.pi * x[:, 0]), 1.0)
    node = np.flatnonzero(np.all(np.isclose(c.positions, [0.5, 0.0]), axis=1))[0]
    assert u[node] == pytest.approx(0.36787944117144233, rel=1e-14)
    assert u[~c.on_boundary].min() == 7.0
    apply_dirichlet(u, c, lambda x, t: 0.0, 0.0)
    assert not u[c.on_boundary].any()
    with pytest.raises(AssemblyError, match="node"):
        apply_dirichlet(u, c, lambda x, t: np.where(x[:, 0] > 0.5, np.nan, 0.0), 0.0)
    with pytest.raises(AssemblyError):
        apply_dirichlet(u, c, None, 0.0)


def test_penalty_band_warning():
    with pytest.warns(RuntimeWarning, match="outside"):
        PenaltyConfig(1e8)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        PenaltyConfig(1e6)
    with pytest.raises(ValueError):
        PenaltyConfig(0.0)


def test_problem_validation():
    with pytest.raises(ValueError):
        TransientProblem(c_rho=0.0, conductivity=1.0, initial=None, t_final=1.0)
    with pytest.raises(ValueError, match="symmetric"):
        TransientProblem(c_rho=1.0, conductivity=np.array([[1.0, 0.2], [0.0, 1.0]]), initial=None, t_final=1.0)
    with pytest.raises(ValueError, match="definite"):
        TransientProblem(c_rho=1.0, conductivity=-np.eye(2), initial=None, t_final=1.0)


@given(st.integers(0, 2**31))
def test_constants_are_in_the_kernel(seed):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(2, 4))
    c = mixed_cloud(dim, 5 if dim == 2 else 4)
    alpha = 10.0 ** rng.uniform(4, 7)
    sys_ = build_system(c, a_c=float(rng.choice([1.5, 2.1])), penalty=PenaltyConfig(alpha))
    np.testing.assert_allclose(sys_.stiffness @ np.ones(len(c)), 0.0, atol=1e-8)


def test_penalty_reduces_neumann_flux_residual():
    c = tag_boundaries(generate_regular_grid(((0, 0, 0), (np.pi,) * 3), np.pi / 6), uniform_tags("neumann", 3))
    x = c.positions
    u = np.cos(x[:, 0]) * np.cos(x[:, 1]) * np.cos(x[:, 2])
    res = []
    for alpha in (1e4, 1e5, 1e6, 1e7):
        sys_ = build_system(c, a_c=2.1, penalty=PenaltyConfig(alpha))
        res.append(np.abs(neumann_flux_residual(sys_.flux_operator, c, sys_.penalty, u)).max())
    assert all(b < a for a, b in zip(res, res[1:]))

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rough_flow.errors import ResourceLimitError, SingularVertexError
from rough_flow.heat import (SemigroupHeatKernel, build_heat_kernel, eigendecompose,
                             spherical_diagonal_series)
from rough_flow.mesh import build_icosphere, icosahedral_rotations, vertex_permutation
from rough_flow.metric import pullback_embedding


def m_norm(m, u):
    return math.sqrt(np.sum(m * u * u))


def test_zero_mode(ico3):
    mesh, g, K = ico3
    assert K.eigenvalues[0] == 0.0
    assert np.allclose(K.eigenvectors[:, 0], 1 / math.sqrt(K.total_area), atol=1e-10)
    assert K.eigenvalues[1] > 1.0
    # multiplicity of zero is one
    assert np.sum(np.abs(K.eigenvalues) < 1e-8) == 1


def test_m_orthonormal(ico3):
    _, _, K = ico3
    P = K.eigenvectors
    assert np.abs(P.T @ (K.m[:, None] * P) - np.eye(K.n)).max() <= 1e-10


def test_generalized_eigen_equation(ico3):
    _, _, K = ico3
    P = K.eigenvectors[:, :20]
    r = K.stiffness.matrix @ P - (K.m[:, None] * P) * K.eigenvalues[:20]
    assert np.abs(r).max() <= 1e-10


def test_spherical_harmonics_spectrum(ico4):
    _, _, K = ico4
    lam = K.eigenvalues
    assert np.allclose(lam[1:4], 2.0, rtol=0.02)
    assert np.allclose(lam[4:9], 6.0, rtol=0.02)
    assert lam[9] > 6.0 * 1.5


def test_diagonal_against_series(ico4):
    mesh, _, K = ico4
    ref = spherical_diagonal_series(0.5)
    for x in (0, 100, 2000):
        assert K.kernel_eval(0.5, x, x) == pytest.approx(ref, rel=0.05)


def test_series_oracle_limits():
    # the series tends to 1/area for large t
    assert spherical_diagonal_series(50.0) == pytest.approx(1 / (4 * math.pi), rel=1e-12)
    assert spherical_diagonal_series(1.0, radius=2.0) == pytest.approx(
        spherical_diagonal_series(0.25) / 4, rel=1e-12)


def test_mass_and_symmetry(ico3, box6):
    for _, _, K in (ico3, box6):
        for t in (K.t_min, 0.1, 0.5, 1.0):
            assert K.mass_defect(t) <= 1e-10
            assert K.kernel_eval(t, 3, 17) == K.kernel_eval(t, 17, 3)
            Km = K.kernel_matrix(t)
            assert np.array_equal(Km, Km.T)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.05, 5.0), st.integers(0, 641))
def test_rows_have_unit_mass(ico3_kernel, t, x):
    row = ico3_kernel.kernel_row(t, x)
    assert abs(row @ ico3_kernel.m - 1.0) <= 1e-10


@pytest.fixture(scope="module")
def ico3_kernel():
    m = build_icosphere(3)
    return eigendecompose(m, pullback_embedding(m))


def test_semigroup(ico3):
    _, _, K = ico3
    for t in (0.05, 0.5, 1.0):
        assert K.semigroup_residual(t) <= 1e-10


def test_positivity(ico3):
    _, _, K = ico3
    assert K.kernel_positivity_bounds(1.0)[0] > 0
    assert K.kernel_positivity_bounds(0.05)[0] > 0
    tmin = K.t_min
    assert K.kernel_positivity_bounds(tmin)[0] > 0
    assert K.kernel_positivity_bounds(tmin / 1.05)[0] <= 0


def test_long_time_flattens(ico3):
    _, _, K = ico3
    spread = [np.subtract(*K.kernel_positivity_bounds(t)[::-1]) for t in (1.0, 3.0, 10.0)]
    assert spread[0] > spread[1] > spread[2]
    assert spread[2] < 1e-8
    lo, hi = K.kernel_positivity_bounds(10.0)
    assert hi == pytest.approx(1 / K.total_area, rel=1e-8)


def test_monotone_decay(ico3):
    _, _, K = ico3
    ts = [0.05, 0.1, 0.2, 0.5, 1.0]
    sup = [np.abs(K.kernel_matrix(t)).max() for t in ts]
    assert all(b <= a for a, b in zip(sup, sup[1:]))
    w = [K.spectral_weights(t)[1:].max() for t in ts]
    assert all(b <= a for a, b in zip(w, w[1:]))


def test_automorphism_conjugates_kernel(ico2):
    mesh, _, K = ico2
    Km = K.kernel_matrix(0.3)
    for R in icosahedral_rotations()[1:6]:
        p = vertex_permutation(mesh, R)
        assert np.abs(Km[np.ix_(p, p)] - Km).max() <= 1e-12 * np.abs(Km).max()


def test_time_must_be_positive(ico2):
    _, _, K = ico2
    with pytest.raises(ValueError):
        K.kernel_row(0.0, 1)
    with pytest.raises(ValueError):
        K.kernel_dx(-1.0, 1, [1.0, 0.0])


def test_heat_equation_residuals(ico3, witch):
    for _, _, K in (ico3, witch):
        assert K.heat_equation_residual(0.3, 5) <= 1e-10
        assert K.heat_equation_residual(0.3, 5, v=np.array([0.6, -0.8])) <= 1e-9


def test_kernel_dx_zero_direction(ico2):
    _, _, K = ico2
    assert np.all(K.kernel_dx(0.5, 4, np.zeros(2)) == 0.0)


def test_kernel_dx_mass_zero(ico3, box6, witch):
    rng = np.random.default_rng(0)
    for mesh, _, K in (ico3, box6, witch):
        for x in rng.choice(mesh.regular_vertices(), 5, replace=False):
            eta = K.kernel_dx(0.5, x, rng.standard_normal(2))
            assert abs(eta @ K.m) <= 1e-9


def test_kernel_dx_spectral_form(ico2):
    # dx of sum_i e^{-lambda_i t} phi_i(x) phi_i(.) through the vertex gradient
    _, _, K = ico2
    x, v = 10, np.array([0.3, 0.9])
    grad_phi = K.frame(x).gradient @ K.eigenvectors
    coef = v @ grad_phi
    ref = K.eigenvectors @ (K.spectral_weights(0.5) * coef)
    assert np.allclose(K.kernel_dx(0.5, x, v), ref, atol=1e-12)


def test_kernel_dx_singular_vertex(box6):
    mesh, _, K = box6
    with pytest.raises(SingularVertexError):
        K.kernel_dx(0.5, next(iter(mesh.singular)), [1.0, 0.0])


def fd_error(K, t, x):
    errs = []
    for nb in K.mesh.neighbors(x):
        d, eps = K.frame(x).direction_to(int(nb))
        fd = (K.kernel_row(t, int(nb)) - K.kernel_row(t, x)) / eps
        eta = K.kernel_dx(t, x, d)
        errs.append(m_norm(K.m, eta - fd) / m_norm(K.m, fd))
    return max(errs)


def test_kernel_dx_against_finite_differences(ico3, ico4):
    e3 = fd_error(ico3[2], 0.5, 0)
    e4 = fd_error(ico4[2], 0.5, 0)
    assert e4 <= 0.20
    assert e4 < e3


def test_semigroup_backend_matches_dense(ico2):
    mesh, g, K = ico2
    sg = SemigroupHeatKernel(mesh, g)
    for t in (0.1, 1.0):
        assert np.allclose(sg.kernel_row(t, 7), K.kernel_row(t, 7), rtol=1e-9, atol=1e-12)
        v = np.array([1.0, -0.5])
        assert np.allclose(sg.kernel_dx(t, 7, v), K.kernel_dx(t, 7, v), rtol=1e-8, atol=1e-11)
    assert sg.heat_equation_residual(0.5, 3) <= 1e-8


def test_size_cap():
    m = build_icosphere(5)
    with pytest.raises(ResourceLimitError):
        eigendecompose(m, pullback_embedding(m))
    assert isinstance(build_heat_kernel(m, pullback_embedding(m)), SemigroupHeatKernel)


def test_export_eigenpairs(tmp_path, ico2):
    _, _, K = ico2
    K.export_eigenpairs(tmp_path)
    lines = (tmp_path / "eigen_values.csv").read_text().splitlines()
    assert lines[0] == "index,eigenvalue"
    assert float(lines[2].split(",")[1]) == K.eigenvalues[1]
    assert np.array_equal(np.load(tmp_path / "eigen_vectors.npy"), K.eigenvectors)
    K.export_kernel_matrix(0.5, tmp_path / "k.npy")
    assert np.array_equal(np.load(tmp_path / "k.npy"), K.kernel_matrix(0.5))

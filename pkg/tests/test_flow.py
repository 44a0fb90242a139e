import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rough_flow.continuity import ContinuityProblem
from rough_flow.errors import SingularVertexError
from rough_flow.flow import (EvolvedMetric, build_evolved_metric, equivariance_defect,
                             evolved_distance, evolved_distance_matrix, frame_rotation,
                             metric_at, sample_metric, smoothness_diagnostic, tangency_slope,
                             write_flow_csv, _neville_at_zero)
from rough_flow.frames import tangent_frame
from rough_flow.heat import eigendecompose
from rough_flow.mesh import (build_box_surface, build_polar_grid, cube_symmetries,
                             icosahedral_rotations, vertex_permutation, z_rotation)
from rough_flow.metric import pullback_embedding, witch_hat_metric


# --- frames ---------------------------------------------------------------

def test_frame_edge_lengths(witch):
    mesh, g, K = witch
    x = 200
    f = K.frame(x)
    ell = np.sqrt(g.sq_lengths)
    for fi, c in mesh.one_ring(x):
        nb = int(mesh.faces[fi, (c + 1) % 3])
        assert np.linalg.norm(f.edge_vector(nb)) == pytest.approx(ell[fi, c], rel=1e-14)


def test_frame_flat_vertex_is_isometric(box6):
    # on a flat face interior the flattening is exact: edge vectors are an
    # isometric image of the embedded ones
    mesh, g, K = box6
    x = next(i for i in range(mesh.n_vertices) if i not in mesh.edge_line)
    f = K.frame(x)
    assert f.angle_sum == pytest.approx(2 * math.pi, rel=1e-14)
    nbs = [int(n) for n in mesh.neighbors(x)]
    A = np.array([f.edge_vector(n) for n in nbs])
    E = mesh.vertices[nbs] - mesh.vertices[x]
    assert np.allclose(A @ A.T, E @ E.T, atol=1e-14)


def test_gradient_exact_for_linear_functions(box6):
    mesh, g, K = box6
    x = next(i for i in range(mesh.n_vertices) if i not in mesh.edge_line)
    f = K.frame(x)
    a = np.array([0.3, -1.2, 0.7])
    u = mesh.vertices @ a
    grad = f.gradient @ u
    # directional derivative along each edge recovers the embedded difference
    for nb in mesh.neighbors(x):
        e = f.edge_vector(int(nb))
        assert grad @ e == pytest.approx(u[nb] - u[x], abs=1e-13)


def test_frame_singular(box6):
    mesh, g, _ = box6
    with pytest.raises(SingularVertexError):
        tangent_frame(mesh, g, min(mesh.singular))
    f = tangent_frame(mesh, g, min(mesh.singular), allow_singular=True)
    assert f.angle_sum == pytest.approx(1.5 * math.pi, rel=1e-12)


# --- samples --------------------------------------------------------------

@pytest.fixture(params=["ico3", "box6", "witch"])
def geometry(request):
    return request.getfixturevalue(request.param)


def test_sample_invariants(geometry):
    mesh, _, K = geometry
    rng = np.random.default_rng(3)
    xs = rng.choice(mesh.regular_vertices(), 6, replace=False)
    for x in xs:
        s = metric_at(K, 0.5, x)
        assert s.asymmetry <= 1e-9
        assert s.eigenvalues.min() > 0
        assert s.evaluation_gap <= 1e-8


def test_bilinearity(ico3):
    _, _, K = ico3
    P = ContinuityProblem(K, 0.5, 40)
    u, v, a = np.array([0.8, 0.1]), np.array([-0.2, 1.0]), 3.1
    pu, pv, pau = P.solve(u).phi, P.solve(v).phi, P.solve(a * u).phi
    g_uv = pu @ (P.S @ pv)
    assert pau @ (P.S @ pv) == pytest.approx(a * g_uv, rel=1e-9)
    G = metric_at(K, 0.5, 40, problem=P).G
    assert u @ G @ v == pytest.approx(g_uv, rel=1e-9)


def test_zero_vector_zero_length(ico3):
    s = metric_at(ico3[2], 0.5, 2)
    assert s.quadratic(np.zeros(2)) == 0.0
    P = ContinuityProblem(ico3[2], 0.5, 2)
    phi = P.solve(np.zeros(2)).phi
    assert phi @ (P.S @ phi) == 0.0


def test_frame_covariance(witch):
    _, _, K = witch
    for x in (17, 250):
        base = metric_at(K, 0.5, x)
        for ang in (0.4, 2.0):
            R = frame_rotation(ang)
            rot = metric_at(K, 0.5, x, frame_angle=ang)
            assert np.abs(R.T @ base.G @ R - rot.G).max() <= 1e-9 * np.abs(base.G).max()


def test_icosahedral_equivariance(ico2):
    mesh, _, K = ico2
    samples = sample_metric(K, 0.5)
    worst = 0.0
    for R in icosahedral_rotations():
        worst = max(worst, equivariance_defect(K, samples, vertex_permutation(mesh, R)))
    assert worst <= 1e-6


def test_sphere_homogeneity_coarse(ico2):
    _, _, K = ico2
    samples = sample_metric(K, 0.5)
    eig = np.array([s.eigenvalues for s in samples.values()])
    assert (eig.max() - eig.min()) / eig.max() < 0.05


def test_box_symmetry_away_from_edges(box4):
    mesh, _, K = box4
    samples = sample_metric(K, 0.5)
    away = [v for v in samples if v not in mesh.edge_line]
    for R in cube_symmetries():
        p = vertex_permutation(mesh, R)
        assert equivariance_defect(K, samples, p, away) <= 1e-6


def test_witch_polar_symmetry(witch):
    mesh, _, K = witch
    samples = sample_metric(K, 0.5, range(0, 200))
    p = vertex_permutation(mesh, z_rotation(2 * math.pi / 32))
    shifted = {int(p[v]): metric_at(K, 0.5, int(p[v])) for v in samples}
    assert equivariance_defect(K, {**samples, **shifted}, p, list(samples)) <= 1e-6


def test_threads_do_not_change_results(box4):
    _, _, K = box4
    a = sample_metric(K, 0.5, threads=1)
    b = sample_metric(K, 0.5, threads=3)
    assert list(a) == list(b)
    assert all(np.array_equal(a[x].G, b[x].G) for x in a)


def test_singular_vertices_skipped(box6):
    mesh, _, K = box6
    s = sample_metric(K, 0.5, [0, 1, 2] + sorted(mesh.singular))
    assert not set(s) & mesh.singular


def test_large_time_decay(ico3):
    _, _, K = ico3
    tr = [np.trace(metric_at(K, t, 0).G) for t in (0.5, 1.0, 2.0, 4.0)]
    assert all(b < a for a, b in zip(tr, tr[1:]))
    assert tr[-1] < 1e-2 * tr[0]


# --- tangency -------------------------------------------------------------

def test_neville_exact_on_polynomials():
    ts = [0.4, 0.2, 0.1]
    f = lambda t: 3.0 - 2.0 * t + 5.0 * t * t  # noqa: E731
    assert _neville_at_zero(ts, [f(t) for t in ts]) == pytest.approx(3.0, abs=1e-13)


def test_tangency_on_ico3(ico3):
    res = tangency_slope(ico3[2], 0, np.array([1.0, 0.0]))
    assert res.slope == pytest.approx(-2.0, rel=0.10)
    # scaling v by alpha scales the slope by alpha^2
    res2 = tangency_slope(ico3[2], 0, np.array([2.0, 0.0]))
    assert res2.slope == pytest.approx(4 * res.slope, rel=1e-9)


def test_tangency_argument_checks(ico2):
    with pytest.raises(ValueError):
        tangency_slope(ico2[2], 0, [1.0, 0.0], [0.3])
    with pytest.raises(ValueError):
        tangency_slope(ico2[2], 0, [1.0, 0.0], [0.1, 0.2])


# --- distances ------------------------------------------------------------

@pytest.fixture(scope="module")
def box_em(box6):
    return build_evolved_metric(box6[2], 0.5)


def test_edge_lengths_positive(box_em):
    assert np.all(box_em.edge_lengths > 0)


def test_distance_basics(box_em):
    d, path = evolved_distance(box_em, 5, 5)
    assert d == 0.0 and path == [5]
    d1, p1 = evolved_distance(box_em, 5, 120)
    d2, _ = evolved_distance(box_em, 120, 5)
    assert d1 == d2
    assert not set(p1) & box_em.mesh.singular
    lookup = {tuple(e): k for k, e in enumerate(map(tuple, box_em.mesh.edges))}
    total = sum(box_em.edge_lengths[lookup[(min(a, b), max(a, b))]] for a, b in zip(p1, p1[1:]))
    assert total == pytest.approx(d1, rel=1e-14)


def test_singular_endpoint_rejected(box_em):
    with pytest.raises(ValueError):
        evolved_distance(box_em, min(box_em.mesh.singular), 5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 209), st.integers(0, 209), st.integers(0, 209))
def test_triangle_inequality(box_matrix, i, j, k):
    D = box_matrix
    assert D[i, k] <= D[i, j] + D[j, k] + 1e-12


@pytest.fixture(scope="module")
def box_matrix(box_em):
    verts = [int(v) for v in box_em.mesh.regular_vertices()]
    D = evolved_distance_matrix(box_em, verts)
    assert np.all(np.isfinite(D))
    assert np.array_equal(D, D.T)
    return D


# --- smoothness -----------------------------------------------------------

def test_smoothness_excludes_tip(witch):
    mesh, _, K = witch
    tip = next(iter(mesh.singular))
    ring = [int(v) for v in mesh.neighbors(tip)]
    samples = sample_metric(K, 0.5, ring)
    em = EvolvedMetric(mesh, 0.5, samples, np.full(mesh.n_edges, np.nan))
    rep = smoothness_diagnostic(em, ring + [tip])
    assert rep.excluded == [tip]
    assert rep.n_pairs == len(ring)


def test_sphere_smoothness(ico3):
    samples = sample_metric(ico3[2], 0.5)
    em = EvolvedMetric(ico3[0], 0.5, samples, np.full(ico3[0].n_edges, np.nan))
    assert smoothness_diagnostic(em).max_variation <= 1e-2


def annulus_variation(n_lat, n_lon):
    m = build_polar_grid(n_lat, n_lon)
    K = eigendecompose(m, witch_hat_metric(m))
    r = np.arccos(np.clip(m.vertices[:, 2], -1, 1))
    reg = [int(v) for v in m.regular_vertices()
           if math.pi / 3 - 1e-12 <= r[v] <= 2 * math.pi / 3 + 1e-12]
    em = EvolvedMetric(m, 0.5, sample_metric(K, 0.5, reg), np.full(m.n_edges, np.nan))
    return smoothness_diagnostic(em).max_variation


def test_witch_smoothness_decays():
    coarse, fine = annulus_variation(12, 24), annulus_variation(24, 48)
    assert coarse < 1.0
    assert fine < coarse


def test_flow_csv(tmp_path, ico2):
    samples = sample_metric(ico2[2], 0.5, [3, 1])
    write_flow_csv(samples, tmp_path / "f.csv", header="h")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "# h"
    assert lines[1].startswith("vertex,t,G11,G12,G22")
    assert [int(l.split(",")[0]) for l in lines[2:]] == [1, 3]
    assert float(lines[2].split(",")[2]) == samples[1].G[0, 0]


def test_matrix_matches_pairwise(box_em):
    D = evolved_distance_matrix(box_em, [40, 7, 150])
    assert D[0, 1] == evolved_distance(box_em, 7, 40)[0] == evolved_distance(box_em, 40, 7)[0]
    d, p = evolved_distance(box_em, 150, 7)
    assert p[0] == 150 and p[-1] == 7

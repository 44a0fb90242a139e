import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rough_flow.errors import InvalidMetricError
from rough_flow.mesh import build_box_surface, build_icosphere, build_polar_grid, TriMesh
from rough_flow.metric import (RoughMetric, check_rough_validity, compare_metrics, load_metric,
                               pullback_embedding, save_metric, smoothstep_cutoff,
                               smoothstep_cutoff_slope, warped_segment_length,
                               witch_hat_metric, witch_hat_profile)


def test_sphere_area_converges():
    errs = []
    for s in (2, 3, 4):
        g = pullback_embedding(build_icosphere(s))
        errs.append(abs(g.total_area - 4 * math.pi) / (4 * math.pi))
    assert errs[1] <= 0.01
    assert errs[0] > errs[1] > errs[2]


def test_box_area_exact():
    g = pullback_embedding(build_box_surface(6))
    assert g.total_area == pytest.approx(4.0, abs=1e-12)


def test_equilateral_area():
    g = RoughMetric([[1.0, 1.0, 1.0]])
    assert g.areas[0] == pytest.approx(math.sqrt(3) / 4, rel=1e-15)


def test_pullback_matches_edge_lengths():
    m = build_icosphere(1)
    g = pullback_embedding(m)
    f = m.faces[5]
    assert g.sq_lengths[5, 1] == pytest.approx(np.sum((m.vertices[f[2]] - m.vertices[f[1]]) ** 2))


def test_pullback_needs_embedding():
    m = TriMesh(None, build_icosphere(0).faces)
    with pytest.raises(InvalidMetricError):
        pullback_embedding(m)


def test_degenerate_embedded_triangle():
    with pytest.raises(InvalidMetricError):
        RoughMetric([[1.0, 1.0, 4.0]])


def test_validity_flags():
    assert check_rough_validity(pullback_embedding(build_icosphere(2))).ok
    report = check_rough_validity(np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 9.0], [0.0, 1.0, 1.0]]))
    assert [f for f, _ in report.bad_faces] == [1, 2]
    assert not report


def test_witch_profile_values():
    assert witch_hat_profile(math.pi / 8) == pytest.approx(math.sin(math.pi / 8), abs=1e-15)
    assert witch_hat_profile(7 * math.pi / 8) == pytest.approx(1 / 8, abs=1e-15)


def test_cutoff_shape():
    r = np.linspace(0, math.pi, 1001)
    phi = smoothstep_cutoff(r)
    assert np.all(phi[r <= math.pi / 4] == 0.0)
    assert np.all(phi[r >= 3 * math.pi / 4] == 1.0)
    assert np.all(np.diff(phi) >= 0)


def test_cutoff_slope_bound():
    # Any cutoff rising from 0 to 1 on an interval of length pi/2 needs a
    # slope of at least 2/pi somewhere, so a 1/10 slope bound is out of
    # reach; the quintic attains exactly 15/8 of that mean slope.
    r = np.linspace(0, math.pi, 1001)
    slope = smoothstep_cutoff_slope(r)
    assert slope.max() == pytest.approx(15 / 8 * 2 / math.pi, rel=1e-6)
    assert slope.max() >= 2 / math.pi
    fd = np.gradient(smoothstep_cutoff(r), r)
    assert np.abs(fd - slope).max() < 1e-4


def test_radial_edge_exact():
    assert warped_segment_length(0.3, 1.0, 1.7, 1.0) == pytest.approx(1.4, abs=1e-15)


def test_warped_segment_quadrature():
    from scipy.integrate import quad

    r0, t0, r1, t1 = 1.0, 0.0, 1.2, 0.3
    ref, _ = quad(lambda s: math.hypot(r1 - r0, witch_hat_profile(r0 + s * (r1 - r0)) * (t1 - t0)), 0, 1)
    assert warped_segment_length(r0, t0, r1, t1) == pytest.approx(ref, rel=1e-8)


def test_witch_metric_valid():
    g = witch_hat_metric(build_polar_grid(16, 32))
    assert check_rough_validity(g).ok
    assert np.all(g.areas > 0)


def test_witch_needs_chart():
    with pytest.raises(InvalidMetricError):
        witch_hat_metric(build_icosphere(1))


def test_compare_identity():
    g = pullback_embedding(build_icosphere(2))
    c = compare_metrics(g, g)
    assert c.C == 1.0
    assert np.all(c.B == np.eye(2))
    assert np.all(c.theta == 1.0)


def test_compare_scaled_equilateral():
    h = RoughMetric([[1.0, 1.0, 1.0]])
    c = compare_metrics(h.scaled(4.0), h)
    assert np.allclose(c.B[0], 4 * np.eye(2), atol=1e-14)
    assert c.C == pytest.approx(2.0, rel=1e-14)
    assert c.theta[0] == pytest.approx(4.0, rel=1e-14)


def test_compare_mesh_mismatch():
    with pytest.raises(InvalidMetricError):
        compare_metrics(RoughMetric([[1, 1, 1]]), RoughMetric([[1, 1, 1], [1, 1, 1]]))


def random_triangles(draw_pts):
    p = draw_pts
    sq = np.column_stack([np.sum((p[:, (k + 1) % 3] - p[:, k]) ** 2, axis=1) for k in range(3)])
    return sq


def triangle_batch(n):
    return arrays(np.float64, (n, 3, 2), elements=st.floats(-2, 2, allow_nan=False))


def well_shaped(sq):
    a = np.sqrt(np.maximum((2 * (sq[:, 0] * sq[:, 1] + sq[:, 1] * sq[:, 2] + sq[:, 2] * sq[:, 0])
                            - (sq ** 2).sum(1)) / 16, 0))
    return np.all(a > 1e-2 * sq.max(axis=1))


@settings(max_examples=60, deadline=None)
@given(triangle_batch(4), triangle_batch(4))
def test_compare_properties(pg, ph):
    sg, sh = random_triangles(pg), random_triangles(ph)
    if not (well_shaped(sg) and well_shaped(sh)):
        return
    g, h = RoughMetric(sg), RoughMetric(sh)
    c, c2 = compare_metrics(g, h), compare_metrics(h, g)
    assert c.C == pytest.approx(c2.C, rel=1e-9)
    assert np.all(c.C_face >= 1.0)
    # measure representation: area_g = theta * area_h
    assert np.allclose(g.areas, c.theta * h.areas, rtol=1e-9)
    lam = np.linalg.eigvalsh(c.B)
    assert np.all(lam > 0)
    # two-sided bound C^-2 <= |B u|/|u| <= C^2
    assert np.all(lam[:, 0] >= c.C ** -2 * (1 - 1e-12))
    assert np.all(lam[:, 1] <= c.C ** 2 * (1 + 1e-12))


@settings(max_examples=40, deadline=None)
@given(triangle_batch(3), st.floats(1.0, 5.0))
def test_scaled_metric_closeness(ph, cfac):
    sh = random_triangles(ph)
    if not well_shaped(sh):
        return
    h = RoughMetric(sh)
    c = compare_metrics(h.scaled(cfac ** 2), h)
    assert np.allclose(c.B, cfac ** 2 * np.eye(2), rtol=1e-9, atol=1e-9 * cfac ** 2)
    assert np.allclose(c.theta, cfac ** 2, rtol=1e-9)
    assert c.C == pytest.approx(cfac, rel=1e-9)


def test_area_relation_on_witch():
    m = build_polar_grid(16, 32)
    g, h = witch_hat_metric(m), pullback_embedding(m)
    c = compare_metrics(g, h, m)
    assert np.abs(g.areas - c.theta * h.areas).max() <= 1e-12


def test_metric_file_round_trip(tmp_path):
    m = build_polar_grid(6, 10)
    g = witch_hat_metric(m)
    save_metric(g, tmp_path / "g.json")
    back = load_metric(tmp_path / "g.json", m)
    assert np.array_equal(back.sq_lengths, g.sq_lengths)
    with pytest.raises(InvalidMetricError):
        load_metric(tmp_path / "g.json", build_icosphere(1))

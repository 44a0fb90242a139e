"""Rough metrics as per-face flat metrics given by squared edge lengths.

The same mesh edge may carry different lengths from its two faces; that is
the whole point (the metric is only required to be measurable and locally
comparable to a smooth one). Side ``k`` of a face joins corners ``k`` and
``k + 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidMetricError

# 4-point Gauss-Legendre on [0, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


def _sq_areas(sq):
    a, b, c = sq[:, 0], sq[:, 1], sq[:, 2]
    # 16 A^2 from squared side lengths
    return (2.0 * (a * b + b * c + c * a) - (a * a + b * b + c * c)) / 16.0


@dataclass(frozen=True)
class ValidityReport:
    """Faces that fail to carry a flat metric; empty means valid."""

    bad_faces: list = field(default_factory=list)

    def __bool__(self):
        return not self.bad_faces

    @property
    def ok(self):
        return not self.bad_faces


def check_rough_validity(g):
    """List faces violating strict triangle inequalities or positivity.

    Accepts a :class:`RoughMetric` or an ``(m, 3)`` array of squared lengths.
    """
    sq = g.sq_lengths if isinstance(g, RoughMetric) else np.asarray(g, dtype=np.float64)
    bad = []
    with np.errstate(invalid="ignore"):
        ell = np.sqrt(sq)
    for f in range(len(sq)):
        row = sq[f]
        if not np.all(np.isfinite(row)) or np.any(row <= 0):
            bad.append((f, "non-positive or non-finite squared length"))
            continue
        l0, l1, l2 = ell[f]
        if not (l0 < l1 + l2 and l1 < l2 + l0 and l2 < l0 + l1):
            bad.append((f, "triangle inequality violated"))
            continue
        if _sq_areas(row[None, :])[0] <= 0:
            bad.append((f, "zero area"))
    return ValidityReport(bad)


class RoughMetric:
    """Per-face flat metric.

    Parameters
    ----------
    sq_lengths : array_like
        ``(m, 3)`` squared g-lengths of sides (01, 12, 20) of each face.
    check : bool
        Raise :class:`InvalidMetricError` on invalid faces (default True).
    """

    def __init__(self, sq_lengths, check=True):
        sq = np.array(sq_lengths, dtype=np.float64)
        if sq.ndim != 2 or sq.shape[1] != 3:
            raise InvalidMetricError("squared lengths must be an (m, 3) array")
        if check:
            report = check_rough_validity(sq)
            if not report.ok:
                f, why = report.bad_faces[0]
                raise InvalidMetricError(
                    f"face {f}: {why} ({len(report.bad_faces)} bad faces total)")
        sq.setflags(write=False)
        self.sq_lengths = sq
        with np.errstate(invalid="ignore"):
            areas = np.sqrt(np.maximum(_sq_areas(sq), 0.0))
        areas.setflags(write=False)
        self.areas = areas

    @property
    def n_faces(self):
        return len(self.sq_lengths)

    @property
    def total_area(self):
        return float(self.areas.sum())

    def scaled(self, factor):
        """Metric with every squared length multiplied by ``factor``."""
        return RoughMetric(self.sq_lengths * factor)

    def gram(self):
        """``(m, 2, 2)`` Gram matrices of the edge vectors ``p1 - p0``, ``p2 - p0``."""
        a, b, c = self.sq_lengths[:, 0], self.sq_lengths[:, 1], self.sq_lengths[:, 2]
        # |p1-p0|^2 = a, |p2-p0|^2 = c, |p2-p1|^2 = b
        off = 0.5 * (a + c - b)
        out = np.empty((len(a), 2, 2))
        out[:, 0, 0] = a
        out[:, 1, 1] = c
        out[:, 0, 1] = out[:, 1, 0] = off
        return out

    def cotangents(self):
        """``(m, 3)``: cotangent of the angle opposite side k, from the law of cosines."""
        sq = self.sq_lengths
        a = sq[:, 0]
        b = sq[:, 1]
        c = sq[:, 2]
        four_area = 4.0 * self.areas
        # side 0 (corners 0,1) is opposite corner 2, etc.
        cot0 = (b + c - a) / four_area
        cot1 = (c + a - b) / four_area
        cot2 = (a + b - c) / four_area
        return np.column_stack([cot0, cot1, cot2])


def pullback_embedding(mesh):
    """Induced metric of the embedded mesh (Euclidean edge lengths)."""
    if not mesh.is_embedded:
        raise InvalidMetricError("mesh has no embedding")
    v, f = mesh.vertices, mesh.faces
    sq = np.column_stack([
        np.sum((v[f[:, (k + 1) % 3]] - v[f[:, k]]) ** 2, axis=1) for k in range(3)
    ])
    return RoughMetric(sq)


def smoothstep_cutoff(r, lo=math.pi / 4, hi=3 * math.pi / 4):
    """Quintic smoothstep: 0 on ``[0, lo]``, 1 on ``[hi, pi]``, C^2 in between."""
    s = np.clip((np.asarray(r, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return s ** 3 * (s * (6.0 * s - 15.0) + 10.0)


def smoothstep_cutoff_slope(r, lo=math.pi / 4, hi=3 * math.pi / 4):
    s = np.clip((np.asarray(r, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return 30.0 * s ** 2 * (1.0 - s) ** 2 / (hi - lo)


def witch_hat_profile(r):
    """Warping function: ``sin r`` near 0, the cone ``(pi - r)/pi`` near pi."""
    r = np.asarray(r, dtype=np.float64)
    phi = smoothstep_cutoff(r)
    return phi * (math.pi - r) / math.pi + (1.0 - phi) * np.sin(r)


def warped_segment_length(r0, th0, r1, th1, profile=witch_hat_profile):
    """Length of the chart segment under ``dr^2 + profile(r)^2 dtheta^2``.

    4-point Gauss quadrature of the speed along the straight chart line.
    """
    r0, th0, r1, th1 = (np.asarray(x, dtype=np.float64) for x in (r0, th0, r1, th1))
    dr, dth = r1 - r0, th1 - th0
    total = 0.0
    for x, w in zip(_GL_X, _GL_W):
        fr = profile(r0 + x * dr)
        total = total + w * np.sqrt(dr * dr + fr * fr * dth * dth)
    return total


def warped_metric(mesh, profile=witch_hat_profile):
    """Intrinsic metric of ``dr^2 + profile(r)^2 dtheta^2`` on a charted grid.

    At a pole the angle is meaningless, so an edge touching ``r = 0`` or
    ``r = pi`` is taken radial (angle copied from the other endpoint).
    """
    if mesh.chart is None:
        raise InvalidMetricError("mesh carries no (r, theta) chart coordinates")
    ch = mesh.chart
    sq = np.empty((mesh.n_faces, 3))
    for k in range(3):
        k1 = (k + 1) % 3
        r0, t0 = ch[:, 2 * k], ch[:, 2 * k + 1].copy()
        r1, t1 = ch[:, 2 * k1], ch[:, 2 * k1 + 1].copy()
        pole0 = (r0 == 0.0) | (r0 == math.pi)
        pole1 = (r1 == 0.0) | (r1 == math.pi)
        t0 = np.where(pole0, t1, t0)
        t1 = np.where(pole1, t0, t1)
        sq[:, k] = warped_segment_length(r0, t0, r1, t1, profile) ** 2
    return RoughMetric(sq)


def witch_hat_metric(mesh):
    """Witch's-hat sphere: round cap glued through a collar to a cone at ``r = pi``."""
    return warped_metric(mesh, witch_hat_profile)


@dataclass(frozen=True)
class MetricComparison:
    """Closeness data of ``g`` relative to a reference ``h``.

    ``B[f]`` is the matrix of ``g`` in an ``h``-orthonormal basis of face
    ``f``, so ``g(u, v) = h(B u, v)``; ``theta = sqrt(det B)`` is the density
    of ``mu_g`` against ``mu_h``.
    """

    C_face: np.ndarray
    C: float
    B: np.ndarray
    theta: np.ndarray


def compare_metrics(g, h, mesh=None):
    """Per-face closeness constant, transfer matrix and density of ``g`` w.r.t. ``h``."""
    if g.n_faces != h.n_faces or (mesh is not None and g.n_faces != mesh.n_faces):
        raise InvalidMetricError("metrics do not live on the same mesh")
    gg, gh = g.gram(), h.gram()
    L = np.linalg.cholesky(gh)
    Linv = np.linalg.inv(L)
    B = Linv @ gg @ np.swapaxes(Linv, 1, 2)
    B = 0.5 * (B + np.swapaxes(B, 1, 2))
    lam = np.linalg.eigvalsh(B)
    C_face = np.maximum(np.sqrt(lam[:, 1]), 1.0 / np.sqrt(lam[:, 0]))
    C_face = np.maximum(C_face, 1.0)
    theta = np.sqrt(np.linalg.det(B))
    # identical faces compare exactly, not to Cholesky rounding
    same = np.all(g.sq_lengths == h.sq_lengths, axis=1)
    B[same] = np.eye(2)
    C_face[same] = 1.0
    theta[same] = 1.0
    return MetricComparison(C_face=C_face, C=float(C_face.max()), B=B, theta=theta)


def save_metric(g, path):
    data = {"faces": [[float(x) for x in row] for row in g.sq_lengths]}
    Path(path).write_text(json.dumps(data), encoding="utf-8")


def load_metric(path, mesh=None):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    g = RoughMetric(data["faces"])
    if mesh is not None and g.n_faces != mesh.n_faces:
        raise InvalidMetricError(
            f"metric has {g.n_faces} faces, mesh has {mesh.n_faces}")
    return g

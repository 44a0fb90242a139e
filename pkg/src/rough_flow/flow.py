"""Evolved metric from continuity-equation solutions, and evolved distances.

At a sample vertex with frame ``(e_1, e_2)`` the evolved metric is the 2x2
matrix ``G_ab = phi_a . S(w) phi_b`` where ``phi_a`` solves the continuity
equation in direction ``e_a`` and ``w = rho_t(x, .)``. The alternative
evaluation ``eta_a . M phi_b`` is computed next to it as a consistency check.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .continuity import DEFAULT_RTOL, ContinuityProblem
from .errors import SolverError
from .frames import TangentFrame  # noqa: F401  (re-export)

log = logging.getLogger(__name__)

DEFAULT_T_LADDER = (0.32, 0.16, 0.08)


@dataclass
class FlowSample:
    vertex: int
    t: float
    G: np.ndarray
    G_alt: np.ndarray
    residuals: tuple
    iterations: tuple
    frame_angle: float = 0.0

    @property
    def eigenvalues(self):
        return np.linalg.eigvalsh(0.5 * (self.G + self.G.T))

    @property
    def asymmetry(self):
        return float(abs(self.G[0, 1] - self.G[1, 0]))

    @property
    def evaluation_gap(self):
        """Relative max-entry gap between the two discrete evaluations."""
        return float(np.max(np.abs(self.G - self.G_alt)) / np.max(np.abs(self.G)))

    def quadratic(self, v):
        v = np.asarray(v, dtype=np.float64)
        return float(v @ self.G @ v)


def frame_rotation(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def metric_at(kernel, t, x, frame_angle=0.0, rtol=DEFAULT_RTOL, problem=None):
    """Evolved metric at vertex ``x`` in the frame rotated by ``frame_angle``.

    Columns of the rotation give the two directions in the base frame, so a
    nonzero angle samples the same tensor in a different orthonormal frame.
    """
    if problem is None:
        problem = ContinuityProblem(kernel, t, x, rtol=rtol)
    R = frame_rotation(frame_angle)
    sols = [problem.solve(R[:, a]) for a in range(2)]
    S, m = problem.S, problem.m
    G = np.empty((2, 2))
    G_alt = np.empty((2, 2))
    for a in range(2):
        Sphi = S @ sols[a].phi
        for b in range(2):
            G[b, a] = sols[b].phi @ Sphi
            G_alt[a, b] = sols[a].eta @ (m * sols[b].phi)
    return FlowSample(vertex=int(x), t=float(t), G=G, G_alt=G_alt,
                      residuals=tuple(s.residual for s in sols),
                      iterations=tuple(s.iterations for s in sols),
                      frame_angle=float(frame_angle))


def sample_metric(kernel, t, vertices=None, rtol=DEFAULT_RTOL, threads=1):
    """``{vertex: FlowSample}`` over the non-singular vertices (in index order).

    With ``threads > 1`` the vertices are mapped over a thread pool; output
    order and values do not depend on the thread count.
    """
    mesh = kernel.mesh
    if vertices is None:
        vertices = mesh.regular_vertices()
    todo = [int(x) for x in vertices if int(x) not in mesh.singular]
    for x in todo:
        kernel.frame(x)  # fill the frame cache before any threads start

    def one(x):
        return metric_at(kernel, t, x, rtol=rtol)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, todo))
    else:
        results = [one(x) for x in todo]
    return dict(zip(todo, results))


def _neville_at_zero(ts, ys):
    """Value at 0 of the interpolating polynomial through ``(ts, ys)``."""
    ts = list(map(float, ts))
    p = list(map(float, ys))
    n = len(ts)
    for k in range(1, n):
        for i in range(n - k):
            p[i] = (ts[i + k] * p[i] - ts[i] * p[i + 1]) / (ts[i + k] - ts[i])
    return p[0]


@dataclass
class TangencyResult:
    slope: float
    times: list
    difference_quotients: list
    values: list


def tangency_slope(kernel, x, v, t_list=DEFAULT_T_LADDER, rtol=DEFAULT_RTOL):
    """Extrapolated ``d/dt g_t(v, v)`` at ``t = 0``.

    Difference quotients ``(g_t(v,v) - g(v,v)) / t`` on ``t_list`` are
    Richardson-extrapolated to ``t -> 0`` (polynomial extrapolation in ``t``,
    which for a halving ladder is the classical Richardson table).
    """
    t_list = [float(t) for t in t_list]
    if len(t_list) < 2:
        raise ValueError("need at least two times for extrapolation")
    if any(b >= a for a, b in zip(t_list, t_list[1:])):
        raise ValueError("t_list must be strictly decreasing")
    v = np.asarray(v, dtype=np.float64)
    base = float(v @ v)  # frame is g-orthonormal
    vals, quots = [], []
    for t in t_list:
        gt = metric_at(kernel, t, x, rtol=rtol).quadratic(v)
        vals.append(gt)
        quots.append((gt - base) / t)
    return TangencyResult(slope=_neville_at_zero(t_list, quots), times=t_list,
                          difference_quotients=quots, values=vals)


# ---------------------------------------------------------------------------
# evolved distances

@dataclass
class EvolvedMetric:
    mesh: object
    t: float
    samples: dict
    edge_lengths: np.ndarray
    frames: dict = field(repr=False, default_factory=dict)

    def graph(self, avoid_singular=True):
        mesh = self.mesh
        e = mesh.edges
        w = self.edge_lengths.copy()
        keep = np.ones(len(e), dtype=bool)
        if avoid_singular and mesh.singular:
            sing = np.zeros(mesh.n_vertices, dtype=bool)
            sing[list(mesh.singular)] = True
            keep = ~(sing[e[:, 0]] | sing[e[:, 1]])
        n = mesh.n_vertices
        A = sparse.coo_matrix((w[keep], (e[keep, 0], e[keep, 1])), shape=(n, n)).tocsr()
        return A + A.T


def build_evolved_metric(kernel, t, rtol=DEFAULT_RTOL, samples=None, threads=1):
    """Sample ``g_t`` at every non-singular vertex and derive per-edge lengths.

    An edge's length is the mean of ``sqrt(e^T G e)`` evaluated in the two
    endpoint frames; with one singular endpoint only the other is used.
    """
    mesh = kernel.mesh
    if samples is None:
        samples = sample_metric(kernel, t, rtol=rtol, threads=threads)
    frames = {x: kernel.frame(x) for x in samples}
    lengths = np.empty(mesh.n_edges)
    for k, (i, j) in enumerate(mesh.edges):
        i, j = int(i), int(j)
        parts = []
        for a, b in ((i, j), (j, i)):
            if a in samples:
                ev = frames[a].edge_vector(b)
                parts.append(math.sqrt(max(samples[a].quadratic(ev), 0.0)))
        if not parts:
            raise SolverError(f"edge ({i}, {j}) joins two singular vertices")
        lengths[k] = sum(parts) / len(parts)
    return EvolvedMetric(mesh=mesh, t=float(t), samples=samples, edge_lengths=lengths,
                         frames=frames)


def evolved_distance(em, x, y, avoid_singular=True):
    """Shortest-path ``d_t`` on the edge graph; returns ``(distance, path)``.

    The search always starts from the smaller vertex index, so the distance
    is bit-symmetric in ``(x, y)``.
    """
    x, y = int(x), int(y)
    if avoid_singular and (x in em.mesh.singular or y in em.mesh.singular):
        raise ValueError("endpoints must be non-singular when avoiding singular vertices")
    if x == y:
        return 0.0, [x]
    a, b = min(x, y), max(x, y)
    A = em.graph(avoid_singular)
    dist, pred = csgraph.dijkstra(A, directed=False, indices=a, return_predecessors=True)
    d = float(dist[b])
    if not math.isfinite(d):
        raise SolverError(f"vertices {x} and {y} are disconnected in the evolved graph")
    path = [b]
    while path[-1] != a:
        path.append(int(pred[path[-1]]))
    path = path[::-1]
    return d, (path if a == x else path[::-1])


def evolved_distance_matrix(em, vertices, avoid_singular=True):
    """Pairwise ``d_t``; entry ``(i, j)`` equals ``evolved_distance`` bit for bit."""
    vertices = [int(v) for v in vertices]
    A = em.graph(avoid_singular)
    D = csgraph.dijkstra(A, directed=False, indices=vertices)[:, vertices]
    ids = np.array(vertices)
    D = np.where(ids[:, None] < ids[None, :], D, D.T)
    np.fill_diagonal(D, 0.0)
    return D


@dataclass
class SmoothnessReport:
    max_variation: float
    mean_variation: float
    n_pairs: int
    excluded: list


def smoothness_diagnostic(em, region=None):
    """Largest relative jump of the eigenvalues of ``G`` across region edges.

    Eigenvalues are frame independent, so adjacent samples compare without
    transporting frames. Singular vertices in ``region`` are dropped and
    listed in ``excluded``.
    """
    mesh = em.mesh
    region = set(em.samples) if region is None else set(int(v) for v in region)
    excluded = sorted(v for v in region if v in mesh.singular or v not in em.samples)
    region -= set(excluded)
    eig = {v: em.samples[v].eigenvalues for v in region}
    var = []
    for i, j in mesh.edges:
        i, j = int(i), int(j)
        if i in region and j in region:
            scale = max(eig[i].max(), eig[j].max())
            var.append(float(np.max(np.abs(eig[i] - eig[j])) / scale))
    var = np.array(var) if var else np.zeros(1)
    return SmoothnessReport(max_variation=float(var.max()), mean_variation=float(var.mean()),
                            n_pairs=len(var), excluded=excluded)


def write_flow_csv(samples, path, header=""):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("vertex,t,G11,G12,G22,eig1,eig2,residual1,residual2\n")
        for x in sorted(samples):
            s = samples[x]
            e1, e2 = s.eigenvalues
            fh.write(f"{x},{float(s.t)!r},{float(s.G[0, 0])!r},{float(s.G[0, 1])!r},{float(s.G[1, 1])!r},"
                     f"{float(e1)!r},{float(e2)!r},{float(s.residuals[0])!r},{float(s.residuals[1])!r}\n")


def equivariance_defect(kernel, samples, perm, vertices=None):
    """Largest relative change of ``g_t`` under a vertex symmetry ``perm``.

    For a metric isometry ``x -> perm[x]`` the pushed-forward tensor must
    agree with the tensor sampled at the image. Both sides are compared on
    every outgoing edge vector, which avoids matching the two tangent frames
    and works for orientation-reversing maps as well.
    """
    vertices = samples if vertices is None else vertices
    worst = 0.0
    for x in vertices:
        x = int(x)
        y = int(perm[x])
        if x not in samples or y not in samples:
            continue
        fx, fy = kernel.frame(x), kernel.frame(y)
        scale = max(samples[x].eigenvalues.max(), samples[y].eigenvalues.max())
        for nb in kernel.mesh.neighbors(x):
            qx = samples[x].quadratic(fx.edge_vector(int(nb)))
            qy = samples[y].quadratic(fy.edge_vector(int(perm[int(nb)])))
            ell = float(fx.edge_vector(int(nb)) @ fx.edge_vector(int(nb)))
            worst = max(worst, abs(qx - qy) / (scale * ell))
    return worst

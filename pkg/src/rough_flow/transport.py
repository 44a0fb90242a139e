"""Exact small-instance Wasserstein-2 distances and the metric-speed check.

The transportation LP is solved by network simplex (POT's ``emd``); the
returned plan is certified here by dual feasibility and complementary
slackness of the potentials, independent of the solver's own status.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .continuity import DEFAULT_RTOL
from .flow import metric_at

# keep POT from importing every array framework it can find
for _name in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_name}", "1")

import ot  # noqa: E402

MAX_GROUND_VERTICES = 660
MAX_SUPPORT = 1320


class TransportInputError(ValueError):
    pass


@dataclass
class DiscreteMeasure:
    masses: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=np.float64)
        if np.any(m < 0):
            raise TransportInputError("masses must be non-negative")
        self.masses = m

    @property
    def total(self):
        return float(self.masses.sum())

    def normalized(self):
        return DiscreteMeasure(self.masses / self.masses.sum())

    @classmethod
    def from_density(cls, density, mass_diag):
        """``density * dmu``, clipped at 0 and renormalised to unit mass."""
        w = np.maximum(np.asarray(density, dtype=np.float64), 0.0) * mass_diag
        return cls(w / w.sum())


@dataclass
class TransportPlan:
    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray
    cost: float
    dual_gap: float = 0.0
    dual_violation: float = 0.0

    def dense(self, shape):
        return sparse.coo_matrix((self.mass, (self.rows, self.cols)), shape=shape).toarray()

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("source,target,mass\n")
            for i, j, w in zip(self.rows, self.cols, self.mass):
                fh.write(f"{int(i)},{int(j)},{float(w)!r}\n")


def edge_lengths(mesh, g):
    """Per-edge g-length, averaged over the two incident faces."""
    acc = np.zeros(mesh.n_edges)
    cnt = np.zeros(mesh.n_edges)
    ell = np.sqrt(g.sq_lengths)
    for k in range(3):
        np.add.at(acc, mesh.face_edges[:, k], ell[:, k])
        np.add.at(cnt, mesh.face_edges[:, k], 1.0)
    return acc / cnt


def ground_distance_matrix(mesh, g, max_vertices=MAX_GROUND_VERTICES):
    """All-pairs shortest-path distances on the edge graph under ``g``."""
    from .errors import ResourceLimitError

    n = mesh.n_vertices
    if n > max_vertices:
        raise ResourceLimitError(f"{n} vertices exceed the all-pairs cap of {max_vertices}")
    e = mesh.edges
    w = edge_lengths(mesh, g)
    A = sparse.coo_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    D = csgraph.dijkstra(A, directed=False)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def w2_exact(mu, nu, D, tol=1e-9, max_iter=10_000_000):
    """Exact W_2 between two measures on the same vertex set.

    Returns
    -------
    distance : float
        ``sqrt`` of the optimal transport cost with squared ground costs.
    plan : TransportPlan
        Optimal coupling; ``dual_violation`` is the largest
        ``u_i + v_j - C_ij`` and ``dual_gap`` the complementary-slackness
        residual on the support, both relative to ``max C``.
    """
    a = mu.masses if isinstance(mu, DiscreteMeasure) else np.asarray(mu, dtype=np.float64)
    b = nu.masses if isinstance(nu, DiscreteMeasure) else np.asarray(nu, dtype=np.float64)
    if abs(a.sum() - b.sum()) > 1e-12 * max(a.sum(), 1.0):
        raise TransportInputError(
            f"total masses differ: {a.sum()!r} vs {b.sum()!r}")
    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    if len(ia) + len(ib) > MAX_SUPPORT:
        raise TransportInputError(f"combined support {len(ia) + len(ib)} exceeds {MAX_SUPPORT}")
    C = np.asarray(D, dtype=np.float64)[np.ix_(ia, ib)] ** 2
    aa = a[ia]
    bb = b[ib] * (aa.sum() / b[ib].sum())
    P, log = ot.emd(aa, bb, C, numItermax=max_iter, log=True)
    if log.get("warning"):
        raise RuntimeError(f"network simplex did not finish: {log['warning']}")
    u, v = log["u"], log["v"]
    scale = max(float(C.max()), 1e-300)
    red = C - u[:, None] - v[None, :]
    violation = float(max(-red.min(), 0.0)) / scale
    r, c = np.nonzero(P > 0)
    slack = float(np.abs(red[r, c]).max()) / scale if len(r) else 0.0
    cost = float(np.sum(P[r, c] * C[r, c]))
    plan = TransportPlan(rows=ia[r], cols=ib[c], mass=P[r, c], cost=cost,
                         dual_gap=slack, dual_violation=violation)
    if violation > tol or slack > tol:
        raise RuntimeError(
            f"optimality certificate failed (dual violation {violation:.2e}, slack {slack:.2e})")
    return math.sqrt(max(cost, 0.0)), plan


def sinkhorn_w2(mu, nu, D, reg=1e-2):
    """Entropic approximation (speed option; biased, never used for acceptance)."""
    C = np.asarray(D) ** 2
    a = np.asarray(getattr(mu, "masses", mu), dtype=np.float64)
    b = np.asarray(getattr(nu, "masses", nu), dtype=np.float64)
    P = ot.sinkhorn(a, b, C / C.max(), reg)
    return math.sqrt(float(np.sum(P * C)))


def equatorial_path(mesh, n_steps, start=None):
    """Greedy vertex path heading east near the ``z = 0`` great circle."""
    v = mesh.vertices
    lon = np.arctan2(v[:, 1], v[:, 0])
    lat = np.arcsin(np.clip(v[:, 2] / np.linalg.norm(v, axis=1), -1, 1))
    if start is None:
        cand = [i for i in range(mesh.n_vertices) if i not in mesh.singular]
        start = min(cand, key=lambda i: (round(abs(lat[i]), 12), round(abs(lon[i]), 12), i))
    path = [int(start)]
    for _ in range(n_steps):
        cur = path[-1]
        best, score = None, -np.inf
        for nb in mesh.neighbors(cur):
            nb = int(nb)
            if nb in path or nb in mesh.singular:
                continue
            dlon = (lon[nb] - lon[cur] + np.pi) % (2 * np.pi) - np.pi
            s = dlon - 2.0 * abs(lat[nb])
            if s > score:
                best, score = nb, s
        path.append(best)
    return path


@dataclass
class SpeedStep:
    source: int
    target: int
    h: float
    w2: float
    speed_w: float
    speed_g: float
    mismatch: float


@dataclass
class SpeedReport:
    t: float
    steps: list = field(default_factory=list)

    @property
    def max_mismatch(self):
        return max((s.mismatch for s in self.steps), default=0.0)

    @property
    def aggregate_mismatch(self):
        """Relative mismatch of the summed speeds over the curve."""
        sw = sum(s.speed_w * s.h for s in self.steps)
        sg = sum(s.speed_g * s.h for s in self.steps)
        if sg == 0.0:
            return 0.0 if sw == 0.0 else math.inf
        return abs(sw - sg) / sg

    def as_dict(self):
        return {
            "t": self.t,
            "max_mismatch": self.max_mismatch,
            "aggregate_mismatch": self.aggregate_mismatch,
            "steps": [s.__dict__ for s in self.steps],
        }


def metric_speed_check(kernel, t, curve, D=None, rtol=DEFAULT_RTOL, stride=1):
    """W_2 speed of ``s -> rho_t(gamma_s, .) mu`` against ``sqrt(g_t(v, v))``.

    ``curve`` is a list of vertices, consecutive ones adjacent (or equal).
    Each step compares ``W_2(nu_s, nu_{s+h}) / h``, with ``h`` the g-length
    of the curve between the two vertices, to the evolved-metric speed in the
    direction of the curve's first edge. ``stride > 1`` compares vertices
    that many edges apart along the curve (a chord diagnostic).
    """
    mesh = kernel.mesh
    if D is None:
        D = ground_distance_matrix(mesh, kernel.metric)
    report = SpeedReport(t=float(t))
    rows = {}

    def measure(x):
        if x not in rows:
            rows[x] = DiscreteMeasure.from_density(kernel.kernel_row(t, x), kernel.m)
        return rows[x]

    curve = [int(c) for c in curve]
    for a, b in zip(curve, curve[1:]):
        if a != b and b not in set(int(j) for j in mesh.neighbors(a)):
            raise ValueError(f"curve vertices {a} and {b} are not adjacent")
    for i in range(0, len(curve) - stride, stride):
        a, b = curve[i], curve[i + stride]
        seg = curve[i:i + stride + 1]
        h = sum(float(D[p, q]) for p, q in zip(seg, seg[1:]))
        if h == 0.0:
            report.steps.append(SpeedStep(a, b, 0.0, 0.0, 0.0, 0.0, 0.0))
            continue
        nxt = next(q for q in seg[1:] if q != a)
        direction, _ = kernel.frame(a).direction_to(nxt)
        w2, _ = w2_exact(measure(a), measure(b), D)
        sample = metric_at(kernel, t, a, rtol=rtol)
        speed_g = math.sqrt(max(sample.quadratic(direction), 0.0))
        speed_w = w2 / h
        report.steps.append(SpeedStep(a, b, h, w2, speed_w, speed_g,
                                      abs(speed_w - speed_g) / speed_g))
    return report

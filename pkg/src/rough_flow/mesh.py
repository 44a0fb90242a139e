"""Closed triangle meshes and the builders for the example surfaces.

A :class:`TriMesh` is combinatorial first: faces are counterclockwise vertex
triples, and the embedding is optional (intrinsic meshes carry their geometry
in a :class:`~rough_flow.metric.RoughMetric` instead). Cone points and box
corners stay in the mesh as ordinary vertices tagged ``singular``.
"""

from __future__ import annotations

import json
import math
import re
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import MeshParseError, MeshTopologyError, ResourceLimitError

MAX_ICOSPHERE_SUBDIVISIONS = 6
BOX_HALF_WIDTH = math.sqrt(1.0 / 6.0)


def _frozen(a):
    a = np.array(a)  # own copy
    a.setflags(write=False)
    return a


class TriMesh:
    """Closed, consistently oriented, connected triangle mesh.

    Parameters
    ----------
    vertices : array_like or None
        ``(n, 3)`` positions. ``None`` for purely intrinsic meshes, in which
        case ``n_vertices`` must be given.
    faces : array_like
        ``(m, 3)`` vertex indices, counterclockwise seen from outside.
    singular : iterable of int, optional
        Vertices excluded from sampling (cone tips, corners).
    chart : array_like, optional
        ``(m, 6)`` per-face chart coordinates ``[r0, th0, r1, th1, r2, th2]``.
    edge_line : iterable of int, optional
        Vertices lying on lines where the metric is only Lipschitz.
    n_vertices : int, optional
        Vertex count when ``vertices`` is None.

    Raises
    ------
    MeshTopologyError
        If an edge does not have exactly two incident faces, orientation is
        inconsistent, a vertex link is not a single fan, or the mesh is
        disconnected.
    """

    def __init__(self, vertices, faces, singular=(), chart=None, edge_line=(),
                 n_vertices=None):
        faces = np.asarray(faces, dtype=np.int64)
        if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) == 0:
            raise MeshTopologyError("faces must be a non-empty (m, 3) array")
        if vertices is None:
            if n_vertices is None:
                n_vertices = int(faces.max()) + 1
            self.vertices = None
        else:
            vertices = np.asarray(vertices, dtype=np.float64)
            if vertices.ndim != 2 or vertices.shape[1] != 3:
                raise MeshTopologyError("vertices must be an (n, 3) array")
            n_vertices = len(vertices)
            self.vertices = _frozen(vertices)
        self.n_vertices = int(n_vertices)
        if faces.min() < 0 or faces.max() >= self.n_vertices:
            raise MeshTopologyError("face index out of range")
        self.faces = _frozen(faces)
        self.singular = frozenset(int(i) for i in singular)
        self.edge_line = frozenset(int(i) for i in edge_line)
        if chart is not None:
            chart = np.asarray(chart, dtype=np.float64)
            if chart.shape != (len(faces), 6):
                raise MeshTopologyError("chart must have shape (n_faces, 6)")
            chart = _frozen(chart)
        self.chart = chart
        self._validate()

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def euler_characteristic(self):
        return self.n_vertices - self.n_edges + self.n_faces

    @property
    def is_embedded(self):
        return self.vertices is not None

    def _validate(self):
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 2] == f[:, 0])):
            raise MeshTopologyError("face with repeated vertex")
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        und = np.sort(directed, axis=1)
        keys, counts = np.unique(und, axis=0, return_counts=True)
        bad = np.flatnonzero(counts != 2)
        if len(bad):
            i, j = keys[bad[0]]
            kind = "boundary" if counts[bad[0]] == 1 else "non-manifold"
            raise MeshTopologyError(
                f"{kind} edge ({i}, {j}) has {counts[bad[0]]} incident face(s)")
        dkeys, dcounts = np.unique(directed, axis=0, return_counts=True)
        if np.any(dcounts != 1):
            i, j = dkeys[np.flatnonzero(dcounts != 1)[0]]
            raise MeshTopologyError(f"inconsistent orientation across edge ({i}, {j})")
        used = np.zeros(self.n_vertices, dtype=bool)
        used[f.ravel()] = True
        if not used.all():
            raise MeshTopologyError(f"vertex {int(np.flatnonzero(~used)[0])} has no faces")
        ncomp, _ = csgraph.connected_components(self.adjacency, directed=False)
        if ncomp != 1:
            raise MeshTopologyError(f"mesh has {ncomp} connected components")
        # one_ring raises if a link is not a single cycle
        for i in range(self.n_vertices):
            self.one_ring(i)

    @cached_property
    def edges(self):
        """``(E, 2)`` unique undirected edges, each row sorted."""
        f = self.faces
        und = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        return _frozen(np.unique(und, axis=0))

    @cached_property
    def face_edges(self):
        """``(m, 3)`` edge index of local side k, joining corners k and k+1."""
        f = self.faces
        lookup = {(int(a), int(b)): e for e, (a, b) in enumerate(self.edges)}
        out = np.empty_like(f)
        for k in range(3):
            a, b = f[:, k], f[:, (k + 1) % 3]
            lo, hi = np.minimum(a, b), np.maximum(a, b)
            out[:, k] = [lookup[(int(x), int(y))] for x, y in zip(lo, hi)]
        return _frozen(out)

    @cached_property
    def adjacency(self):
        """Symmetric CSR vertex adjacency (0/1 entries)."""
        f = self.faces
        i = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
        j = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
        a = sparse.coo_matrix((np.ones(len(i)), (i, j)),
                              shape=(self.n_vertices, self.n_vertices)).tocsr()
        a = ((a + a.T) > 0).astype(np.float64)
        return a.tocsr()

    @cached_property
    def vertex_faces(self):
        """List of arrays: faces incident to each vertex."""
        order = np.argsort(self.faces.ravel(), kind="stable")
        verts = self.faces.ravel()[order]
        splits = np.searchsorted(verts, np.arange(1, self.n_vertices))
        return [_frozen(g // 3) for g in np.split(order, splits)]

    def neighbors(self, i):
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    def one_ring(self, i):
        """Incident faces of vertex ``i`` in counterclockwise fan order.

        Returns
        -------
        list of (face, corner) tuples
            ``corner`` is the local index of ``i`` in the face; consecutive
            entries share the edge from ``i`` to the previous face's last
            vertex.
        """
        cache = self.__dict__.setdefault("_ring_cache", {})
        if i in cache:
            return cache[i]
        by_next = {}
        for fi in self.vertex_faces[i]:
            c = int(np.flatnonzero(self.faces[fi] == i)[0])
            by_next[int(self.faces[fi, (c + 1) % 3])] = (int(fi), c)
        start = next(iter(by_next))
        ring, a = [], start
        while True:
            fi, c = by_next[a]
            ring.append((fi, c))
            a = int(self.faces[fi, (c + 2) % 3])
            if a == start:
                break
            if a not in by_next or len(ring) > len(by_next):
                raise MeshTopologyError(f"link of vertex {i} is not a single fan")
        if len(ring) != len(by_next):
            raise MeshTopologyError(f"vertex {i} is a non-manifold pinch point")
        cache[i] = ring
        return ring

    def regular_vertices(self):
        """Sorted indices of vertices not tagged singular."""
        return np.array([i for i in range(self.n_vertices) if i not in self.singular],
                        dtype=np.int64)

    def max_edge_length(self):
        if self.vertices is None:
            raise ValueError("mesh has no embedding")
        e = self.edges
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).max())


# ---------------------------------------------------------------------------
# builders

_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def _icosahedron():
    p = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array([
        (-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0),
        (0, -1, p), (0, 1, p), (0, -1, -p), (0, 1, -p),
        (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1),
    ], dtype=np.float64)
    return v / np.linalg.norm(v, axis=1)[:, None], np.array(_ICO_FACES)


def build_icosphere(subdivisions, radius=1.0):
    """Loop-style midpoint subdivision of the icosahedron, projected to the sphere.

    Parameters
    ----------
    subdivisions : int
        Number of 1-to-4 refinements, at most 6.
    radius : float
        Sphere radius.

    Returns
    -------
    TriMesh
        ``10 * 4**s + 2`` vertices, ``20 * 4**s`` faces.
    """
    s = int(subdivisions)
    if s < 0:
        raise ValueError("subdivisions must be non-negative")
    if s > MAX_ICOSPHERE_SUBDIVISIONS:
        raise ResourceLimitError(
            f"subdivisions={s} exceeds the cap of {MAX_ICOSPHERE_SUBDIVISIONS}")
    verts, faces = _icosahedron()
    verts = list(verts)
    for _ in range(s):
        mid = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in mid:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                mid[key] = len(verts) - 1
            return mid[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.array(new)
    v = np.array(verts)
    # re-normalize in one pass so every vertex is on the sphere to rounding
    v = v / np.linalg.norm(v, axis=1)[:, None]
    return TriMesh(radius * v, faces)


def build_box_surface(per_edge, half_width=BOX_HALF_WIDTH):
    """Triangulated surface of the cube ``[-w, w]^3``.

    Each cube face is an ``per_edge x per_edge`` grid of squares split along
    diagonals that radiate from the face centre, so for even ``per_edge`` the
    mesh is invariant under the full 48-element cube group. The 8 corners are
    tagged singular; vertices on the 12 cube edges are recorded in
    ``edge_line``.
    """
    n = int(per_edge)
    if n < 2:
        raise ValueError("per_edge must be >= 2")
    index = {}
    verts = []

    def vid(p):
        if p not in index:
            index[p] = len(verts)
            verts.append(p)
        return index[p]

    faces = []
    for axis in range(3):
        for side in (0, n):
            # (u, v, normal) right-handed with outward normal
            u_ax, v_ax = (axis + 1) % 3, (axis + 2) % 3
            if side == 0:
                u_ax, v_ax = v_ax, u_ax

            def lattice(a, b):
                p = [0, 0, 0]
                p[axis], p[u_ax], p[v_ax] = side, a, b
                return vid(tuple(p))

            for a in range(n):
                for b in range(n):
                    p00, p10 = lattice(a, b), lattice(a + 1, b)
                    p01, p11 = lattice(a, b + 1), lattice(a + 1, b + 1)
                    same_half = (2 * a < n) == (2 * b < n)
                    if same_half:
                        faces += [(p00, p10, p11), (p00, p11, p01)]
                    else:
                        faces += [(p00, p10, p01), (p10, p11, p01)]
    lat = np.array(verts, dtype=np.int64)
    on_bound = (lat == 0) | (lat == n)
    nb = on_bound.sum(axis=1)
    corners = np.flatnonzero(nb == 3)
    edge_line = np.flatnonzero(nb >= 2)
    pos = (2.0 * lat / n - 1.0) * half_width
    return TriMesh(pos, faces, singular=corners, edge_line=edge_line)


def build_polar_grid(n_lat, n_lon):
    """Sphere-topology grid in chart coordinates ``(r, theta) in [0, pi] x S^1``.

    Vertex 0 is the pole ``r = 0``, the last vertex is the pole ``r = pi`` and
    is tagged singular (the witch's-hat cone tip). Interior rings sit at
    ``r_k = k pi / n_lat``. Polar caps are explicit triangle fans. The
    embedding places vertices on the unit sphere for visualisation only.

    Chart coordinates are stored per face with the seam unwrapped; a pole's
    angle is the mean of the two other corners' angles and carries no
    geometric meaning.
    """
    n_lat, n_lon = int(n_lat), int(n_lon)
    if n_lat < 4 or n_lon < 8:
        raise ValueError("need n_lat >= 4 and n_lon >= 8")
    dth = 2.0 * math.pi / n_lon
    rs = [0.0]
    ths = [0.0]
    for k in range(1, n_lat):
        for j in range(n_lon):
            rs.append(k * math.pi / n_lat)
            ths.append(j * dth)
    rs.append(math.pi)
    ths.append(0.0)
    south = len(rs) - 1

    def ring(k, j):
        return 1 + (k - 1) * n_lon + (j % n_lon)

    faces, chart = [], []

    def add(tri, coords):
        faces.append(tri)
        chart.append([c for rc in coords for c in rc])

    for j in range(n_lon):
        t0, t1 = j * dth, (j + 1) * dth
        r1 = math.pi / n_lat
        add((0, ring(1, j), ring(1, j + 1)), [(0.0, 0.5 * (t0 + t1)), (r1, t0), (r1, t1)])
        for k in range(1, n_lat - 1):
            ra, rb = k * math.pi / n_lat, (k + 1) * math.pi / n_lat
            a, b = ring(k, j), ring(k, j + 1)
            c, d = ring(k + 1, j), ring(k + 1, j + 1)
            add((a, c, d), [(ra, t0), (rb, t0), (rb, t1)])
            add((a, d, b), [(ra, t0), (rb, t1), (ra, t1)])
        rl = (n_lat - 1) * math.pi / n_lat
        add((ring(n_lat - 1, j), south, ring(n_lat - 1, j + 1)),
            [(rl, t0), (math.pi, 0.5 * (t0 + t1)), (rl, t1)])
    r = np.array(rs)
    th = np.array(ths)
    pos = np.column_stack([np.sin(r) * np.cos(th), np.sin(r) * np.sin(th), np.cos(r)])
    pos[0] = (0.0, 0.0, 1.0)
    pos[south] = (0.0, 0.0, -1.0)
    return TriMesh(pos, faces, singular=[south], chart=chart)


# ---------------------------------------------------------------------------
# OFF i/o

def _sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_mesh(mesh, path):
    """Write ``mesh`` as OFF; tags and chart go to ``<path>.json`` when present.

    Coordinates are written with ``repr`` so reloading is bit-exact.
    """
    path = Path(path)
    lines = ["OFF", f"{mesh.n_vertices} {mesh.n_faces} {mesh.n_edges}"]
    verts = mesh.vertices if mesh.is_embedded else np.zeros((mesh.n_vertices, 3))
    lines += [" ".join(repr(float(c)) for c in p) for p in verts]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {}
    if mesh.singular:
        meta["singular"] = sorted(mesh.singular)
    if mesh.edge_line:
        meta["edge_line"] = sorted(mesh.edge_line)
    if mesh.chart is not None:
        meta["chart"] = {str(i): [float(c) for c in row] for i, row in enumerate(mesh.chart)}
    if not mesh.is_embedded:
        meta["embedded"] = False
    side = _sidecar(path)
    if meta:
        side.write_text(json.dumps(meta), encoding="utf-8")
    elif side.exists():
        side.unlink()


def _data_lines(text):
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield no, line


def load_mesh(path):
    """Read an OFF file (plus optional JSON sidecar) into a :class:`TriMesh`.

    Raises
    ------
    MeshParseError
        Malformed header, counts, coordinates or face lines.
    MeshTopologyError
        Boundary or non-manifold edges, inconsistent orientation.
    """
    path = Path(path)
    lines = list(_data_lines(path.read_text(encoding="utf-8")))
    if not lines:
        raise MeshParseError("empty file", line=1)
    no, head = lines[0]
    rest = lines[1:]
    if head == "OFF":
        if not rest:
            raise MeshParseError("missing counts line", line=no)
        no, counts = rest[0]
        rest = rest[1:]
    elif head.startswith("OFF"):
        counts = head[3:].strip()
    else:
        raise MeshParseError(f"expected 'OFF' header, got {head!r}", line=no)
    try:
        nv, nf = (int(x) for x in counts.split()[:2])
    except ValueError:
        raise MeshParseError(f"bad counts line {counts!r}", line=no) from None
    if nv <= 0 or nf <= 0:
        raise MeshParseError("vertex and face counts must be positive", line=no)
    if len(rest) < nv + nf:
        last = rest[-1][0] if rest else no
        raise MeshParseError(f"expected {nv} vertices and {nf} faces, file ends early", line=last)
    verts = np.empty((nv, 3))
    for k in range(nv):
        no, line = rest[k]
        parts = line.split()
        try:
            if len(parts) < 3:
                raise ValueError
            verts[k] = [float(x) for x in parts[:3]]
        except ValueError:
            raise MeshParseError(f"bad vertex line {line!r}", line=no) from None
    faces = np.empty((nf, 3), dtype=np.int64)
    face_lines = []
    for k in range(nf):
        no, line = rest[nv + k]
        face_lines.append(no)
        parts = line.split()
        try:
            ints = [int(x) for x in parts]
        except ValueError:
            raise MeshParseError(f"bad face line {line!r}", line=no) from None
        if len(ints) < 4 or ints[0] != 3 or len(ints) < 1 + ints[0]:
            raise MeshParseError("only triangular faces '3 i j k' are supported", line=no)
        tri = ints[1:4]
        if min(tri) < 0 or max(tri) >= nv:
            raise MeshParseError(f"face index out of range in {line!r}", line=no)
        faces[k] = tri
    meta = {}
    side = _sidecar(path)
    if side.exists():
        try:
            meta = json.loads(side.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise MeshParseError(f"sidecar {side.name}: {exc.msg}", line=exc.lineno) from None
    chart = None
    if "chart" in meta:
        chart = np.zeros((nf, 6))
        for key, row in meta["chart"].items():
            chart[int(key)] = row
    embedded = meta.get("embedded", True)
    try:
        return TriMesh(verts if embedded else None, faces,
                       singular=meta.get("singular", ()), chart=chart,
                       edge_line=meta.get("edge_line", ()), n_vertices=nv)
    except MeshTopologyError as exc:
        raise MeshTopologyError(str(exc), line=_culprit_line(str(exc), faces, face_lines)) from None


def _culprit_line(message, faces, face_lines):
    """File line of the first face touching the edge or vertex named in ``message``."""
    m = re.search(r"edge \((\d+), (\d+)\)", message)
    if m:
        i, j = int(m.group(1)), int(m.group(2))
        hit = np.flatnonzero(np.any(faces == i, axis=1) & np.any(faces == j, axis=1))
    else:
        m = re.search(r"vertex (\d+)", message)
        if not m:
            return None
        hit = np.flatnonzero(np.any(faces == int(m.group(1)), axis=1))
    return face_lines[int(hit[0])] if len(hit) else None


# ---------------------------------------------------------------------------
# symmetries

def vertex_permutation(mesh, R, tol=1e-9):
    """Permutation ``p`` with ``R @ v[i] == v[p[i]]``, or None if ``R`` is no symmetry.

    The face set must also be preserved, including orientation.
    """
    from scipy.spatial import cKDTree

    v = mesh.vertices
    img = v @ np.asarray(R, dtype=np.float64).T
    dist, idx = cKDTree(v).query(img)
    if dist.max() > tol or len(set(idx.tolist())) != mesh.n_vertices:
        return None
    det = np.linalg.det(R)
    mapped = idx[mesh.faces]
    if det < 0:
        mapped = mapped[:, ::-1]
    canon = {tuple(np.roll(f, -int(np.argmin(f)))) for f in mesh.faces}
    for f in mapped:
        if tuple(np.roll(f, -int(np.argmin(f)))) not in canon:
            return None
    return idx


def _closure(generators):
    group = [np.eye(3)]
    frontier = [np.eye(3)]
    while frontier:
        nxt = []
        for a in frontier:
            for gen in generators:
                b = np.round(gen @ a, 12)
                if not any(np.allclose(b, c, atol=1e-9) for c in group):
                    group.append(b)
                    nxt.append(b)
        frontier = nxt
    return group


def _axis_rotation(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def icosahedral_rotations():
    """The 60 rotations preserving the base icosahedron of :func:`build_icosphere`."""
    v, f = _icosahedron()
    five = _axis_rotation(v[0], 2 * math.pi / 5)
    c = v[f[0]].mean(axis=0)
    three = _axis_rotation(c, 2 * math.pi / 3)
    return _closure([five, three])


def cube_symmetries():
    """All 48 signed permutation matrices."""
    out = []
    for perm in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
        for signs in np.ndindex(2, 2, 2):
            R = np.zeros((3, 3))
            for i, j in enumerate(perm):
                R[i, j] = -1.0 if signs[i] else 1.0
            out.append(R)
    return out


def z_rotation(angle):
    return _axis_rotation((0.0, 0.0, 1.0), angle)

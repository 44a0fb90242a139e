"""Vertex tangent frames from flattening the one-ring.

The corner angles around a vertex are rescaled to sum to ``2 pi`` and laid
out counterclockwise; the first incident edge points along ``e_1``. Inside a
face the true g-geometry is used, so per-face gradients are exact and only
their rotation into the vertex frame uses the rescaled angles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import SingularVertexError


def _corner_angle(sq, k):
    """Angle at corner k of each face (between sides k and k-1)."""
    a = sq[:, k]                # side k: corners k, k+1
    c = sq[:, (k + 2) % 3]      # side k-1: corners k-1, k
    b = sq[:, (k + 1) % 3]      # opposite side
    cosv = (a + c - b) / (2.0 * np.sqrt(a * c))
    return np.arccos(np.clip(cosv, -1.0, 1.0))


@dataclass(frozen=True)
class TangentFrame:
    """Orthonormal frame at a non-singular vertex.

    ``gradient`` is a ``(2, n)`` sparse matrix mapping vertex values to the
    area-weighted average of the one-ring P1 gradients, in frame coordinates.
    ``neighbor_vectors`` maps each one-ring neighbour to the frame coordinates
    of the edge vector pointing to it.
    """

    vertex: int
    angle_sum: float
    gradient: sparse.csr_matrix
    neighbor_vectors: dict

    def edge_vector(self, nb):
        return self.neighbor_vectors[int(nb)]

    def direction_to(self, nb):
        """Unit frame vector pointing along the edge to ``nb``, and the edge length."""
        e = self.neighbor_vectors[int(nb)]
        ell = float(np.hypot(e[0], e[1]))
        return e / ell, ell


def tangent_frame(mesh, g, x, allow_singular=False):
    """Build the flattened one-ring frame at vertex ``x``."""
    x = int(x)
    if x in mesh.singular and not allow_singular:
        raise SingularVertexError(f"vertex {x} is tagged singular; no tangent frame")
    ring = mesh.one_ring(x)
    if not ring:
        raise SingularVertexError(f"vertex {x} has an empty one-ring")
    sq = g.sq_lengths
    fidx = np.array([f for f, _ in ring])
    corner = np.array([c for _, c in ring])
    angles = np.array([_corner_angle(sq[[f]], c)[0] for f, c in ring])
    total = float(angles.sum())
    scale = 2.0 * math.pi / total
    start = np.concatenate([[0.0], np.cumsum(angles[:-1])]) * scale
    n = mesh.n_vertices
    rows, cols, vals = [], [], []
    wsum = 0.0
    vectors = {}
    for f, c, alpha, a0 in zip(fidx, corner, angles, start):
        ia = int(mesh.faces[f, (c + 1) % 3])
        ib = int(mesh.faces[f, (c + 2) % 3])
        la = math.sqrt(sq[f, c])
        lb = math.sqrt(sq[f, (c + 2) % 3])
        # face-local coordinates, first axis along x -> ia
        P = np.array([[la, 0.0], [lb * math.cos(alpha), lb * math.sin(alpha)]])
        Pinv = np.linalg.inv(P)  # grad = Pinv @ [u_a - u_x, u_b - u_x]
        rot = np.array([[math.cos(a0), -math.sin(a0)], [math.sin(a0), math.cos(a0)]])
        Gf = rot @ Pinv
        area = 0.5 * la * lb * math.sin(alpha)
        wsum += area
        for d in range(2):
            rows += [d, d, d]
            cols += [ia, ib, x]
            vals += [area * Gf[d, 0], area * Gf[d, 1], -area * (Gf[d, 0] + Gf[d, 1])]
        vectors[ia] = la * np.array([math.cos(a0), math.sin(a0)])
    D = sparse.coo_matrix((np.array(vals) / wsum, (rows, cols)), shape=(2, n)).tocsr()
    D.sum_duplicates()
    return TangentFrame(vertex=x, angle_sum=total, gradient=D, neighbor_vectors=vectors)


def vertex_gradient_coefficients(frame, v):
    """Dense length-n vector ``c`` with ``c . u = grad u(x) . v``."""
    v = np.asarray(v, dtype=np.float64)
    return np.asarray(frame.gradient.T @ v).ravel()

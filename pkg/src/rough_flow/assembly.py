"""P1 stiffness and lumped mass operators under a rough metric.

Everything is computed from intrinsic squared edge lengths. Face weights for
the weighted stiffness are arithmetic means of the vertex weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import io as spio
from scipy import sparse

from .errors import InvalidMetricError


@dataclass(frozen=True)
class SparseOperator:
    """Symmetric CSR matrix over vertex functions, tagged ``stiffness`` or ``mass``."""

    matrix: sparse.csr_matrix
    kind: str

    @property
    def n(self):
        return self.matrix.shape[0]

    def __matmul__(self, u):
        return self.matrix @ u

    def diagonal(self):
        return self.matrix.diagonal()

    def toarray(self):
        return self.matrix.toarray()


def _check(mesh, g):
    if g.n_faces != mesh.n_faces:
        raise InvalidMetricError(f"metric has {g.n_faces} faces, mesh has {mesh.n_faces}")


def face_weights(mesh, omega):
    """Arithmetic mean of per-vertex weights over each face."""
    w = np.asarray(omega, dtype=np.float64)
    if w.shape != (mesh.n_vertices,):
        raise ValueError("weights must be one value per vertex")
    if not np.all(w > 0):
        raise ValueError(
            f"weights must be strictly positive (min {w.min():.3e} at vertex {int(np.argmin(w))})")
    f = mesh.faces
    return (w[f[:, 0]] + w[f[:, 1]] + w[f[:, 2]]) / 3.0


def _edge_weights(mesh, g, omega):
    """Per-face per-side values ``w_f cot(angle opposite side) / 2``."""
    _check(mesh, g)
    half_cot = 0.5 * g.cotangents()
    if omega is None:
        return half_cot
    return half_cot * face_weights(mesh, omega)[:, None]


def assemble_stiffness(mesh, g, omega=None):
    """Weighted cotangent stiffness ``S(omega)``.

    Off-diagonal ``(i, j) = -1/2 sum_f w_f cot(alpha_f)`` over faces on edge
    ``ij``; the diagonal is minus the off-diagonal row sum, so constants are
    in the kernel exactly. Obtuse angles give negative weights and are kept.

    Parameters
    ----------
    omega : array_like, optional
        Positive per-vertex weights; ``None`` means the unweighted operator.
    """
    c = _edge_weights(mesh, g, omega)
    f = mesh.faces
    n = mesh.n_vertices
    i = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    j = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    w = np.concatenate([c[:, 0], c[:, 1], c[:, 2]])
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    # one value per unordered pair, summed in fixed face order
    upper = sparse.coo_matrix((-w, (lo, hi)), shape=(n, n)).tocsr()
    upper.sum_duplicates()
    off = upper + upper.T
    diag = -np.asarray(off.sum(axis=1)).ravel()
    S = (off + sparse.diags(diag)).tocsr()
    S.sort_indices()
    return SparseOperator(S, "stiffness")


def assemble_mass(mesh, g):
    """Lumped mass: one third of the incident g-areas at each vertex."""
    _check(mesh, g)
    f = mesh.faces
    third = g.areas / 3.0
    m = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(m, f[:, k], third)
    return SparseOperator(sparse.diags(m).tocsr(), "mass")


def dirichlet_energy(mesh, g, u, omega=None):
    """``sum_f w_f * area_f * |grad u|_g^2`` for the P1 interpolant of ``u``.

    Computed per face from the Gram matrix, independently of the cotangent
    formula, as a cross-check of ``u . S(omega) u``.
    """
    u = np.asarray(u, dtype=np.float64)
    f = mesh.faces
    G = g.gram()
    du = np.column_stack([u[f[:, 1]] - u[f[:, 0]], u[f[:, 2]] - u[f[:, 0]]])
    sol = np.linalg.solve(G, du[:, :, None])[:, :, 0]
    grad_sq = np.einsum("fi,fi->f", du, sol)
    wf = np.ones(len(f)) if omega is None else face_weights(mesh, omega)
    return float(np.sum(wf * g.areas * grad_sq))


def face_gradient_inner(mesh, g, u, v):
    """Per-face ``g(grad u, grad v)`` of P1 interpolants."""
    f = mesh.faces
    G = g.gram()
    du = np.column_stack([u[f[:, 1]] - u[f[:, 0]], u[f[:, 2]] - u[f[:, 0]]])
    dv = np.column_stack([v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]])
    sol = np.linalg.solve(G, dv[:, :, None])[:, :, 0]
    return np.einsum("fi,fi->f", du, sol)


def _apply_by_differences(S, u):
    """``S u`` as ``sum_j S_ij (u_j - u_i)``; exactly zero on constants."""
    A = S.matrix.tocoo()
    off = A.row != A.col
    r, c, w = A.row[off], A.col[off], A.data[off]
    out = np.zeros(len(u))
    np.add.at(out, r, w * (u[c] - u[r]))
    return out


def apply_product_formula(mesh, g, omega, u, S1=None, M=None):
    """``M^{-1}(omega * S(1) u) - g(grad u, grad omega)``.

    The discrete product-rule splitting of the weighted operator
    ``-div(omega grad u)``. The gradient pairing is computed per face and
    averaged to vertices with the lumped area weights.
    """
    u = np.asarray(u, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if S1 is None:
        S1 = assemble_stiffness(mesh, g)
    if M is None:
        M = assemble_mass(mesh, g)
    m = M.diagonal()
    lap = omega * _apply_by_differences(S1, u) / m
    if np.all(omega == omega[0]):
        return lap
    per_face = face_gradient_inner(mesh, g, u, omega) * g.areas / 3.0
    avg = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(avg, mesh.faces[:, k], per_face)
    return lap - avg / m


def product_formula_residual(mesh, g, omega, u):
    """Relative M-norm gap between the product formula and ``M^{-1} S(omega) u``."""
    S1 = assemble_stiffness(mesh, g)
    Sw = assemble_stiffness(mesh, g, omega)
    M = assemble_mass(mesh, g)
    m = M.diagonal()
    direct = (Sw @ u) / m
    split = apply_product_formula(mesh, g, omega, u, S1=S1, M=M)
    diff = direct - split
    return float(np.sqrt(np.sum(m * diff ** 2)) / np.sqrt(np.sum(m * direct ** 2)))


def export_matrix_market(op, path, comment=""):
    spio.mmwrite(str(Path(path)), op.matrix, comment=comment, symmetry="symmetric")

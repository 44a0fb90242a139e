"""Weighted elliptic solve for the continuity equation.

For fixed ``(t, x)`` the weight is ``w = rho_t(x, .)`` and, for a tangent
vector ``v`` at ``x``, the potential solves ``S(w) phi = M eta`` with
``eta = (d_x rho_t(x, .))(v)`` and ``sum_y phi(y) M_yy = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .assembly import assemble_stiffness
from .errors import SolverError

DEFAULT_RTOL = 1e-12


@dataclass
class CESolution:
    phi: np.ndarray
    eta: np.ndarray
    weight: np.ndarray
    residual: float
    iterations: int
    mean: float
    history: list = field(default_factory=list, repr=False)

    def m_norm(self, m):
        return float(math.sqrt(np.sum(m * self.phi ** 2)))


def projected_cg(A, b, m, precond=None, rtol=DEFAULT_RTOL, maxiter=None, x0=None):
    """Preconditioned CG for a consistent system whose kernel is the constants.

    After every update the iterate is projected to ``sum m x = 0`` and the
    residual to ``sum r = 0`` (the range of ``A``).

    Parameters
    ----------
    A : sparse matrix
        Symmetric positive semidefinite, ``A 1 = 0``.
    b : ndarray
        Right-hand side with ``sum b = 0``.
    m : ndarray
        Mass weights defining the mean-zero constraint.
    precond : callable, optional
        ``r -> z``, symmetric positive definite. Defaults to Jacobi.

    Returns
    -------
    x, history
        ``history`` lists relative residual norms, one per iteration.
    """
    n = len(b)
    if maxiter is None:
        maxiter = 20 * n
    total = m.sum()

    def project(u):
        return u - (m @ u) / total

    if precond is None:
        dinv = 1.0 / A.diagonal()
        precond = lambda r: dinv * r  # noqa: E731
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), [0.0]
    x = np.zeros(n) if x0 is None else project(np.asarray(x0, dtype=np.float64))
    r = b - A @ x
    r -= r.mean()
    z = precond(r)
    p = z.copy()
    rz = r @ z
    history = []
    for _ in range(maxiter):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x = project(x + alpha * p)
        r = r - alpha * Ap
        r -= r.mean()
        rel = np.linalg.norm(r) / bnorm
        history.append(float(rel))
        if rel <= rtol:
            # confirm against the true residual, drift in r is possible
            true = np.linalg.norm(b - A @ x) / bnorm
            if true <= rtol:
                history[-1] = float(true)
                return x, history
            r = b - A @ x
            r -= r.mean()
        z = precond(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"CG did not reach rtol={rtol:g} in {maxiter} iterations "
        f"(last residual {history[-1]:.3e})", history)


class ContinuityProblem:
    """Everything fixed by ``(t, x)``: weight, weighted stiffness, frame.

    Parameters
    ----------
    kernel : HeatKernel or SemigroupHeatKernel
    precond : {"diagonal", "unweighted"}
        Jacobi on ``S(w)``, or a sparse factorisation of ``S(1) + M``.
    """

    def __init__(self, kernel, t, x, rtol=DEFAULT_RTOL, precond="diagonal", maxiter=None):
        self.kernel = kernel
        self.mesh = kernel.mesh
        self.metric = kernel.metric
        self.t = float(t)
        self.x = int(x)
        self.rtol = rtol
        self.maxiter = maxiter
        self.frame = kernel.frame(self.x)
        self.m = kernel.m
        self.weight = kernel.kernel_row(self.t, self.x)
        wmin = float(self.weight.min())
        if not wmin > 0:
            raise SolverError(
                f"heat-kernel weight is non-positive (min {wmin:.3e}) at t={self.t:g}; "
                "t is below the positivity threshold of this mesh")
        self.S = assemble_stiffness(self.mesh, self.metric, self.weight).matrix
        if precond == "diagonal":
            self._precond = None
        elif precond == "unweighted":
            shifted = (kernel.stiffness.matrix + sparse.diags(self.m)).tocsc()
            lu = splu(shifted)
            self._precond = lu.solve
        else:
            raise ValueError(f"unknown preconditioner {precond!r}")

    def source(self, v):
        """``eta`` projected to exact M-mean zero."""
        eta = self.kernel.kernel_dx(self.t, self.x, v)
        return eta - (self.m @ eta) / self.m.sum()

    def solve(self, v, eta=None):
        v = np.asarray(v, dtype=np.float64)
        n = self.mesh.n_vertices
        if eta is None:
            if not np.any(v):
                return CESolution(np.zeros(n), np.zeros(n), self.weight, 0.0, 0, 0.0, [0.0])
            eta = self.source(v)
        b = self.m * eta
        b -= b.mean()
        phi, hist = projected_cg(self.S, b, self.m, self._precond, self.rtol, self.maxiter)
        res = float(np.linalg.norm(self.S @ phi - self.m * eta) / max(np.linalg.norm(self.m * eta), 1e-300))
        return CESolution(phi=phi, eta=eta, weight=self.weight, residual=res,
                          iterations=len(hist), mean=float(self.m @ phi), history=hist)

    def energy(self, sol):
        return float(sol.phi @ (self.S @ sol.phi))


def solve_ce(kernel, t, x, v, **kw):
    """Solve the continuity equation at ``(t, x)`` in direction ``v`` (frame coordinates)."""
    return ContinuityProblem(kernel, t, x, **kw).solve(v)


def ce_nondegeneracy_check(problem, sol):
    """Weighted Dirichlet energy ``phi . S(w) phi`` of a solution."""
    return problem.energy(sol)


def stability_bound(kernel, problem, sol):
    """``(|phi|_M, |eta|_M / (min w * lambda_1))``: the first must not exceed the second."""
    m = kernel.m
    lam1 = float(kernel.eigenvalues[1])
    phi_norm = math.sqrt(np.sum(m * sol.phi ** 2))
    eta_norm = math.sqrt(np.sum(m * sol.eta ** 2))
    return phi_norm, eta_norm / (float(problem.weight.min()) * lam1)


def transport_vector(frame_from, frame_to, v):
    """Carry frame coordinates ``v`` across the edge between two adjacent vertices.

    The angle of ``v`` against the edge direction is preserved (discrete
    Levi-Civita transport along the edge).
    """
    a, b = frame_from.vertex, frame_to.vertex
    e_from = frame_from.edge_vector(b)
    e_to = -frame_to.edge_vector(a)
    rot = math.atan2(e_to[1], e_to[0]) - math.atan2(e_from[1], e_from[0])
    c, s = math.cos(rot), math.sin(rot)
    return np.array([[c, -s], [s, c]]) @ np.asarray(v, dtype=np.float64)


@dataclass(frozen=True)
class DerivativeReport:
    x: int
    neighbor: int
    step: float
    discrepancy: float
    fd_norm: float


def ce_derivative_consistency(kernel, t, x, v, neighbor, **kw):
    """Compare the difference quotient of ``phi`` along an edge with the linearised solve.

    With ``x' = neighbor`` and ``eps`` the g-length of the edge, the
    linearised increment ``psi`` solves
    ``S(w_x) psi = M (eta_x' - eta_x)/eps - (S(w_x') - S(w_x))/eps phi_x``
    and is compared in ``L^2(M)`` against ``(phi_x' - phi_x)/eps``.
    """
    x, neighbor = int(x), int(neighbor)
    if neighbor == x:
        raise ValueError("neighbor must differ from x (zero step)")
    if neighbor not in set(int(j) for j in kernel.mesh.neighbors(x)):
        raise ValueError(f"vertex {neighbor} is not adjacent to {x}")
    px = ContinuityProblem(kernel, t, x, **kw)
    py = ContinuityProblem(kernel, t, neighbor, **kw)
    _, eps = px.frame.direction_to(neighbor)
    v_y = transport_vector(px.frame, py.frame, v)
    sx = px.solve(v)
    sy = py.solve(v_y)
    m = kernel.m
    fd = (sy.phi - sx.phi) / eps
    rhs_eta = (sy.eta - sx.eta) / eps
    correction = ((py.S - px.S) @ sx.phi) / eps
    b = m * rhs_eta - correction
    b -= b.mean()
    psi, _ = projected_cg(px.S, b, m, px._precond, px.rtol, px.maxiter)
    fd_norm = math.sqrt(np.sum(m * fd ** 2))
    disc = math.sqrt(np.sum(m * (psi - fd) ** 2)) / fd_norm
    return DerivativeReport(x=x, neighbor=neighbor, step=eps, discrepancy=disc, fd_norm=fd_norm)


def write_solution_csv(sol, m, path, header=""):
    """Per-vertex table of a solution: ``vertex, phi, eta, weight, mass``."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("vertex,phi,eta,weight,mass\n")
        for i, row in enumerate(zip(sol.phi, sol.eta, sol.weight, m)):
            fh.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")

"""Heat kernel of the rough Laplacian.

Two backends share one interface:

* :class:`HeatKernel` -- full dense generalized eigendecomposition
  ``S phi = lambda M phi``; all kernel identities hold to rounding.
* :class:`SemigroupHeatKernel` -- action of ``exp(-t M^{-1} S)`` on vectors
  for meshes too large for a dense solve. It provides kernel rows and
  x-derivatives only (no spectrum, no full kernel matrix).

With the lumped mass, ``rho_t(x, y) = [exp(-t M^{-1} S)]_{xy} / M_yy``.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import expm_multiply

from .assembly import assemble_mass, assemble_stiffness
from .errors import ResourceLimitError
from .frames import tangent_frame, vertex_gradient_coefficients

MAX_DENSE_VERTICES = 2600


def _check_time(t):
    t = float(t)
    if not t > 0:
        raise ValueError(f"time must be positive, got {t}")
    return t


class _KernelBase:
    """Shared frame cache and derivative helpers."""

    def __init__(self, mesh, metric, stiffness, mass):
        self.mesh = mesh
        self.metric = metric
        self.stiffness = stiffness
        self.mass = mass
        self.m = mass.diagonal()
        self.total_area = float(self.m.sum())
        self._frames = {}

    def frame(self, x):
        x = int(x)
        if x not in self._frames:
            self._frames[x] = tangent_frame(self.mesh, self.metric, x)
        return self._frames[x]

    def _dx_coefficients(self, x, v):
        c = vertex_gradient_coefficients(self.frame(x), v)
        # gradient of a constant is zero; remove the rounding residue
        return c - c.sum() * (np.arange(len(c)) == int(x))

    def apply_semigroup(self, t, u):
        """``exp(-t M^{-1} S) u``."""
        raise NotImplementedError

    def kernel_row(self, t, x):
        """``rho_t(x, .)`` as a vertex function."""
        raise NotImplementedError

    def kernel_dx(self, t, x, v):
        """Directional x-derivative ``(d_x rho_t(x, .))(v)``.

        ``v`` is in the frame coordinates of vertex ``x``. The derivative is
        taken through the vertex gradient operator, i.e. it is the linear
        combination ``sum_z c_z rho_t(z, .)`` with ``c = grad(.)(x) . v``.
        """
        t = _check_time(t)
        v = np.asarray(v, dtype=np.float64)
        if not np.any(v):
            self.frame(x)
            return np.zeros(self.mesh.n_vertices)
        c = self._dx_coefficients(x, v)
        return self.apply_semigroup(t, c / self.m)

    def heat_equation_residual(self, t, x, v=None):
        """``|M d_t rho + S rho| / |S rho|`` for ``rho_t(x, .)`` (or its x-derivative)."""
        t = _check_time(t)
        rho = self.kernel_row(t, x) if v is None else self.kernel_dx(t, x, v)
        drho = self.time_derivative(t, x, v)
        Srho = self.stiffness @ rho
        return float(np.linalg.norm(self.m * drho + Srho) / np.linalg.norm(Srho))

    def time_derivative(self, t, x, v=None):
        raise NotImplementedError


class HeatKernel(_KernelBase):
    """Dense spectral heat kernel.

    Attributes
    ----------
    eigenvalues : ndarray
        Ascending generalized eigenvalues, ``eigenvalues[0] == 0``.
    eigenvectors : ndarray
        ``(n, n)`` M-orthonormal eigenvectors as columns.
    """

    def __init__(self, mesh, metric, stiffness, mass, eigenvalues, eigenvectors):
        super().__init__(mesh, metric, stiffness, mass)
        self.eigenvalues = eigenvalues
        self.eigenvectors = eigenvectors
        self._t_min = None

    @property
    def n(self):
        return len(self.eigenvalues)

    def spectral_weights(self, t):
        return np.exp(-self.eigenvalues * _check_time(t))

    def kernel_matrix(self, t):
        """Full symmetric matrix ``rho_t(x, y)``."""
        e = self.spectral_weights(t)
        P = self.eigenvectors
        K = (P * e) @ P.T
        return 0.5 * (K + K.T)

    def kernel_eval(self, t, x, y):
        """``sum_i exp(-lambda_i t) phi_i(x) phi_i(y)``; bit-symmetric in ``(x, y)``."""
        e = self.spectral_weights(t)
        P = self.eigenvectors
        return float(np.sum(e * (P[int(x)] * P[int(y)])))

    def kernel_row(self, t, x):
        e = self.spectral_weights(t)
        P = self.eigenvectors
        return P @ (e * P[int(x)])

    def apply_semigroup(self, t, u):
        e = self.spectral_weights(t)
        P = self.eigenvectors
        return P @ (e * (P.T @ (self.m * u)))

    def time_derivative(self, t, x, v=None):
        e = self.spectral_weights(t) * -self.eigenvalues
        P = self.eigenvectors
        if v is None:
            coef = P[int(x)]
        else:
            coef = P.T @ self._dx_coefficients(x, v)
        return P @ (e * coef)

    def semigroup_residual(self, t):
        """``|rho_2t - rho_t M rho_t|_F / |rho_2t|_F``."""
        K1 = self.kernel_matrix(t)
        K2 = self.kernel_matrix(2 * t)
        return float(np.linalg.norm(K2 - (K1 * self.m) @ K1) / np.linalg.norm(K2))

    def mass_defect(self, t):
        """Max over x of ``|sum_y rho_t(x, y) M_yy - 1|``."""
        K = self.kernel_matrix(t)
        return float(np.max(np.abs(K @ self.m - 1.0)))

    def kernel_positivity_bounds(self, t):
        """``(min, max)`` of the kernel matrix at time ``t``."""
        K = self.kernel_matrix(t)
        return float(K.min()), float(K.max())

    @property
    def t_min(self):
        """Smallest time (to 2% relative) above which the discrete kernel is positive.

        Searched on ``[1e-4, 1]`` by bisection in ``log t``; the returned
        value is the upper end of the final bracket, so the kernel is
        positive there.
        """
        if self._t_min is None:
            self._t_min = self._positivity_threshold()
        return self._t_min

    def _positivity_threshold(self, lo=1e-4, hi=1.0):
        def positive(t):
            return self.kernel_positivity_bounds(t)[0] > 0

        if positive(lo):
            return lo
        while not positive(hi):
            hi *= 2.0
        while hi / lo > 1.02:
            mid = math.sqrt(lo * hi)
            if positive(mid):
                hi = mid
            else:
                lo = mid
        return hi

    def export_kernel_matrix(self, t, path):
        """Binary ``.npy`` dump of the full kernel matrix at time ``t``."""
        np.save(path, self.kernel_matrix(t))

    def export_eigenpairs(self, directory, stem="eigen"):
        """Write ``<stem>_values.csv`` and ``<stem>_vectors.npy``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / f"{stem}_values.csv", "w", encoding="utf-8") as fh:
            fh.write("index,eigenvalue\n")
            for i, lam in enumerate(self.eigenvalues):
                fh.write(f"{i},{float(lam)!r}\n")
        np.save(d / f"{stem}_vectors.npy", self.eigenvectors)


def eigendecompose(mesh, metric, stiffness=None, mass=None, max_vertices=MAX_DENSE_VERTICES):
    """Full dense eigendecomposition of the unweighted rough Laplacian.

    The zero mode is pinned to exactly ``0`` and the constant
    ``1 / sqrt(area)``; the others come from the symmetric standard form
    ``M^{-1/2} S M^{-1/2}``.

    Raises
    ------
    ResourceLimitError
        More than ``max_vertices`` vertices; use :class:`SemigroupHeatKernel`.
    """
    n = mesh.n_vertices
    if n > max_vertices:
        raise ResourceLimitError(
            f"{n} vertices exceed the dense eigensolve cap of {max_vertices}; "
            "use SemigroupHeatKernel (no spectral truncation is provided)")
    if stiffness is None:
        stiffness = assemble_stiffness(mesh, metric)
    if mass is None:
        mass = assemble_mass(mesh, metric)
    m = mass.diagonal()
    r = 1.0 / np.sqrt(m)
    A = stiffness.toarray() * r[:, None] * r[None, :]
    A = 0.5 * (A + A.T)
    lam, Q = sla.eigh(A)
    P = Q * r[:, None]
    lam[0] = 0.0
    P[:, 0] = 1.0 / math.sqrt(m.sum())
    return HeatKernel(mesh, metric, stiffness, mass, lam, P)


class SemigroupHeatKernel(_KernelBase):
    """Matrix-free heat kernel via ``expm_multiply`` on the symmetric form."""

    def __init__(self, mesh, metric, stiffness=None, mass=None):
        if stiffness is None:
            stiffness = assemble_stiffness(mesh, metric)
        if mass is None:
            mass = assemble_mass(mesh, metric)
        super().__init__(mesh, metric, stiffness, mass)
        r = 1.0 / np.sqrt(self.m)
        from scipy import sparse

        self._r = r
        self._A = (sparse.diags(r) @ stiffness.matrix @ sparse.diags(r)).tocsr()

    def apply_semigroup(self, t, u):
        t = _check_time(t)
        s = np.sqrt(self.m)
        return self._r * expm_multiply(-t * self._A, s * np.asarray(u, dtype=np.float64))

    def kernel_row(self, t, x):
        delta = np.zeros(self.mesh.n_vertices)
        delta[int(x)] = 1.0 / self.m[int(x)]
        return self.apply_semigroup(t, delta)

    def time_derivative(self, t, x, v=None):
        if v is None:
            u = np.zeros(self.mesh.n_vertices)
            u[int(x)] = 1.0 / self.m[int(x)]
        else:
            u = self._dx_coefficients(x, v) / self.m
        w = self.apply_semigroup(t, u)
        return -(self.stiffness @ w) / self.m


def build_heat_kernel(mesh, metric, dense=None):
    """Dense kernel when the mesh fits under the cap, else the semigroup backend."""
    if dense is None:
        dense = mesh.n_vertices <= MAX_DENSE_VERTICES
    if dense:
        return eigendecompose(mesh, metric)
    return SemigroupHeatKernel(mesh, metric)


def spherical_diagonal_series(t, radius=1.0, l_max=200):
    """On-diagonal heat kernel of the round sphere, ``sum (2l+1)/(4 pi R^2) e^{-l(l+1)t/R^2}``."""
    l = np.arange(l_max + 1)
    return float(np.sum((2 * l + 1) / (4 * math.pi * radius ** 2)
                        * np.exp(-l * (l + 1) * t / radius ** 2)))

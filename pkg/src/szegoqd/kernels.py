"""Szego and Garabedian kernels via a Kerzman-Stein second-kind solve.

The boundary values of S(.,a) solve a Fredholm equation of the second kind
whose kernel A(z,w) = (1/2pi i)(T(w)/(w-z) - conj(T(z))/conj(w-z)) is
smooth, skew-hermitian and vanishes on the diagonal; the right-hand side is
the Cauchy kernel written against arc length.  Derivatives of S in the
second variable reuse one matrix factorization per domain, since only the
right-hand side depends on the base point.  The Garabedian kernel follows
algebraically from the tangent identity conj(S(z,a)) = -i L(z,a) T(z) on
the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np
import scipy.linalg

from .errors import SolverError
from .geometry import TWO_PI, BoundaryFunction

DEFAULT_CLEARANCE_FACTOR = 5.0


def kerzman_stein_matrix(domain):
    """Grid values A(z_i, w_k); the smooth diagonal limit is zero."""
    z, T = domain.nodes, domain.tangent
    diff = z[None, :] - z[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        A = (T[None, :] / diff - np.conj(T[:, None]) / np.conj(diff)) / (2j * np.pi)
    np.fill_diagonal(A, 0.0)
    return A


def cauchy_kernel_rhs(domain, a, m=0):
    """Conjugate Cauchy kernel (i/2pi) conj(T) m! / conj(z-a)^{m+1}."""
    return ((1j / TWO_PI) * np.conj(domain.tangent)
            * factorial(m) / np.conj(domain.nodes - a) ** (m + 1))


@dataclass(frozen=True, eq=False)
class KernelField:
    """Boundary traces of S^m(.,a) and L^m(.,a) for one base point/order."""

    base_point: complex
    order: int
    szego_boundary: BoundaryFunction
    garabedian_boundary: BoundaryFunction


class SzegoSolver:
    """Cached Nystrom factorization for one domain grid.

    Solves for boundary Szego kernels and their second-variable derivatives;
    solves for distinct (a, m) share the factorization and are cached.
    """

    def __init__(self, domain, max_order=12, clearance_factor=DEFAULT_CLEARANCE_FACTOR):
        self.domain = domain
        self.max_order = int(max_order)
        self.clearance_factor = float(clearance_factor)
        A = kerzman_stein_matrix(domain)
        # The skew-hermitian kernel enters adjointly: with this orientation
        # of (z, w) the second-kind system is (I - A ds); the disc reduces
        # to the identity and the annulus matches the Laurent series.
        M = np.eye(domain.n_total, dtype=complex) - A * domain.ds[None, :]
        lu, piv = scipy.linalg.lu_factor(M)
        d = np.abs(np.diag(lu))
        if d.min() <= 1e-14 * d.max():
            raise SolverError("singular discretization: boundary grid under-resolved")
        self._lu = (lu, piv)
        self._cache = {}

    def require_base_point(self, a):
        a = complex(a)
        if not bool(self.domain.contains(a)[0]):
            raise SolverError(f"base point {a} is not inside the domain")
        dist = float(self.domain.boundary_distance(a)[0])
        minimum = self.clearance_factor * float(self.domain.local_spacing(a)[0])
        if dist < minimum:
            raise SolverError(
                f"base point {a} is {dist:.3e} from the boundary; "
                f"clearance requires {minimum:.3e}")
        return a

    def boundary_kernels(self, a, m=0):
        """Boundary traces (S^m(.,a), L^m(.,a)) as arrays."""
        a = self.require_base_point(a)
        m = int(m)
        if not 0 <= m <= self.max_order:
            raise SolverError(f"derivative order {m} beyond cap {self.max_order}")
        key = (a, m)
        if key not in self._cache:
            rhs = cauchy_kernel_rhs(self.domain, a, m)
            S = scipy.linalg.lu_solve(self._lu, rhs)
            L = 1j * np.conj(S) * np.conj(self.domain.tangent)
            S.setflags(write=False)
            L.setflags(write=False)
            self._cache[key] = (S, L)
        return self._cache[key]

    def kernel_field(self, a, m=0):
        S, L = self.boundary_kernels(a, m)
        return KernelField(base_point=complex(a), order=int(m),
                           szego_boundary=BoundaryFunction(self.domain, S),
                           garabedian_boundary=BoundaryFunction(self.domain, L))


def solve_szego(domain, a, m=0, solver=None, max_order=12):
    """One-shot Szego/Garabedian boundary solve; see SzegoSolver for reuse."""
    if solver is None:
        solver = SzegoSolver(domain, max_order=max(max_order, m))
    return solver.kernel_field(a, m)


# ---------------------------------------------------------------------------
# Cauchy machinery

def _cauchy_weights(domain):
    dt = np.concatenate([np.full(c.n_samples, TWO_PI / c.n_samples)
                         for c in domain.curves])
    return domain.dz_dt * dt


def cauchy_values(u, points, compensated=True):
    """(1/2pi i) oint u(w)/(w-z) dw at interior points.

    The compensated form divides by the quadrature of the Cauchy kernel
    itself, whose exact value is 1 for interior points; numerator and
    denominator errors cancel, so accuracy survives arbitrarily close to
    the boundary.
    """
    dom = u.domain
    pts = np.atleast_1d(np.asarray(points, dtype=complex))
    ker = _cauchy_weights(dom)[None, :] / (dom.nodes[None, :] - pts[:, None])
    num = ker @ u.values
    if not compensated:
        return num / (2j * np.pi)
    return num / np.sum(ker, axis=1)


def cauchy_derivatives(u, points, order):
    """(k!/2pi i) oint u(w)/(w-z)^{k+1} dw; plain rule, keep points interior."""
    dom = u.domain
    pts = np.atleast_1d(np.asarray(points, dtype=complex))
    ker = _cauchy_weights(dom)[None, :] / (dom.nodes[None, :] - pts[:, None]) ** (order + 1)
    return factorial(order) * (ker @ u.values) / (2j * np.pi)


def evaluate_hardy_interior(u, points, clearance_factor=DEFAULT_CLEARANCE_FACTOR,
                            check_hardy=False, hardy_tol=1e-6):
    """Values of the Cauchy integral of boundary data u at interior points.

    For u in the Hardy space these are the values of its holomorphic
    extension.  The optional check verifies that the anti-Hardy content of
    u under the Szego projection is below hardy_tol; by default the raw
    Cauchy integral is returned for arbitrary boundary data.
    """
    dom = u.domain
    pts = np.atleast_1d(np.asarray(points, dtype=complex))
    inside = dom.contains(pts)
    if not np.all(inside):
        raise SolverError(f"points outside the domain: {pts[~inside]}")
    if clearance_factor:
        dist = dom.boundary_distance(pts)
        minimum = clearance_factor * dom.local_spacing(pts)
        if np.any(dist < minimum):
            raise SolverError(
                f"evaluation point within {dist.min():.3e} of the boundary; "
                f"clearance requires {minimum.max():.3e}")
    if check_hardy:
        defect = u - szego_projection(u)
        norm = np.sqrt(abs(hardy_inner(defect, defect)))
        scale = 1.0 + np.sqrt(abs(hardy_inner(u, u)))
        if norm / scale > hardy_tol:
            raise SolverError(
                f"boundary data has anti-Hardy content {norm / scale:.3e}")
    return cauchy_values(u, pts)


def hardy_inner(u, v):
    """Arc-length inner product oint u conj(v) ds on a shared grid."""
    vv = u._check(v)
    return complex(np.sum(u.values * np.conj(vv) * u.domain.ds))


def _hardy_basis(domain, max_degree):
    z = domain.nodes
    c = domain.centroid
    r = float(np.max(np.abs(z - c)))
    cols = [((z - c) / r) ** k for k in range(max_degree + 1)]
    for j, zj in enumerate(domain.hole_points, start=1):
        rj = float(np.max(np.abs(domain.curves[j].samples - zj)))
        cols.extend((rj / (z - zj)) ** k for k in range(1, max_degree + 1))
    return np.column_stack(cols)


def szego_projection(u, max_degree=None, rel_cutoff=1e-13):
    """Orthogonal projection onto the discrete Hardy subspace.

    The subspace is spanned by scaled monomials about the centroid plus,
    per hole, scaled negative powers about the hole point; the projector is
    assembled through an SVD of the arc-length-weighted basis, so it is
    idempotent and self-adjoint for the discrete inner product by
    construction.
    """
    dom = u.domain
    if max_degree is None:
        max_degree = min(c.n_samples for c in dom.curves) // 6
    B = _hardy_basis(dom, max_degree)
    w = np.sqrt(dom.ds)
    U, s, _ = np.linalg.svd(B * w[:, None], full_matrices=False)
    U = U[:, s > rel_cutoff * s[0]]
    proj = U @ (np.conj(U.T) @ (w * u.values)) / w
    return BoundaryFunction(dom, proj)


# ---------------------------------------------------------------------------
# Garabedian interior evaluation and Ahlfors maps

def garabedian_singular(bases_orders, points):
    """sum over (a, m, coeff) of coeff * m!/(2pi (z-a)^{m+1})."""
    pts = np.atleast_1d(np.asarray(points, dtype=complex))
    out = np.zeros(pts.shape, dtype=complex)
    for a, m, coeff in bases_orders:
        out += coeff * factorial(m) / (TWO_PI * (pts - a) ** (m + 1))
    return out


def garabedian_interior(field, points):
    """L^m(z,a) at interior points: the pole term is analytic, and what
    remains of the boundary trace is Hardy-class, so it goes through the
    compensated Cauchy integral."""
    dom = field.szego_boundary.domain
    sing = [(field.base_point, field.order, 1.0)]
    regular = field.garabedian_boundary.values - garabedian_singular(sing, dom.nodes)
    reg_at = cauchy_values(BoundaryFunction(dom, regular), points)
    return reg_at + garabedian_singular(sing, points)


@dataclass(frozen=True, eq=False)
class AhlforsMap:
    """Boundary trace and interior evaluator of S(.,a)/L(.,a)."""

    base_point: complex
    boundary: BoundaryFunction
    derivative_at_base: complex

    def interior(self, points):
        return cauchy_values(self.boundary, points)

    def boundary_winding(self):
        """Total winding of the boundary image about 0 (argument principle)."""
        dom = self.boundary.domain
        total = 0.0
        for sl in dom.slices:
            f = self.boundary.values[sl]
            total += float(np.sum(np.angle(np.roll(f, -1) / f))) / TWO_PI
        return int(np.rint(total))


def ahlfors_map(domain, a, solver=None, min_modulus=1e-12):
    """Ahlfors map as the kernel ratio; the Riemann map when simply connected.

    Unimodular on the boundary, vanishing at the base point, with positive
    derivative there.
    """
    if solver is None:
        solver = SzegoSolver(domain)
    S, L = solver.boundary_kernels(a, 0)
    if np.min(np.abs(L)) < min_modulus * np.max(np.abs(L)):
        raise SolverError("Garabedian kernel vanishes on the boundary grid")
    f = BoundaryFunction(domain, S / L)
    deriv = complex(cauchy_derivatives(f, a, 1)[0])
    return AhlforsMap(base_point=complex(a), boundary=f, derivative_at_base=deriv)

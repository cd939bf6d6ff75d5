"""Least-squares fitting of Szego-span elements to boundary and cut targets.

A span element is sigma(z) = sum_m c_m S^m(z, a_i) over a finite list of
(base point, order) pairs.  Its Garabedian companion
lambda(z) = -i sum_m conj(c_m) L^m(z, a_i) makes (sigma, lambda) a
half-order pair: sigma(z) T(z) = conj(lambda(z)) on the boundary.  Because
lambda depends on conj(c), joint fits against boundary data for sigma and
cut data for lambda are solved as a real least-squares problem in
(Re c, Im c), regularized by a truncated SVD.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .errors import BuildError, SolverError
from .geometry import BoundaryFunction
from .kernels import (cauchy_derivatives, cauchy_values, evaluate_hardy_interior,
                      garabedian_singular)


def flatten_bases(bases):
    """[(a, max_order)] -> duplicate-free [(a, m)] with m = 0..max_order."""
    flat = []
    for a, max_order in bases:
        for m in range(int(max_order) + 1):
            flat.append((complex(a), m))
    if len(set(flat)) != len(flat):
        raise BuildError("duplicate (base point, order) pairs in basis")
    return tuple(flat)


def _column_scales(domain, flat):
    """Equilibrate kernel-derivative growth: column m gets d(a,bOmega)^{m+1}/m!."""
    scales = np.empty(len(flat))
    for i, (a, m) in enumerate(flat):
        d = float(domain.boundary_distance(a)[0])
        scales[i] = d ** (m + 1) / factorial(m)
    return scales


@dataclass(frozen=True, eq=False)
class SpanElement:
    """A fitted element of the Szego span with its Garabedian companion."""

    solver: object
    bases: tuple  # flattened ((a, m), ...)
    coeffs: np.ndarray
    sigma_boundary: BoundaryFunction
    lambda_boundary: BoundaryFunction

    def __post_init__(self):
        self.coeffs.setflags(write=False)

    @property
    def domain(self):
        return self.solver.domain

    @classmethod
    def from_coeffs(cls, solver, flat_bases, coeffs):
        coeffs = np.asarray(coeffs, dtype=complex)
        S_cols, L_cols = span_columns(solver, flat_bases)
        sigma = S_cols @ coeffs
        lam = -1j * (L_cols @ np.conj(coeffs))
        return cls(solver=solver, bases=tuple(flat_bases), coeffs=coeffs,
                   sigma_boundary=BoundaryFunction(solver.domain, sigma),
                   lambda_boundary=BoundaryFunction(solver.domain, lam))

    def combine(self, other, t):
        """self + t*other in the half-order sense (companion picks up conj(t))."""
        if other.bases != self.bases or other.solver is not self.solver:
            raise BuildError("span elements combine only over a shared basis")
        return SpanElement.from_coeffs(self.solver, self.bases,
                                       self.coeffs + t * other.coeffs)

    def sigma_at(self, points, order=0, check_clearance=False):
        """Interior values/derivatives of sigma by Cauchy integration."""
        if order == 0:
            if check_clearance:
                return evaluate_hardy_interior(self.sigma_boundary, points)
            return cauchy_values(self.sigma_boundary, points)
        return cauchy_derivatives(self.sigma_boundary, points, order)

    def _singular_terms(self):
        return [(a, m, -1j * np.conj(c))
                for (a, m), c in zip(self.bases, self.coeffs)]

    def lambda_at(self, points):
        """Interior values of the companion: pole terms are analytic, the
        regular remainder is Hardy-class and goes through the Cauchy rule."""
        dom = self.domain
        terms = self._singular_terms()
        regular = self.lambda_boundary.values - garabedian_singular(terms, dom.nodes)
        out = cauchy_values(BoundaryFunction(dom, regular), points)
        return out + garabedian_singular(terms, points)

    def jets(self, a, up_to):
        """sigma^{(k)}(a) for k = 0..up_to."""
        return np.array([complex(self.sigma_at(a, order=k)[0])
                         for k in range(up_to + 1)])


def span_columns(solver, flat_bases):
    """Boundary-trace matrices: columns S^m(., a) and L^m(., a)."""
    n = solver.domain.n_total
    S_cols = np.empty((n, len(flat_bases)), dtype=complex)
    L_cols = np.empty_like(S_cols)
    for i, (a, m) in enumerate(flat_bases):
        S_cols[:, i], L_cols[:, i] = solver.boundary_kernels(a, m)
    return S_cols, L_cols


def lambda_columns_on_cut(solver, flat_bases, cut):
    """L^m(., a) evaluated on a cut arc, singular part split off."""
    dom = solver.domain
    cols = np.empty((len(cut.nodes), len(flat_bases)), dtype=complex)
    for i, (a, m) in enumerate(flat_bases):
        _, L = solver.boundary_kernels(a, m)
        sing = [(a, m, 1.0)]
        reg = BoundaryFunction(dom, L - garabedian_singular(sing, dom.nodes))
        cols[:, i] = cauchy_values(reg, cut.nodes) + garabedian_singular(sing, cut.nodes)
    return cols


@dataclass(frozen=True, eq=False)
class SpanFitReport:
    boundary_residual: float
    cut_residuals: tuple
    rank: int
    n_columns: int
    singular_values: np.ndarray

    @property
    def joint_residual(self):
        return float(np.sqrt(self.boundary_residual ** 2
                             + sum(r ** 2 for r in self.cut_residuals)))


def fit_span_to_target(solver, bases, target_boundary, cut_targets=None,
                       cuts=None, cut_weights=None, svd_cutoff=1e-12,
                       pin=None):
    """Weighted least-squares fit of a span element.

    Minimizes |sigma - target|^2 in L2(bOmega, ds) plus, when cut targets
    are given, w_j |lambda - target_j|^2 in L2(Gamma_j) for each cut.  Cut
    weights default to perimeter/length(Gamma_j) so the two parts are
    commensurate.  pin = (flat index, value) freezes one coefficient and
    fits the rest around it.  Returns (SpanElement, SpanFitReport).
    """
    dom = solver.domain
    flat = flatten_bases(bases)
    if len(flat) > dom.n_total // 4:
        raise BuildError(
            f"basis of size {len(flat)} too rich for a grid of {dom.n_total}")
    for a, _ in flat:
        solver.require_base_point(a)
    target = (target_boundary.values if isinstance(target_boundary, BoundaryFunction)
              else np.asarray(target_boundary, dtype=complex))

    scales = _column_scales(dom, flat)
    S_cols, _ = span_columns(solver, flat)
    root_ds = np.sqrt(dom.ds)

    # sigma block: rows of B c - t, weighted for the ds inner product
    B = S_cols * scales[None, :] * root_ds[:, None]
    rhs = target * root_ds
    blocks_A = [np.block([[B.real, -B.imag], [B.imag, B.real]])]
    blocks_b = [np.concatenate([rhs.real, rhs.imag])]

    cut_list = ()
    if cut_targets is not None:
        if cuts is None:
            raise BuildError("cut targets need the CutSystem they live on")
        cut_list = tuple(cuts.cuts)
        if len(cut_targets) != len(cut_list):
            raise BuildError("one target per cut required")
        if cut_weights is None:
            cut_weights = [dom.perimeter / c.length for c in cut_list]
        for cut, phi, w in zip(cut_list, cut_targets, cut_weights):
            Lc = lambda_columns_on_cut(solver, flat, cut) * scales[None, :]
            rw = np.sqrt(np.abs(cut.derivatives) * cut.weights * w)
            # lambda block is anti-linear in c: C conj(c) with C = -i Lc
            C = -1j * Lc * rw[:, None]
            phi_w = np.asarray(phi, dtype=complex) * rw
            blocks_A.append(np.block([[C.real, C.imag], [C.imag, -C.real]]))
            blocks_b.append(np.concatenate([phi_w.real, phi_w.imag]))

    A = np.vstack(blocks_A)
    b = np.concatenate(blocks_b)
    m = len(flat)
    pinned_value = None
    if pin is not None:
        idx, pinned_value = pin
        pinned_scaled = complex(pinned_value) / scales[idx]
        b = b - A[:, idx] * pinned_scaled.real - A[:, m + idx] * pinned_scaled.imag
        free = [i for i in range(2 * m) if i not in (idx, m + idx)]
        A = A[:, free]
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > svd_cutoff * s[0]
    x = Vt[keep].T @ ((U[:, keep].T @ b) / s[keep])
    if pin is not None:
        idx, _ = pin
        full = np.zeros(2 * m)
        free = [i for i in range(2 * m) if i not in (idx, m + idx)]
        full[free] = x
        full[idx] = pinned_scaled.real
        full[m + idx] = pinned_scaled.imag
        x = full
    coeffs = (x[:m] + 1j * x[m:]) * scales

    element = SpanElement.from_coeffs(solver, flat, coeffs)
    bres = np.sqrt(np.sum(np.abs(element.sigma_boundary.values - target) ** 2 * dom.ds))
    cres = []
    for cut, phi in zip(cut_list, cut_targets or ()):
        lam = element.lambda_at(cut.nodes)
        diff2 = np.abs(lam - np.asarray(phi, dtype=complex)) ** 2
        cres.append(float(np.sqrt(np.sum(diff2 * np.abs(cut.derivatives) * cut.weights))))
    report = SpanFitReport(boundary_residual=float(bres), cut_residuals=tuple(cres),
                           rank=int(keep.sum()), n_columns=m, singular_values=s)
    return element, report


def eval_span(element, points, derivative_order=0):
    """Interior evaluation of sigma, with the standard clearance check."""
    pts = np.atleast_1d(np.asarray(points, dtype=complex))
    dom = element.domain
    if not np.all(dom.contains(pts)):
        raise SolverError("evaluation points must lie inside the domain")
    dist = dom.boundary_distance(pts)
    minimum = 5.0 * dom.local_spacing(pts)
    if np.any(dist < minimum):
        raise SolverError("evaluation point violates boundary clearance")
    return element.sigma_at(pts, order=derivative_order)

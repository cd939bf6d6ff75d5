"""Construction of Szego coordinates: maps f with f' the square of a span
element, built so that all periods of f' dz vanish.

Three pipelines share the machinery here.  The simply connected build fits
sigma close to 1 over derivatives at a single base point and integrates
sigma^2.  Multiply connected domains need richer bases: derivatives at one
point approximate constants arbitrarily slowly there, so the builds place
a ring of base points around each hole, which restores geometric
convergence.  The arc-length build kills the hole periods of f' dz with a
small Newton solve against a rational basis.  The double build works with
half-order pairs on boundary and cut data and kills the handle periods as
well; because a multi-point basis puts several poles on the reflected side
of the double, it also drives the residue at every pole to zero, which is
what lets f extend meromorphically to the double.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np

from .errors import BuildError, GeometryError
from .geometry import (TWO_PI, BoundaryFunction, contour_integral, fit_trig_curve,
                       make_cuts, polyline_self_intersects, polylines_intersect,
                       spectral_antiderivative, spectral_derivative,
                       validate_domain)
from .kernels import SzegoSolver, cauchy_values, garabedian_singular
from .spanfit import (SpanElement, fit_span_to_target, flatten_bases,
                      lambda_columns_on_cut, span_columns)

DEFAULT_SC_ORDER = 40
_SC_ORDER_SCHEDULE = (4, 8, 12, 16, 20, 24, 28, 32, 36, 40, 48, 56, 64)
_RING_SCHEDULE = (8, 12, 16, 20, 24, 28, 32)


# ---------------------------------------------------------------------------
# Rational basis with prescribed hole periods

def hole_period(domain, values, k):
    """Counterclockwise period over hole curve k (reverses the clockwise
    orientation the curve carries as a boundary component)."""
    values = values.values if isinstance(values, BoundaryFunction) else values
    return -contour_integral(BoundaryFunction(domain, values), "dz", path=k)


def _lagrange_eval(nodes, values, z):
    out = np.zeros_like(np.asarray(z, dtype=complex))
    for k, (xk, yk) in enumerate(zip(nodes, values)):
        term = np.full_like(out, yk)
        for l, xl in enumerate(nodes):
            if l != k:
                term = term * (z - xl) / (xk - xl)
        out = out + term
    return out


@dataclass(frozen=True, eq=False)
class RationalBasisFunction:
    """R_j(z) = 1/(2 pi i (z - z_j)) + (z - z_j) Q_j(z) with unit period
    around hole j and zero period around every other hole."""

    pole: complex
    interp_nodes: tuple
    interp_values: tuple

    def __call__(self, z):
        z = np.asarray(z, dtype=complex)
        q = _lagrange_eval(self.interp_nodes, self.interp_values, z) \
            if self.interp_nodes else np.zeros_like(z)
        return 1.0 / (2j * np.pi * (z - self.pole)) + (z - self.pole) * q


def rational_basis(domain, table_tol=1e-8):
    """The R_j for each hole, verified against the period table."""
    p = domain.connectivity - 1
    if p == 0:
        raise GeometryError("rational basis needs a multiply connected domain")
    holes = domain.hole_points
    if len(np.unique(np.round(holes, 12))) != p:
        raise GeometryError("hole points must be distinct")
    basis = []
    for j in range(p):
        zj = holes[j]
        others = tuple(holes[k] for k in range(p) if k != j)
        vals = tuple(-1.0 / (2j * np.pi * (zk - zj) ** 2) for zk in others)
        basis.append(RationalBasisFunction(pole=complex(zj), interp_nodes=others,
                                           interp_values=vals))
    traces = [Rj(domain.nodes) for Rj in basis]
    for k in range(1, p + 1):
        for j in range(p):
            got = hole_period(domain, traces[j], k)
            if abs(got - (1.0 if k - 1 == j else 0.0)) > table_tol:
                raise BuildError(
                    f"rational basis period table off: entry ({k},{j}) = {got}")
            for m in range(p):
                cross = hole_period(domain, traces[j] * traces[m], k)
                if abs(cross) > table_tol:
                    raise BuildError(
                        f"rational basis product period ({k},{j},{m}) = {cross}")
    return tuple(basis)


# ---------------------------------------------------------------------------
# Base point rings for multiply connected fits

def ring_points(domain, points_per_hole, angle_offset=None, radius_factor=1.0,
                avoid=None, min_avoid=None):
    """Base points on a circle around each hole point.

    The radius is the geometric mean of the hole reach and the clearance to
    the rest of the boundary.  avoid, when given, is a point set (for
    instance cut nodes) every ring point must keep min_avoid away from; the
    ring is rotated to comply.
    """
    pts = []
    for j, zj in enumerate(domain.hole_points, start=1):
        r_in = float(np.max(np.abs(domain.curves[j].samples - zj)))
        others = np.concatenate([domain.curves[k].samples
                                 for k in range(domain.connectivity) if k != j])
        r_out = float(np.min(np.abs(others - zj)))
        radius = radius_factor * np.sqrt(r_in * r_out)
        k = np.arange(points_per_hole)
        base_offset = np.pi / points_per_hole if angle_offset is None else angle_offset
        best = (-np.inf, None)
        for trial in range(4 * points_per_hole):
            offset = base_offset + trial * np.pi / (2 * points_per_hole)
            ring = zj + radius * np.exp(1j * (TWO_PI * k / points_per_hole + offset))
            if not np.all(domain.contains(ring)):
                continue
            d = np.inf
            if avoid is not None and len(avoid):
                d = float(np.min(np.abs(ring[:, None] - np.asarray(avoid)[None, :])))
            if d > best[0]:
                best = (d, ring)
            if min_avoid is not None and d >= min_avoid:
                break
        # the clearance a ring can give scales with its own gap
        floor = 0.3 * radius * np.sin(np.pi / points_per_hole)
        if best[1] is None or best[0] < floor:
            raise BuildError(f"could not place a base ring around hole {j} "
                             f"(best clearance {best[0]:.3e})")
        pts.extend(best[1])
    return np.asarray(pts, dtype=complex)


def ring_bases(domain, points_per_hole, order=2, **kwargs):
    pts = ring_points(domain, points_per_hole, **kwargs)
    return [(complex(a), order) for a in pts]


# ---------------------------------------------------------------------------
# Half-order frames and period pairings

@dataclass(frozen=True, eq=False)
class HalfOrderFrame:
    """A half-order pair sampled where the period pairings need it:
    h1 on the boundary and on every cut, h2 on every cut."""

    h1_boundary: BoundaryFunction
    h1_cuts: tuple
    h2_cuts: tuple
    tag: str = ""
    element: SpanElement | None = None

    @classmethod
    def from_element(cls, element, cuts, tag=""):
        h1c = tuple(element.sigma_at(c.nodes) for c in cuts.cuts)
        h2c = tuple(element.lambda_at(c.nodes) for c in cuts.cuts)
        return cls(h1_boundary=element.sigma_boundary, h1_cuts=h1c, h2_cuts=h2c,
                   tag=tag, element=element)


def pairing(domain, cuts, g, h, k):
    """B_k(g, h): hole period for k = 1..p, handle pairing for k = p+1..2p.

    The handle value integrates g1 h1 dz along the cut and subtracts the
    conjugated g2 h2 integral, which realizes the reflected, reversed arc
    on the anti-holomorphic side of the double.
    """
    p = domain.connectivity - 1
    if 1 <= k <= p:
        return hole_period(domain, g.h1_boundary.values * h.h1_boundary.values, k)
    j = k - p - 1
    cut = cuts.cuts[j]
    side1 = cut.integrate(g.h1_cuts[j] * h.h1_cuts[j], "dz")
    side2 = cut.integrate(g.h2_cuts[j] * h.h2_cuts[j], "dz")
    return side1 - np.conj(side2)


def periods(figure, domain, cuts=None):
    """Periods of h^2 dz: p hole entries, plus p handle entries with cuts.

    figure may be a SpanElement (companion derived from its coefficients)
    or a HalfOrderFrame.
    """
    if isinstance(figure, SpanElement):
        if cuts is not None:
            frame = HalfOrderFrame.from_element(figure, cuts)
        else:
            frame = HalfOrderFrame(h1_boundary=figure.sigma_boundary,
                                   h1_cuts=(), h2_cuts=(), element=figure)
    else:
        frame = figure
    p = domain.connectivity - 1
    out = [pairing(domain, cuts, frame, frame, k) for k in range(1, p + 1)]
    if cuts is not None:
        if not frame.h1_cuts:
            raise BuildError("handle periods need cut samples on the frame")
        out.extend(pairing(domain, cuts, frame, frame, k)
                   for k in range(p + 1, 2 * p + 1))
    return np.asarray(out, dtype=complex)


def _anchor_tangent(domain, anchor):
    curve = domain.curves[anchor[0]]
    dz = complex(curve.evaluate(anchor[1], order=1))
    return dz / abs(dz)


def _cut_parameters(cut):
    # nodes are affine in s for straight segments; recover s robustly
    d = cut.end - cut.start
    return ((cut.nodes - cut.start) * np.conj(d)).real / abs(d) ** 2


def _bump(cut):
    s = _cut_parameters(cut)
    return s * (1.0 - s)


def reference_frames(domain, cuts, rationals):
    """The 2p+1 reference half-order pairs g^0..g^{2p}.

    g^0 has first component 1; g^m (m <= p) has first component R_m; the
    rest have first component 0.  Cut companions are quadratics in the arc
    parameter pinned to the endpoint compatibility values, with the free
    bump amplitude chosen to hit the pairing normalizations
    B_k(g^0, g^m) = delta_{km} exactly (a quadratic equation for g^0's own
    normalization, linear ones for the rest).
    """
    p = cuts.p
    frames = []
    g2_0 = []
    for cut in cuts.cuts:
        v0 = np.conj(_anchor_tangent(domain, cut.start_anchor))
        v1 = np.conj(_anchor_tangent(domain, cut.end_anchor))
        s = _cut_parameters(cut)
        lin = v0 + (v1 - v0) * s
        phi = _bump(cut)
        i0 = cut.integrate(lin * lin, "dz")
        i1 = cut.integrate(lin * phi, "dz")
        i2 = cut.integrate(phi * phi, "dz")
        target = np.conj(cut.end - cut.start)
        disc = np.sqrt(i1 * i1 - i2 * (i0 - target))
        roots = np.array([(-i1 + disc) / i2, (-i1 - disc) / i2])
        alpha = roots[np.argmin(np.abs(roots))]
        g2_0.append(lin + alpha * phi)
    ones = BoundaryFunction(domain, np.ones(domain.n_total, dtype=complex))
    frames.append(HalfOrderFrame(
        h1_boundary=ones,
        h1_cuts=tuple(np.ones(len(c.nodes), dtype=complex) for c in cuts.cuts),
        h2_cuts=tuple(g2_0), tag="unit"))
    for m in range(1, p + 1):
        Rm = rationals[m - 1]
        h1c, h2c = [], []
        for j, cut in enumerate(cuts.cuts):
            vals = Rm(cut.nodes)
            v0 = np.conj(complex(Rm(cut.start)) * _anchor_tangent(domain, cut.start_anchor))
            v1 = np.conj(complex(Rm(cut.end)) * _anchor_tangent(domain, cut.end_anchor))
            s = _cut_parameters(cut)
            lin = v0 + (v1 - v0) * s
            phi = _bump(cut)
            target = np.conj(cut.integrate(vals, "dz"))
            j0 = cut.integrate(g2_0[j] * lin, "dz")
            j1 = cut.integrate(g2_0[j] * phi, "dz")
            alpha = (target - j0) / j1
            h1c.append(vals)
            h2c.append(lin + alpha * phi)
        frames.append(HalfOrderFrame(
            h1_boundary=BoundaryFunction(domain, Rm(domain.nodes)),
            h1_cuts=tuple(h1c), h2_cuts=tuple(h2c), tag=f"rational-{m}"))
    zeros_b = BoundaryFunction(domain, np.zeros(domain.n_total, dtype=complex))
    for l in range(p):
        h2c = []
        for j, cut in enumerate(cuts.cuts):
            if j != l:
                h2c.append(np.zeros(len(cut.nodes), dtype=complex))
                continue
            phi = _bump(cut)
            j1 = cut.integrate(g2_0[j] * phi, "dz")
            h2c.append(-phi / np.conj(j1))
        frames.append(HalfOrderFrame(
            h1_boundary=zeros_b,
            h1_cuts=tuple(np.zeros(len(c.nodes), dtype=complex) for c in cuts.cuts),
            h2_cuts=tuple(h2c), tag=f"handle-{l + 1}"))
    for k in range(1, 2 * p + 1):
        for m in range(1, 2 * p + 1):
            got = pairing(domain, cuts, frames[0], frames[m], k)
            if abs(got - (1.0 if k == m else 0.0)) > 1e-9:
                raise BuildError(f"frame normalization B_{k}(g0,g{m}) = {got}")
        if abs(pairing(domain, cuts, frames[0], frames[0], k)) > 1e-9:
            raise BuildError("frame normalization B_k(g0,g0) != 0")
    return tuple(frames)


# ---------------------------------------------------------------------------
# Quadratic condition forms on the span-coefficient space
#
# Every constraint the builds must satisfy -- hole periods and handle
# pairings of h^2 dz, and residues of the reflected poles -- is a
# holomorphic quadratic form c^T M c in the span coefficients, because the
# companion enters conjugated exactly where the reflected side conjugates
# the differential.

def _hole_form_matrices(solver, flat):
    dom = solver.domain
    S_cols, _ = span_columns(solver, flat)
    p = dom.connectivity - 1
    out = []
    for k in range(1, p + 1):
        sl = dom.slices[k]
        n = dom.curves[k].n_samples
        w = dom.dz_dt[sl] * (TWO_PI / n)
        out.append(-np.einsum("im,i,in->mn", S_cols[sl], w, S_cols[sl]))
    return out


def _sigma_columns_on_cut(solver, flat, cut):
    dom = solver.domain
    S_cols, _ = span_columns(solver, flat)
    out = np.empty((len(cut.nodes), len(flat)), dtype=complex)
    for i in range(len(flat)):
        out[:, i] = cauchy_values(BoundaryFunction(dom, S_cols[:, i]), cut.nodes)
    return out


def _handle_form_matrices(solver, flat, cuts):
    out = []
    for cut in cuts.cuts:
        sc = _sigma_columns_on_cut(solver, flat, cut)
        lc = lambda_columns_on_cut(solver, flat, cut)
        w = cut.derivatives * cut.weights
        G1 = np.einsum("im,i,in->mn", sc, w, sc)
        G2 = np.einsum("im,i,in->mn", lc, w, lc)
        out.append(G1 + np.conj(G2))
    return out


def _residue_form_matrices(solver, flat, tol_radius=0.7):
    """One matrix per base point a: the condition conj(res_a(lambda^2)) = 0
    as a quadratic form in the span coefficients.

    res_a(L^mu L^nu) needs Taylor data at a of each L^nu with its own pole
    removed; the Cauchy transform of the boundary trace delivers exactly
    that regular part, and cross poles are re-added in closed form.
    """
    dom = solver.domain
    poles = sorted({a for a, _ in flat}, key=lambda z: (z.real, z.imag))
    max_m = max(m for _, m in flat)
    # Taylor coefficients at each pole of the regular part of each L^nu
    regular_taylor = {}
    for nu, (a_nu, m_nu) in enumerate(flat):
        _, L = solver.boundary_kernels(a_nu, m_nu)
        ell = BoundaryFunction(dom, L)  # Cauchy transform removes the pole
        for a_i in poles:
            coeffs = taylor_coefficients(ell, a_i, max_m,
                                         radius_factor=tol_radius)
            if a_nu != a_i:
                # re-add the Taylor expansion of m_nu!/(2 pi (z - a_nu)^{m_nu+1})
                q = np.arange(max_m + 1)
                fact_q = np.array([factorial(int(qq)) for qq in q], dtype=float)
                fact_mq = np.array([factorial(m_nu + int(qq)) for qq in q],
                                   dtype=float)
                coeffs = coeffs + ((-1.0) ** q * fact_mq / fact_q
                                   / (TWO_PI * (a_i - a_nu) ** (m_nu + q + 1)))
            regular_taylor[(nu, a_i)] = coeffs
    matrices = []
    nb = len(flat)
    for a_i in poles:
        R = np.zeros((nb, nb), dtype=complex)
        for mu, (a_mu, m_mu) in enumerate(flat):
            if a_mu != a_i:
                continue
            for nu in range(nb):
                # res(sing_mu * g) = g^{(m_mu)}(a_i)/(2 pi), g regular at a_i
                R[mu, nu] += (regular_taylor[(nu, a_i)][m_mu]
                              * factorial(m_mu) / TWO_PI)
        # res(L^mu L^nu) symmetrizes over which factor carries the pole
        R = R + R.T
        matrices.append(-np.conj(R))
    return poles, matrices


def residue_at_pole(element, a, radius=None, n_quad=512):
    """Residue of lambda^2 dz at a base point by direct circle integration.

    Independent of the closed-form residue tables; used to certify that
    the reflected poles of h^2 dz are residue free.
    """
    dom = element.domain
    d = float(dom.boundary_distance(a)[0])
    other = [b for b, _ in element.bases if b != a]
    if other:
        d = min(d, float(np.min(np.abs(np.asarray(other) - a))))
    r = radius if radius is not None else 0.45 * d
    theta = np.arange(n_quad) * (TWO_PI / n_quad)
    ring = a + r * np.exp(1j * theta)
    lam = element.lambda_at(ring)
    dz = 1j * r * np.exp(1j * theta) * (TWO_PI / n_quad)
    return complex(np.sum(lam ** 2 * dz) / (2j * np.pi))


# ---------------------------------------------------------------------------
# Newton solvers for the quadratic condition systems
# (complex unknowns handled as real pairs)

def _leastnorm_newton(cond_matrices, c0, metric_r, tol=1e-12, max_iter=80,
                      min_step=1e-9):
    """Drive every quadratic form c^T M_r c to zero, moving c as little as
    possible in the metric |R c| per step (underdetermined Newton with
    minimum-norm updates).  Returns the projected coefficient vector."""
    c = np.asarray(c0, dtype=complex)

    def values(cc):
        return np.array([cc @ M @ cc for M in cond_matrices])

    for _ in range(max_iter):
        F = values(c)
        norm = np.max(np.abs(F))
        if norm < tol:
            return c
        J = np.stack([(M + M.T) @ c for M in cond_matrices])
        J_metric = np.linalg.solve(metric_r.T.conj(), J.T.conj()).T.conj()
        dy, *_ = np.linalg.lstsq(J_metric, -F, rcond=None)
        dc = np.linalg.solve(metric_r, dy)
        s = 1.0
        while s > min_step:
            if np.max(np.abs(values(c + s * dc))) < norm:
                break
            s /= 2
        else:
            raise BuildError(
                f"period/residue projection stalled at defect {norm:.3e}")
        c = c + s * dc
    if np.max(np.abs(values(c))) < tol:
        return c
    raise BuildError(
        f"period/residue projection did not converge in {max_iter} steps "
        f"(initial defects {np.abs(values(np.asarray(c0, dtype=complex)))})")


def _damped_newton(fun, jac, t0, tol=1e-11, max_iter=20, max_halvings=12):
    t = np.asarray(t0, dtype=complex)
    for _ in range(max_iter):
        F = fun(t)
        norm = np.max(np.abs(F)) if len(F) else 0.0
        if norm < tol:
            return t
        J = jac(t)
        Jr = np.block([[J.real, -J.imag], [J.imag, J.real]])
        Fr = np.concatenate([F.real, F.imag])
        try:
            step = np.linalg.solve(Jr, -Fr)
        except np.linalg.LinAlgError as exc:
            raise BuildError(f"period Newton system singular: {exc}") from exc
        delta = step[:len(t)] + 1j * step[len(t):]
        scale = 1.0
        for _ in range(max_halvings):
            cand = t + scale * delta
            if np.max(np.abs(fun(cand))) < norm:
                t = cand
                break
            scale /= 2
        else:
            raise BuildError("period Newton stalled: no descent under damping")
    if np.max(np.abs(fun(t))) < tol:
        return t
    raise BuildError(f"period Newton did not converge in {max_iter} steps")


def _quadratic_system(tables):
    """Residual/Jacobian of F_k(t) = sum_ij tau_i tau_j P_k[i,j], tau=(1,t)."""
    def fun(t):
        tau = np.concatenate(([1.0], t))
        return np.einsum("i,kij,j->k", tau, tables, tau)

    def jac(t):
        tau = np.concatenate(([1.0], t))
        full = np.einsum("kij,j->ki", tables, tau) + np.einsum("i,kij->kj", tau, tables)
        return full[:, 1:]

    return fun, jac


def _contract_tables(matrices, coeff_vectors):
    """tables[r, a, b] = c_a^T M_r c_b for frame coefficient vectors."""
    C = np.column_stack(coeff_vectors)
    return np.stack([C.T @ M @ C for M in matrices])


# ---------------------------------------------------------------------------
# The conformal map object

@dataclass(frozen=True, eq=False)
class ConformalMap:
    """Boundary and interior data of a built Szego coordinate."""

    domain: object
    mode: str
    base_point: complex
    element: SpanElement
    f_boundary: BoundaryFunction
    sigma_taylor: np.ndarray  # sigma^{(k)}(a)/k! at the base point
    f_taylor: np.ndarray      # f(a), f'(a)/1!, ... about the base point
    period_residuals: np.ndarray
    certificate: dict
    fit_residual: float
    deviation_sup: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def span_order(self):
        return max(m for _, m in self.element.bases)

    def base_points(self):
        seen = []
        for a, _ in self.element.bases:
            if a not in seen:
                seen.append(a)
        return np.asarray(seen, dtype=complex)

    def point_orders(self):
        orders = {}
        for a, m in self.element.bases:
            orders[a] = max(orders.get(a, 0), m)
        return np.array([orders[a] for a in self.base_points()], dtype=int)

    def fprime_boundary(self):
        return self.element.sigma_boundary.values ** 2

    def f_at(self, points):
        return cauchy_values(self.f_boundary, points)

    def sigma_jets(self, up_to=None):
        n = len(self.sigma_taylor) if up_to is None else up_to + 1
        return np.array([self.sigma_taylor[k] * factorial(k) for k in range(n)])

    def f_jets(self, up_to=None):
        n = len(self.f_taylor) if up_to is None else up_to + 1
        return np.array([self.f_taylor[k] * factorial(k) for k in range(n)])


def taylor_coefficients(boundary_fn, a, count, radius_factor=0.75):
    """Taylor coefficients at a of the Cauchy transform of boundary data.

    Samples the compensated Cauchy integral on a circle about a and reads
    the coefficients off an FFT, which keeps orders well conditioned where
    direct boundary differentiation would lose digits.
    """
    dom = boundary_fn.domain
    r = radius_factor * float(dom.boundary_distance(a)[0])
    m = 1
    while m < 8 * (count + 1) or m < 64:
        m *= 2
    theta = np.arange(m) * (TWO_PI / m)
    ring = a + r * np.exp(1j * theta)
    vals = cauchy_values(boundary_fn, ring)
    coef = np.fft.fft(vals) / m
    k = np.arange(count + 1)
    return coef[: count + 1] / r ** k


def _eval_periodic_samples(samples, t):
    n = len(samples)
    coef = np.fft.fft(samples) / n
    k = np.fft.fftfreq(n, 1.0 / n).astype(int)
    return np.exp(1j * np.multiply.outer(np.atleast_1d(t), k)) @ coef


def _integrate_fprime(domain, fprime_boundary, fprime_on_cuts, cuts, a, mean_tol):
    """Antidifferentiate f' along each curve and connect the constants.

    Per-curve antiderivatives are spectral in the parameter; the constant of
    each hole curve is fixed by integrating f' along its cut from the outer
    boundary, and the global constant by f(a) = a.
    """
    raw, means = spectral_antiderivative(domain, fprime_boundary * domain.dz_dt,
                                         mean_tol=None)
    f = np.array(raw)
    if cuts is not None:
        for j, cut in enumerate(cuts.cuts):
            k_hole, t_hole = cut.start_anchor
            _, t_outer = cut.end_anchor
            along = cut.integrate(fprime_on_cuts[j], "dz")
            f_outer_end = complex(_eval_periodic_samples(
                f[domain.slices[0]], t_outer)[0])
            f_hole_start = complex(_eval_periodic_samples(
                f[domain.slices[k_hole]], t_hole)[0])
            # f(end) - f(start) = integral of f' along the cut
            f[domain.slices[k_hole]] += (f_outer_end - along) - f_hole_start
    fb = BoundaryFunction(domain, f)
    fa = complex(cauchy_values(fb, a)[0])
    fb = BoundaryFunction(domain, f + (a - fa))
    if np.any(means > mean_tol):
        raise BuildError(
            f"f' has a nonvanishing curve period {means.max():.3e} "
            f"(tolerance {mean_tol:.3e}); the map would be multivalued")
    return fb, means


def univalence_certificate(domain, element, f_boundary, base_point):
    """Explicit certificate: f' has no boundary zeros and no interior zeros
    by the argument principle, the image boundary is simple with the right
    nesting, and f covers a test point exactly once."""
    sigma = element.sigma_boundary.values
    min_fprime = float(np.min(np.abs(sigma) ** 2))
    # d(log f')/dt integrated in the parameter equals the f''/f' dz integral
    dsigma_dt = spectral_derivative(domain, sigma)
    total = 0.0 + 0.0j
    for sl, c in zip(domain.slices, domain.curves):
        total += np.sum(2 * dsigma_dt[sl] / sigma[sl]) * (TWO_PI / c.n_samples)
    zero_count = total / (2j * np.pi)
    zero_count_int = int(np.rint(zero_count.real))
    fvals = f_boundary.values
    image_simple = all(not polyline_self_intersects(fvals[sl], closed=True)
                       for sl in domain.slices)
    image_disjoint = True
    for i in range(len(domain.slices)):
        for j in range(i + 1, len(domain.slices)):
            zi = fvals[domain.slices[i]]
            zj = fvals[domain.slices[j]]
            if polylines_intersect(np.append(zi, zi[0]), np.append(zj, zj[0])):
                image_disjoint = False
    degree = 0.0
    for sl in domain.slices:
        w = fvals[sl] - base_point  # f(a) = a after normalization
        degree += float(np.sum(np.angle(np.roll(w, -1) / w))) / TWO_PI
    degree_int = int(np.rint(degree))
    ok = (min_fprime > 1e-12 and abs(zero_count - zero_count_int) < 1e-6
          and zero_count_int == 0 and image_simple and image_disjoint
          and degree_int == 1)
    return {
        "passed": bool(ok),
        "min_abs_fprime": min_fprime,
        "fprime_zero_count": zero_count_int,
        "fprime_zero_count_raw": complex(zero_count),
        "image_simple": image_simple,
        "image_curves_disjoint": image_disjoint,
        "degree_at_base": degree_int,
    }


def _finish_map(domain, mode, a, element, fit_residual, cuts, fprime_on_cuts,
                period_residuals, diagnostics, mean_tol=1e-8):
    fprime = element.sigma_boundary.values ** 2
    f_boundary, means = _integrate_fprime(domain, fprime, fprime_on_cuts, cuts,
                                          a, mean_tol)
    cert = univalence_certificate(domain, element, f_boundary, a)
    if not cert["passed"]:
        raise BuildError(f"univalence certificate failed: {cert}")
    n_orders = max(m for _, m in element.bases)
    sigma_taylor = taylor_coefficients(element.sigma_boundary, a, n_orders + 1)
    # f' = sigma^2: Taylor coefficients of f via series square and division
    sq = np.convolve(sigma_taylor, sigma_taylor)[: n_orders + 2]
    f_taylor = np.empty(n_orders + 3, dtype=complex)
    f_taylor[0] = a
    f_taylor[1:] = sq / np.arange(1, n_orders + 3)
    deviation = float(np.max(np.abs(f_boundary.values - domain.nodes)))
    diagnostics = dict(diagnostics)
    diagnostics["curve_period_magnitudes"] = means
    return ConformalMap(domain=domain, mode=mode, base_point=complex(a),
                        element=element, f_boundary=f_boundary,
                        sigma_taylor=sigma_taylor, f_taylor=f_taylor,
                        period_residuals=np.asarray(period_residuals),
                        certificate=cert, fit_residual=float(fit_residual),
                        deviation_sup=deviation, diagnostics=diagnostics)


def map_from_span_element(domain, element, a, cuts=None, period_tol=1e-9,
                          mode="custom"):
    """Integrate f' = sigma^2 for a given span element.

    Verifies that the hole periods of sigma^2 dz vanish before integrating;
    useful for closed-form elements and tests.
    """
    p = domain.connectivity - 1
    residuals = periods(element, domain) if p else np.empty(0, dtype=complex)
    if p and np.max(np.abs(residuals)) > period_tol:
        raise BuildError(f"hole periods {np.abs(residuals).max():.3e} nonzero; "
                         "the antiderivative would be multivalued")
    if p and cuts is None:
        cuts = make_cuts(domain)
    fprime_cuts = ([element.sigma_at(c.nodes) ** 2 for c in cuts.cuts]
                   if cuts is not None else None)
    return _finish_map(domain, mode, a, element, float("nan"), cuts=cuts,
                       fprime_on_cuts=fprime_cuts, period_residuals=residuals,
                       diagnostics={})


# ---------------------------------------------------------------------------
# Simply connected build

def build_sc(domain, a=0.0, order=DEFAULT_SC_ORDER, eps=1e-6, solver=None):
    """Fit sigma close to 1, set f' = sigma^2, integrate and normalize."""
    if domain.connectivity != 1:
        raise BuildError("build_sc needs a simply connected domain")
    if solver is None:
        solver = SzegoSolver(domain, max_order=order)
    target = BoundaryFunction(domain, np.ones(domain.n_total, dtype=complex))
    schedule = [n for n in _SC_ORDER_SCHEDULE if n < order] + [order]
    element = report = None
    for n in schedule:
        element, report = fit_span_to_target(solver, [(a, n)], target)
        if report.boundary_residual <= eps:
            break
    if report.boundary_residual > eps:
        raise BuildError(
            f"fit infeasible at order {order}: residual "
            f"{report.boundary_residual:.3e} > eps {eps:.3e}")
    return _finish_map(domain, "sc", a, element, report.boundary_residual,
                       cuts=None, fprime_on_cuts=None,
                       period_residuals=np.empty(0, dtype=complex),
                       diagnostics={"fit": report})


# ---------------------------------------------------------------------------
# Multiply connected arc-length build

def _mc_basis_schedule(domain, max_points, ring_order, cuts, clearance):
    p = domain.connectivity - 1
    for k in _RING_SCHEDULE:
        if k > max_points:
            break
        if p * k * (ring_order + 1) > domain.n_total // 4:
            break
        avoid = (np.concatenate([c.nodes for c in cuts.cuts])
                 if cuts is not None else None)
        yield ring_bases(domain, k, order=ring_order, avoid=avoid,
                         min_avoid=clearance)


def build_mc_arclength(domain, a, order=2, eps=1e-5, solver=None, cuts=None,
                       period_tol=1e-10, max_ring_points=32):
    """Kill the hole periods of (h - sum A_j r_j)^2 dz and integrate.

    h approximates 1 and the r_j approximate the rational basis, all over
    a ring of base points around each hole (single-point spans converge
    too slowly on multiply connected domains to be usable).  order is the
    derivative order carried by each ring point.
    """
    p = domain.connectivity - 1
    if p == 0:
        raise BuildError("build_mc_arclength needs a multiply connected domain")
    if solver is None:
        solver = SzegoSolver(domain, max_order=max(order, 2))
    if cuts is None:
        cuts = make_cuts(domain)  # used for connection constants only
    rationals = rational_basis(domain)
    target_one = BoundaryFunction(domain, np.ones(domain.n_total, dtype=complex))
    clearance = 0.03 * domain.diameter

    h = h_rep = fits = None
    for bases in _mc_basis_schedule(domain, max_ring_points, order, cuts, clearance):
        h, h_rep = fit_span_to_target(solver, bases, target_one)
        fits = [fit_span_to_target(solver, bases,
                                   BoundaryFunction(domain, Rj(domain.nodes)))
                for Rj in rationals]
        if h_rep.boundary_residual <= eps and all(
                r.boundary_residual <= eps for _, r in fits):
            break
    worst = max([h_rep.boundary_residual] + [r.boundary_residual for _, r in fits])
    if worst > eps:
        raise BuildError(f"fit infeasible with {max_ring_points} ring points: "
                         f"residual {worst:.3e} > eps {eps:.3e}")
    elements = [h] + [el for el, _ in fits]

    # period tables over (h, r_1..r_p); the unknown enters as tau = (1, -A)
    traces = [el.sigma_boundary.values for el in elements]
    tables = np.empty((p, p + 1, p + 1), dtype=complex)
    for k in range(1, p + 1):
        for i in range(p + 1):
            for j in range(p + 1):
                tables[k - 1, i, j] = hole_period(domain, traces[i] * traces[j], k)
    fun, jac = _quadratic_system(tables)
    minus_A = _damped_newton(fun, jac, np.zeros(p, dtype=complex))
    A = -minus_A

    coeffs = h.coeffs - sum(Aj * el.coeffs for Aj, el in zip(A, elements[1:]))
    F = SpanElement.from_coeffs(solver, h.bases, coeffs)
    residuals = periods(F, domain)  # hole periods of F^2, recomputed
    if np.max(np.abs(residuals)) > period_tol:
        raise BuildError(
            f"hole periods {np.abs(residuals).max():.3e} above {period_tol:.3e} "
            "after the Newton solve")
    fprime_cuts = [F.sigma_at(c.nodes) ** 2 for c in cuts.cuts]
    diagnostics = {
        "A": A,
        "fit_h": h_rep,
        "fit_r": [r for _, r in fits],
        "linear_term_matrix": 2 * tables[:, 0, 1:],
    }
    return _finish_map(domain, "mc-arclength", a, F, h_rep.boundary_residual,
                       cuts=cuts, fprime_on_cuts=fprime_cuts,
                       period_residuals=residuals, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# Double build

def build_double(domain, a0, order=2, eps=1e-5, solver=None, cuts=None,
                 period_tol=1e-9, max_ring_points=32, cut_clearance_factor=5.0):
    """Kill all periods and residues of h^2 dz on the double and integrate.

    Fits sigma close to 1 over a ring of base points, then projects the
    coefficients onto the manifold where the p hole periods, the p handle
    pairings, and the residues at every reflected base-point pole vanish.
    The projection takes minimum-norm Newton steps in the boundary L2
    metric of sigma, so the map stays as close to the identity as the
    constraints allow.  With h^2 dz exact on the double, f extends
    meromorphically there and the image carries area as well as arc-length
    quadrature structure.  Degenerates to build_sc for simply connected
    domains, whose single pole is residue free automatically.
    """
    p = domain.connectivity - 1
    if p == 0:
        return build_sc(domain, a=a0, order=max(order, DEFAULT_SC_ORDER),
                        eps=eps, solver=solver)
    if solver is None:
        solver = SzegoSolver(domain, max_order=max(order, 2))
    needed = cut_clearance_factor * float(domain.local_spacing(a0)[0])
    if cuts is None:
        cuts = make_cuts(domain)
        if float(cuts.clearance_from(a0)[0]) < needed:
            # re-anchor each cut at the hole node farthest from the base point
            anchors = []
            for j in range(1, domain.connectivity):
                hole = domain.curves[j]
                th = hole.t[int(np.argmax(np.abs(hole.samples - a0)))]
                start = complex(hole.evaluate(th))
                outer = domain.curves[0]
                to = outer.t[int(np.argmin(np.abs(outer.samples - start)))]
                anchors.append((float(th), float(to)))
            cuts = make_cuts(domain, anchors=anchors)
    clearance = float(cuts.clearance_from(a0)[0])
    if clearance < needed:
        raise BuildError(
            f"base point {a0} is {clearance:.3e} from a cut; needs {needed:.3e}")
    rational_basis(domain)  # hole points must support the period structure
    target_one = BoundaryFunction(domain, np.ones(domain.n_total, dtype=complex))
    ring_clear = 0.03 * domain.diameter

    last_error = None
    for bases in _mc_basis_schedule(domain, max_ring_points, order, cuts,
                                    ring_clear):
        flat = flatten_bases(bases)
        h0, rep0 = fit_span_to_target(solver, bases, target_one)
        if rep0.boundary_residual > eps:
            last_error = BuildError(
                f"fit residual {rep0.boundary_residual:.3e} > eps {eps:.3e}")
            continue
        poles, res_matrices = _residue_form_matrices(solver, flat)
        cond_matrices = (_hole_form_matrices(solver, flat)
                         + _handle_form_matrices(solver, flat, cuts)
                         + res_matrices[:-1])
        S_cols, _ = span_columns(solver, flat)
        metric_r = np.linalg.qr(S_cols * np.sqrt(domain.ds)[:, None], mode="r")
        try:
            coeffs = _leastnorm_newton(cond_matrices, h0.coeffs, metric_r)
            h = SpanElement.from_coeffs(solver, flat, coeffs)
            h_frame = HalfOrderFrame.from_element(h, cuts, tag="combined")
            pair_residuals = periods(h_frame, domain, cuts)
            residues = np.array([residue_at_pole(h, a_i) for a_i in poles])
            if np.max(np.abs(pair_residuals)) > period_tol:
                raise BuildError(
                    f"pairings {np.abs(pair_residuals).max():.3e} above "
                    f"{period_tol:.3e} after the projection")
            if np.max(np.abs(residues)) > 100 * period_tol:
                raise BuildError(
                    f"reflected-pole residues {np.abs(residues).max():.3e} remain")
            fprime_cuts = [h_frame.h1_cuts[j] ** 2 for j in range(p)]
            # total boundary integral of h1^2 dz doubles as a residue check
            # for the reflected side as a whole
            residue_total = contour_integral(
                BoundaryFunction(domain, h.sigma_boundary.values ** 2), "dz")
            diagnostics = {
                "fit_h0": rep0,
                "ring_points": np.array(poles),
                "pole_residues": residues,
                "reflected_residue_total": residue_total,
                "cuts": cuts,
                "projection_move": float(np.max(np.abs(
                    h.sigma_boundary.values - h0.sigma_boundary.values))),
            }
            return _finish_map(domain, "double", a0, h, rep0.boundary_residual,
                               cuts=cuts, fprime_on_cuts=fprime_cuts,
                               period_residuals=np.concatenate(
                                   [pair_residuals, residues]),
                               diagnostics=diagnostics)
        except BuildError as exc:
            last_error = exc
    raise BuildError(f"double build failed up to {max_ring_points} ring points "
                     f"per hole: {last_error}")


# ---------------------------------------------------------------------------
# Image domain

def image_domain(cmap, refit_tol=1e-8):
    """Refit the image boundary curves and revalidate nesting.

    Image hole points are enclosed-area centroids of the image hole curves,
    validated by winding numbers inside validate_domain.
    """
    if not cmap.certificate["passed"]:
        raise BuildError("image_domain requires a passed univalence certificate")
    dom = cmap.domain
    curves = []
    scale = max(1.0, float(np.max(np.abs(cmap.f_boundary.values))))
    for sl, c in zip(dom.slices, dom.curves):
        w = cmap.f_boundary.values[sl]
        n = c.n_samples
        try:
            curve = fit_trig_curve(w, max_degree=n // 4)
            err = float(np.max(np.abs(curve.samples - w)))
            if err > refit_tol * scale:
                # spectrum not decayed by n/4: keep every sampled mode on a
                # doubled grid
                curve = fit_trig_curve(w, max_degree=n // 2 - 1, n_samples=2 * n)
                err = float(np.max(np.abs(curve.samples[::2] - w)))
        except GeometryError as exc:
            raise BuildError(f"image curve refit failed: {exc}") from exc
        if err > refit_tol * scale:
            raise BuildError(
                f"image curve refit error {err:.3e} (univalence margin too thin)")
        curves.append(curve)
    holes = []
    for curve in curves[1:]:
        dt = TWO_PI / curve.n_samples
        area = np.sum(np.conj(curve.samples) * curve.derivative_samples) * dt / 2j
        m1 = np.sum(np.conj(curve.samples) * curve.samples
                    * curve.derivative_samples) * dt / 2j
        holes.append(complex(m1 / area))
    try:
        return validate_domain(curves, holes)
    except GeometryError as exc:
        raise BuildError(f"image domain invalid: {exc}") from exc

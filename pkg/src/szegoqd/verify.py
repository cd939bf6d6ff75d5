"""Certification of quadrature identities by independent boundary integrals.

A quadrature data set (nodes, derivative orders, coefficients) claims that
the boundary arc-length integral, or the area integral, of every Hardy
function equals a finite combination of its values and derivatives at the
nodes.  Everything here checks such claims against boundary integrals
computed directly on the domain grid: moments of a training family fix the
coefficients, and a randomized holdout family measures how well the
functional generalizes.  Area integrals never touch a 2-D mesh; they go
through the boundary via Green's identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np

from .errors import BuildError, QdError
from .geometry import BoundaryFunction, contour_integral

ARC = "arclength"
AREA = "area"


@dataclass(frozen=True, eq=False)
class QuadratureData:
    """Nodes w_j, orders n_j and coefficients c_jk of one quadrature identity."""

    measure: str
    nodes: np.ndarray
    orders: np.ndarray
    coefficients: tuple  # one array of length n_j + 1 per node
    fit_residual: float = float("nan")
    holdout_residual: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.measure not in (ARC, AREA):
            raise QdError(f"measure must be {ARC!r} or {AREA!r}")

    def apply(self, value_and_derivatives):
        """Evaluate the functional given h^{(k)}(w_j) as a (node, order) table."""
        total = 0.0 + 0.0j
        for j, cj in enumerate(self.coefficients):
            for k, cjk in enumerate(cj):
                total += cjk * value_and_derivatives[j][k]
        return complex(total)

    def apply_to(self, fn_derivs):
        """Evaluate the functional for a function given as fn_derivs(z, k)."""
        table = [[fn_derivs(w, k) for k in range(int(nj) + 1)]
                 for w, nj in zip(self.nodes, self.orders)]
        return self.apply(table)

    def with_holdout(self, residual, table):
        d = dict(self.diagnostics)
        d["holdout_table"] = table
        return QuadratureData(measure=self.measure, nodes=self.nodes,
                              orders=self.orders, coefficients=self.coefficients,
                              fit_residual=self.fit_residual,
                              holdout_residual=float(residual), diagnostics=d)


def area_moment(domain, h):
    """Area integral of a holomorphic trace via Green:
    (1/2i) oint h(z) conj(z) dz."""
    h = h if isinstance(h, BoundaryFunction) else domain.function(h)
    zbar = BoundaryFunction(domain, np.conj(domain.nodes))
    return contour_integral(h * zbar, "dz") / 2j


def boundary_moment(domain, h, measure):
    h = h if isinstance(h, BoundaryFunction) else domain.function(h)
    if measure == ARC:
        return contour_integral(h, "ds")
    return area_moment(domain, h)


# ---------------------------------------------------------------------------
# Single-node extraction for simply connected builds

def _series_mul(a, b, n_keep):
    return np.convolve(a, b)[:n_keep]


def extract_quadrature_sc(cmap):
    """Arc-length quadrature data of the image of a single-point build.

    Expands the pairing of the boundary integral against the span element
    in derivatives at the base point: a Leibniz expansion in the jets of
    sigma and a composition-series (Faa di Bruno) expansion of (h of f),
    organized as truncated Taylor products so high orders stay stable.
    """
    points = cmap.base_points()
    if len(points) != 1:
        raise BuildError("extraction needs a single-base-point build; "
                         "use fit_quadrature for multi-point spans")
    c = cmap.element.coeffs
    n = len(c) - 1
    sigma = cmap.sigma_taylor[: n + 1]
    # g(t) = f(a + t) - f(a) as a series with no constant term
    g = np.zeros(n + 1, dtype=complex)
    upto = min(len(cmap.f_taylor) - 1, n)
    g[1: upto + 1] = cmap.f_taylor[1: upto + 1]
    # weights[m] = conj(c_m) m!
    weights = np.conj(c) * np.array([factorial(m) for m in range(n + 1)])
    coeffs = np.zeros(n + 1, dtype=complex)
    g_pow = np.zeros(n + 1, dtype=complex)
    g_pow[0] = 1.0
    for j in range(n + 1):
        if j > 0:
            g_pow = _series_mul(g_pow, g, n + 1)
        prod = _series_mul(sigma, g_pow, n + 1)
        coeffs[j] = np.dot(weights, prod) / factorial(j)
    w0 = complex(cmap.f_taylor[0])
    return QuadratureData(measure=ARC, nodes=np.array([w0]),
                          orders=np.array([n]), coefficients=(coeffs,),
                          fit_residual=0.0,
                          diagnostics={"source": "extraction", "span_order": n})


# ---------------------------------------------------------------------------
# Generic least-squares certification

def _training_family(domain, degree):
    """Scaled monomials about the centroid plus, per hole, scaled negative
    powers about the hole point: a practical spanning set for the Hardy
    space of the domain."""
    c = domain.centroid
    r = float(np.max(np.abs(domain.nodes - c)))
    fams = [("monomial", c, r, +1, degree)]
    for j, zj in enumerate(domain.hole_points, start=1):
        rj = float(np.max(np.abs(domain.curves[j].samples - zj)))
        fams.append((f"hole{j}", complex(zj), rj, -1, degree))
    out = []
    for name, center, scale, sign, deg in fams:
        rng = range(deg + 1) if sign > 0 else range(1, deg + 1)
        for i in rng:
            out.append(_power_function(f"{name}^{sign * i}", center, scale,
                                       sign * i))
    return out


def _power_function(name, center, scale, power):
    """((z - center)/scale)^power with all derivatives, power in Z."""
    def value(z):
        return ((z - center) / scale) ** power

    def deriv(z, k):
        coef = 1.0
        for i in range(k):
            coef *= (power - i)
        if coef == 0:  # nonnegative power differentiated away
            return 0.0
        return coef * ((z - center) / scale) ** (power - k) / scale ** k

    return name, value, deriv


def fit_quadrature(domain2, nodes, orders, measure=ARC, training_degree=None,
                   svd_cutoff=1e-13):
    """Least-squares quadrature coefficients from training moments.

    Rows are training functions (monomials about the centroid plus negative
    powers about each hole), columns are (node, derivative order) pairs;
    the right-hand side holds boundary moments.  Returns QuadratureData
    with the relative fit residual and conditioning diagnostics.
    """
    nodes = np.atleast_1d(np.asarray(nodes, dtype=complex))
    orders = np.broadcast_to(np.asarray(orders, dtype=int), nodes.shape)
    if not np.all(domain2.contains(nodes)):
        raise QdError("quadrature nodes must lie inside the domain")
    total_orders = int(np.sum(orders + 1))
    if training_degree is None:
        training_degree = max(2 * total_orders, int(np.max(orders)) + 4)
    family = _training_family(domain2, training_degree)
    scale = float(np.max(np.abs(domain2.nodes - domain2.centroid)))
    cols = []
    col_scale = []
    for w, nj in zip(nodes, orders):
        for k in range(int(nj) + 1):
            cols.append((w, k))
            col_scale.append(scale ** k / factorial(k))
    A = np.empty((len(family), len(cols)), dtype=complex)
    b = np.empty(len(family), dtype=complex)
    for i, (name, value, deriv) in enumerate(family):
        b[i] = boundary_moment(domain2, domain2.sampled(value), measure)
        for jc, ((w, k), cs) in enumerate(zip(cols, col_scale)):
            A[i, jc] = deriv(w, k) * cs
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > svd_cutoff * s[0]
    x = Vt[keep].conj().T @ ((U[:, keep].conj().T @ b) / s[keep])
    resid = float(np.linalg.norm(A @ x - b) / (1 + np.linalg.norm(b)))
    x = x * np.asarray(col_scale)
    coefficients, pos = [], 0
    for nj in orders:
        coefficients.append(np.array(x[pos: pos + int(nj) + 1]))
        pos += int(nj) + 1
    diagnostics = {
        "singular_values": s,
        "rank": int(keep.sum()),
        "n_columns": len(cols),
        "training_degree": int(training_degree),
        "condition": float(s[0] / s[keep][-1]) if keep.any() else np.inf,
    }
    return QuadratureData(measure=measure, nodes=nodes, orders=np.array(orders),
                          coefficients=tuple(coefficients), fit_residual=resid,
                          diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# Holdout verification

def _rational_holdout(name, pole):
    def value(z):
        return 1.0 / (z - pole)

    def deriv(z, k):
        return (-1.0) ** k * factorial(k) / (z - pole) ** (k + 1)

    return name, value, deriv


def _exponential_holdout(name, alpha):
    def value(z):
        return np.exp(alpha * z)

    def deriv(z, k):
        return alpha ** k * np.exp(alpha * z)

    return name, value, deriv


def default_holdout_family(domain2, seed=0, n_rational=20):
    """Random rational functions with poles well outside the closed domain
    (beyond the outer boundary and, for holes, well inside them) plus an
    exponential; all have analytically known derivatives."""
    rng = np.random.default_rng(seed)
    c = domain2.centroid
    diam = domain2.diameter
    reach = float(np.max(np.abs(domain2.nodes - c)))
    fams = []
    n_outer = n_rational if domain2.connectivity == 1 else (n_rational + 1) // 2
    for i in range(n_outer):
        angle = rng.uniform(0, 2 * np.pi)
        radius = reach + (2.0 + 0.5 * rng.uniform(0, 1.0)) * diam
        fams.append(_rational_holdout(f"pole-out-{i}", c + radius * np.exp(1j * angle)))
    n_hole = n_rational - n_outer
    for i in range(n_hole):
        j = 1 + i % (domain2.connectivity - 1)
        zj = domain2.hole_points[j - 1]
        rj = float(np.min(np.abs(domain2.curves[j].samples - zj)))
        angle = rng.uniform(0, 2 * np.pi)
        fams.append(_rational_holdout(f"pole-hole-{i}",
                                      zj + 0.3 * rj * rng.uniform(0, 1)
                                      * np.exp(1j * angle)))
    # frequency high enough to weight the mid-order moments the node set
    # must reproduce; a QD functional is exact at any frequency
    alpha = 4.0 * np.exp(1j * rng.uniform(0, 2 * np.pi)) / max(diam, 1e-12)
    fams.append(_exponential_holdout("exp", alpha))
    return fams


def verify_quadrature(domain2, qd, holdouts=None, tol=1e-4, seed=0,
                      n_rational=20):
    """Max relative residual of the functional over a holdout family.

    Each residual is |moment(h) - functional(h)| / (1 + |moment(h)|); the
    report passes iff the maximum stays below tol.
    """
    if holdouts is None:
        holdouts = default_holdout_family(domain2, seed=seed,
                                          n_rational=n_rational)
    rows = []
    worst = 0.0
    for name, value, deriv in holdouts:
        moment = boundary_moment(domain2, domain2.sampled(value), qd.measure)
        functional = qd.apply_to(deriv)
        resid = abs(moment - functional) / (1 + abs(moment))
        worst = max(worst, resid)
        rows.append({"name": name, "moment": moment,
                     "functional": functional, "residual": float(resid)})
    report = {
        "measure": qd.measure,
        "tolerance": float(tol),
        "seed": int(seed),
        "max_residual": float(worst),
        "passed": bool(worst < tol),
        "fit_residual": float(qd.fit_residual),
        "functions": rows,
    }
    return qd.with_holdout(worst, rows), report


# ---------------------------------------------------------------------------
# Meromorphic-extension diagnostics

def moment_defect(u, divisor_nodes=(), divisor_orders=(), test_degree=8,
                  hole_order=None):
    """Largest normalized moment of u against test functions vanishing at
    the divisor.

    Tests q = m_n(z) prod_j (z - w_j)^{n_j+1} for scaled monomials m_n of
    degree up to test_degree, augmented on multiply connected domains by
    negative powers about each hole point; all moments oint u q dz vanish
    exactly when u is the boundary trace of a meromorphic function whose
    poles sit at the divisor with orders at most n_j + 1.  Each moment is
    normalized by the L2 boundary norm of q.
    """
    dom = u.domain
    nodes = np.atleast_1d(np.asarray(divisor_nodes, dtype=complex)) \
        if len(np.atleast_1d(divisor_nodes)) else np.empty(0, dtype=complex)
    orders = np.broadcast_to(np.asarray(divisor_orders, dtype=int), nodes.shape) \
        if nodes.size else np.empty(0, dtype=int)
    c = dom.centroid
    r = float(np.max(np.abs(dom.nodes - c)))
    z = dom.nodes
    divisor_factor = np.ones_like(z)
    for w, nj in zip(nodes, orders):
        divisor_factor = divisor_factor * ((z - w) / r) ** (int(nj) + 1)
    hole_order = test_degree if hole_order is None else hole_order
    augmentations = [np.ones_like(z)]
    for j, zj in enumerate(dom.hole_points, start=1):
        rj = float(np.max(np.abs(dom.curves[j].samples - zj)))
        for s in range(1, hole_order + 1):
            augmentations.append((rj / (z - zj)) ** s)
    worst = 0.0
    for aug in augmentations:
        base = divisor_factor * aug
        for n in range(test_degree + 1):
            q = base * ((z - c) / r) ** n
            qb = BoundaryFunction(dom, q)
            norm = np.sqrt(abs(contour_integral(qb * qb.conj(), "ds")))
            moment = contour_integral(u * qb, "dz")
            worst = max(worst, abs(moment) / norm)
    return float(worst)


# ---------------------------------------------------------------------------
# Quadrature data straight from a built map

def quadrature_from_map(cmap, image, measure=ARC):
    """Fit the quadrature functional of a built map's image.

    Nodes are the images of the span base points.  Arc-length derivative
    orders equal each point's span order; area orders are doubled (the
    squared companion doubles the pole order of the Schwarz function at
    the node), plus the antiderivative shift.
    """
    pts = cmap.base_points()
    nodes = cmap.f_at(pts)
    pt_orders = cmap.point_orders()
    if measure == ARC:
        orders = pt_orders
    else:
        orders = 2 * pt_orders
    return fit_quadrature(image, nodes, orders, measure=measure)

"""Spectral geometry for smooth finitely connected planar domains.

Boundary curves are trigonometric polynomials z(t) = sum_k c_k e^{ikt}
sampled on uniform parameter grids, so differentiation and resampling are
exact for the stored degree and the trapezoidal rule is spectrally accurate
for periodic analytic integrands.  Open cut arcs joining hole boundaries to
the outer boundary carry composite Gauss-Legendre rules instead, since
their integrands are not periodic.

Orientation convention: the boundary of the domain is positively oriented
as a whole, i.e. the outer curve runs counterclockwise and every hole curve
runs clockwise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, GridMismatchError

TWO_PI = 2.0 * np.pi


def _require_power_of_two(n):
    if n < 4 or (n & (n - 1)) != 0:
        raise GeometryError(f"grid size must be a power of two >= 4, got {n}")


def _cross(u, v):
    return u.real * v.imag - u.imag * v.real


def segments_intersect(a0, a1, b0, b1):
    """Proper-crossing test for segment a0-a1 against b0-b1 (vectorized)."""
    d1 = _cross(b1 - b0, a0 - b0)
    d2 = _cross(b1 - b0, a1 - b0)
    d3 = _cross(a1 - a0, b0 - a0)
    d4 = _cross(a1 - a0, b1 - a0)
    return ((d1 > 0) != (d2 > 0)) & ((d3 > 0) != (d4 > 0))


def polyline_self_intersects(z, closed=True):
    """Brute-force pairwise segment scan of a (closed) polyline."""
    n = len(z)
    nxt = np.roll(z, -1) if closed else z[1:]
    seg0 = z if closed else z[:-1]
    m = len(seg0)
    i, j = np.triu_indices(m, k=2)
    if closed:
        keep = ~((i == 0) & (j == m - 1))
        i, j = i[keep], j[keep]
    return bool(np.any(segments_intersect(seg0[i], nxt[i], seg0[j], nxt[j])))


def polylines_intersect(za, zb):
    """Segment scan between two open polylines."""
    a0, a1 = za[:-1], za[1:]
    b0, b1 = zb[:-1], zb[1:]
    i, j = np.meshgrid(np.arange(len(a0)), np.arange(len(b0)), indexing="ij")
    return bool(np.any(segments_intersect(a0[i.ravel()], a1[i.ravel()],
                                          b0[j.ravel()], b1[j.ravel()])))


@dataclass(frozen=True, eq=False)
class Curve:
    """Closed curve z(t), t in [0, 2pi), as a trigonometric polynomial.

    coeffs holds frequencies -K..K lowest-to-highest; samples and
    derivative_samples are exact values of z and z' on the uniform grid.
    """

    coeffs: np.ndarray
    n_samples: int
    samples: np.ndarray
    derivative_samples: np.ndarray

    def __post_init__(self):
        for a in (self.coeffs, self.samples, self.derivative_samples):
            a.setflags(write=False)

    @property
    def degree(self):
        return (len(self.coeffs) - 1) // 2

    @property
    def t(self):
        return np.arange(self.n_samples) * (TWO_PI / self.n_samples)

    @property
    def frequencies(self):
        k = self.degree
        return np.arange(-k, k + 1)

    def evaluate(self, t, order=0):
        """Evaluate z(t) or an exact parameter derivative at arbitrary t."""
        t = np.asarray(t, dtype=float)
        k = self.frequencies
        c = self.coeffs * (1j * k) ** order
        return np.exp(1j * np.multiply.outer(t, k)) @ c

    def arc_weights(self):
        """Trapezoidal arc-length weights (2pi/n)|z'(t_i)|."""
        return (TWO_PI / self.n_samples) * np.abs(self.derivative_samples)

    def signed_area(self):
        """Area enclosed, positive for counterclockwise orientation."""
        dt = TWO_PI / self.n_samples
        return float(np.real(
            np.sum(np.conj(self.samples) * self.derivative_samples) * dt / 2j))


def _check_simple(z, separation_factor):
    n = len(z)
    spacing = np.abs(np.roll(z, -1) - z)
    med = float(np.median(spacing))
    # non-adjacent node pairs must stay separated at grid resolution
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    dmin = float(np.min(np.abs(z[i] - z[j])))
    if dmin < separation_factor * med:
        raise GeometryError(
            f"curve self-intersection: non-adjacent samples {dmin:.3e} apart "
            f"(threshold {separation_factor * med:.3e})")
    if polyline_self_intersects(z, closed=True):
        raise GeometryError("curve self-intersection: segment scan found a crossing")


def make_curve(coeffs, n_samples, separation_factor=0.25):
    """Build a Curve from trig-polynomial coefficients (frequencies -K..K).

    Requires n_samples a power of two with n_samples >= 4*degree.  Verifies
    that the parametrization is regular (z' nonzero at every node) and that
    the curve is simple at grid resolution.
    """
    c = np.asarray(coeffs, dtype=complex).ravel()
    if c.size % 2 != 1:
        raise GeometryError("coefficients must cover frequencies -K..K (odd length)")
    deg = (c.size - 1) // 2
    _require_power_of_two(n_samples)
    if n_samples < 4 * max(deg, 1):
        raise GeometryError(
            f"n_samples={n_samples} too small for degree {deg} (need >= {4 * deg})")
    t = np.arange(n_samples) * (TWO_PI / n_samples)
    k = np.arange(-deg, deg + 1)
    basis = np.exp(1j * np.outer(t, k))
    z = basis @ c
    dz = basis @ (1j * k * c)
    scale = max(1.0, float(np.max(np.abs(dz))))
    if np.min(np.abs(dz)) <= 1e-12 * scale:
        raise GeometryError("degenerate parametrization: z'(t) vanishes at a node")
    _check_simple(z, separation_factor)
    return Curve(coeffs=c, n_samples=n_samples, samples=z, derivative_samples=dz)


def tangent_frame(curve):
    """Unit tangent samples T(t_i) = z'/|z'| and arc-length weights."""
    speed = np.abs(curve.derivative_samples)
    return curve.derivative_samples / speed, (TWO_PI / curve.n_samples) * speed


def curve_winding_number(curve, point, quantize=True, tol=1e-8):
    """Winding number of the curve about a point by contour integration."""
    dt = TWO_PI / curve.n_samples
    w = np.sum(curve.derivative_samples / (curve.samples - point)) * dt / (2j * np.pi)
    if not quantize:
        return w
    wr = int(np.rint(w.real))
    if abs(w - wr) > tol:
        raise GeometryError(
            f"winding number {w} not within {tol:g} of an integer "
            "(point too close to the curve or grid under-resolved)")
    return wr


@dataclass(frozen=True, eq=False)
class Domain:
    """Multiply connected domain: curves[0] is the outer boundary, the rest
    bound the holes; hole_points[j] lies strictly inside curves[j+1]."""

    curves: tuple
    hole_points: np.ndarray
    nodes: np.ndarray
    dz_dt: np.ndarray
    tangent: np.ndarray
    ds: np.ndarray
    slices: tuple

    def __post_init__(self):
        for a in (self.hole_points, self.nodes, self.dz_dt, self.tangent, self.ds):
            a.setflags(write=False)

    @property
    def connectivity(self):
        return len(self.curves)

    @property
    def n_total(self):
        return len(self.nodes)

    @property
    def perimeter(self):
        return float(np.sum(self.ds))

    @property
    def diameter(self):
        z = self.curves[0].samples
        return float(np.max(np.abs(z[:, None] - z[None, ::4])))

    @property
    def centroid(self):
        outer = self.curves[0]
        dt = TWO_PI / outer.n_samples
        area = outer.signed_area()
        m1 = np.sum(np.conj(outer.samples) * outer.samples
                    * outer.derivative_samples) * dt / 2j
        return complex(m1 / area)

    def grid_signature(self):
        return tuple(c.n_samples for c in self.curves)

    def restrict(self, values, k):
        return values[self.slices[k]]

    def contains(self, points):
        """Interior test by winding number over the full boundary."""
        pts = np.atleast_1d(np.asarray(points, dtype=complex))
        w = np.zeros(pts.shape, dtype=complex)
        for c in self.curves:
            dt = TWO_PI / c.n_samples
            w += np.einsum("i,ij->j", c.derivative_samples * dt,
                           1.0 / (c.samples[:, None] - pts[None, :])) / (2j * np.pi)
        return np.abs(w - 1.0) < 1e-6

    def boundary_distance(self, points):
        pts = np.atleast_1d(np.asarray(points, dtype=complex))
        return np.min(np.abs(pts[:, None] - self.nodes[None, :]), axis=1)

    def local_spacing(self, points):
        """Grid spacing |z' dt| of the boundary node nearest to each point."""
        pts = np.atleast_1d(np.asarray(points, dtype=complex))
        idx = np.argmin(np.abs(pts[:, None] - self.nodes[None, :]), axis=1)
        dt = np.concatenate([np.full(c.n_samples, TWO_PI / c.n_samples)
                             for c in self.curves])
        return np.abs(self.dz_dt[idx]) * dt[idx]

    def function(self, values):
        return BoundaryFunction(self, np.asarray(values, dtype=complex))

    def sampled(self, fn):
        return BoundaryFunction(self, np.asarray(fn(self.nodes), dtype=complex))


def validate_domain(curves, hole_points=()):
    """Assemble a Domain, verifying orientation and nesting by winding numbers.

    The outer curve must be positively oriented and wind once around every
    hole point; hole curve k must wind -1 around its own hole point and 0
    around every other.
    """
    curves = tuple(curves)
    if not curves:
        raise GeometryError("a domain needs at least one boundary curve")
    hole_points = np.asarray(list(hole_points), dtype=complex)
    if len(hole_points) != len(curves) - 1:
        raise GeometryError(
            f"{len(curves) - 1} hole curves need {len(curves) - 1} hole points, "
            f"got {len(hole_points)}")
    if curves[0].signed_area() <= 0:
        raise GeometryError("outer boundary must be positively oriented")
    for j, zj in enumerate(hole_points):
        if curve_winding_number(curves[0], zj) != 1:
            raise GeometryError(f"hole point {j} is not inside the outer boundary")
    for k, ck in enumerate(curves[1:], start=1):
        if ck.signed_area() >= 0:
            raise GeometryError(
                f"hole curve {k} must be negatively oriented (clockwise)")
        for j, zj in enumerate(hole_points, start=1):
            w = curve_winding_number(ck, zj)
            want = -1 if j == k else 0
            if w != want:
                raise GeometryError(
                    f"winding of hole curve {k} about hole point {j} is {w}, "
                    f"expected {want}")
    nodes = np.concatenate([c.samples for c in curves])
    dz = np.concatenate([c.derivative_samples for c in curves])
    tangent = dz / np.abs(dz)
    ds = np.concatenate([c.arc_weights() for c in curves])
    slices, start = [], 0
    for c in curves:
        slices.append(slice(start, start + c.n_samples))
        start += c.n_samples
    return Domain(curves=curves, hole_points=hole_points, nodes=nodes,
                  dz_dt=dz, tangent=tangent, ds=ds, slices=tuple(slices))


@dataclass(frozen=True, eq=False)
class BoundaryFunction:
    """Complex samples on the concatenated grids of a Domain's curves."""

    domain: Domain
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != (self.domain.n_total,):
            raise GridMismatchError(
                f"expected {self.domain.n_total} samples, got {v.shape}")
        object.__setattr__(self, "values", v)
        v.setflags(write=False)

    def _check(self, other):
        if isinstance(other, BoundaryFunction):
            if other.domain is not self.domain and not (
                    other.domain.grid_signature() == self.domain.grid_signature()
                    and np.array_equal(other.domain.nodes, self.domain.nodes)):
                raise GridMismatchError("boundary functions live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return BoundaryFunction(self.domain, self.values + self._check(other))

    __radd__ = __add__

    def __sub__(self, other):
        return BoundaryFunction(self.domain, self.values - self._check(other))

    def __rsub__(self, other):
        return BoundaryFunction(self.domain, self._check(other) - self.values)

    def __mul__(self, other):
        return BoundaryFunction(self.domain, self.values * self._check(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return BoundaryFunction(self.domain, self.values / self._check(other))

    def __neg__(self):
        return BoundaryFunction(self.domain, -self.values)

    def conj(self):
        return BoundaryFunction(self.domain, np.conj(self.values))

    def restrict(self, k):
        return self.domain.restrict(self.values, k)


def contour_integral(u, against="dz", path="boundary"):
    """Trapezoidal contour integral of a BoundaryFunction.

    against: 'dz' or 'ds'.  path: 'boundary' for the full positively
    oriented boundary, or a curve index.
    """
    dom = u.domain
    if against == "dz":
        dens = dom.dz_dt
        dt = np.concatenate([np.full(c.n_samples, TWO_PI / c.n_samples)
                             for c in dom.curves])
        weights = dens * dt
    elif against == "ds":
        weights = dom.ds
    else:
        raise ValueError(f"against must be 'dz' or 'ds', got {against!r}")
    if path == "boundary":
        return complex(np.sum(u.values * weights))
    sl = dom.slices[path]
    return complex(np.sum(u.values[sl] * weights[sl]))


def spectral_derivative(domain, values):
    """d/dt of boundary samples, curve by curve, via FFT."""
    values = values.values if isinstance(values, BoundaryFunction) else values
    out = np.empty_like(values, dtype=complex)
    for sl, c in zip(domain.slices, domain.curves):
        n = c.n_samples
        k = np.fft.fftfreq(n, 1.0 / n)
        out[sl] = np.fft.ifft(np.fft.fft(values[sl]) * (1j * k))
    return out


def spectral_antiderivative(domain, values, mean_tol=None):
    """Antiderivative in t of boundary samples, curve by curve.

    The mean of each curve's data (the dt-period) must vanish; it is checked
    against mean_tol when given and dropped.  Returns (antiderivative,
    per-curve mean magnitudes).
    """
    values = values.values if isinstance(values, BoundaryFunction) else values
    out = np.empty_like(values, dtype=complex)
    means = []
    for sl, c in zip(domain.slices, domain.curves):
        n = c.n_samples
        k = np.fft.fftfreq(n, 1.0 / n)
        coef = np.fft.fft(values[sl]) / n
        means.append(abs(coef[0]) * TWO_PI)
        ik = 1j * k
        ik[0] = 1.0
        coef = coef / ik
        coef[0] = 0.0
        out[sl] = np.fft.ifft(coef * n)
    means = np.asarray(means)
    if mean_tol is not None and np.any(means > mean_tol):
        raise GeometryError(
            f"antiderivative period {means.max():.3e} exceeds {mean_tol:.3e}")
    return out, means


def fit_trig_curve(samples, max_degree=None, n_samples=None):
    """Refit uniform samples of a closed analytic curve as a Curve.

    Coefficients come from the FFT; frequencies above max_degree (default
    n/4, the largest degree make_curve accepts) are discarded, which is safe
    when the spectrum has decayed there.
    """
    z = np.asarray(samples, dtype=complex)
    n = len(z)
    _require_power_of_two(n)
    if max_degree is None:
        max_degree = n // 4
    max_degree = min(max_degree, n // 2 - 1)
    coef = np.fft.fft(z) / n
    k = np.fft.fftfreq(n, 1.0 / n).astype(int)
    c = np.zeros(2 * max_degree + 1, dtype=complex)
    for idx, freq in enumerate(k):
        if abs(freq) <= max_degree:
            c[freq + max_degree] += coef[idx]
    return make_curve(c, n_samples or n)


# ---------------------------------------------------------------------------
# Cut arcs


@dataclass(frozen=True, eq=False)
class CutArc:
    """Open arc from a point on a hole curve to a point on the outer curve,
    sampled with a composite Gauss-Legendre rule in a parameter s in [0,1]."""

    nodes: np.ndarray
    derivatives: np.ndarray
    weights: np.ndarray
    start: complex
    end: complex
    start_anchor: tuple  # (curve index, parameter t)
    end_anchor: tuple

    def __post_init__(self):
        for a in (self.nodes, self.derivatives, self.weights):
            a.setflags(write=False)

    def integrate(self, values, against="dz"):
        if against == "dz":
            return complex(np.sum(values * self.derivatives * self.weights))
        if against == "ds":
            return complex(np.sum(values * np.abs(self.derivatives) * self.weights))
        raise ValueError(f"against must be 'dz' or 'ds', got {against!r}")

    @property
    def length(self):
        return float(np.sum(np.abs(self.derivatives) * self.weights))


@dataclass(frozen=True, eq=False)
class CutSystem:
    """One disjoint cut per hole, turning the domain into a simply
    connected one."""

    domain: Domain
    cuts: tuple

    @property
    def p(self):
        return len(self.cuts)

    def clearance_from(self, points):
        pts = np.atleast_1d(np.asarray(points, dtype=complex))
        all_nodes = np.concatenate([c.nodes for c in self.cuts])
        return np.min(np.abs(pts[:, None] - all_nodes[None, :]), axis=1)


def _composite_gauss(panels, nodes_per_panel):
    x, w = np.polynomial.legendre.leggauss(nodes_per_panel)
    s, ws = [], []
    for i in range(panels):
        a, b = i / panels, (i + 1) / panels
        s.append((x + 1) * (b - a) / 2 + a)
        ws.append(w * (b - a) / 2)
    return np.concatenate(s), np.concatenate(ws)


def _segment_point_distance(p, a, b):
    d = b - a
    t = np.clip(((p - a) * np.conj(d)).real / abs(d) ** 2, 0.0, 1.0)
    return np.abs(p - (a + t * d))


def _segment_clearance(a, b, obstacles):
    """Minimum distance from obstacle points to the open segment interior."""
    s = np.linspace(0.02, 0.98, 97)
    pts = a + s * (b - a)
    return float(np.min(np.abs(pts[:, None] - obstacles[None, :])))


def make_cuts(domain, anchors=None, panels=6, nodes_per_panel=12,
              min_clearance=None):
    """Build straight cuts from each hole boundary to the outer boundary.

    The default cut for hole j joins the nearest grid pair between curve j
    and the outer curve; if the segment passes too close to another hole or
    an earlier cut, alternative anchor pairs are scanned.  anchors, when
    given, is a list of (t_hole, t_outer) parameter pairs overriding the
    search.  min_clearance defaults to 2% of the domain diameter.
    """
    p = domain.connectivity - 1
    if p == 0:
        raise GeometryError("cuts require a multiply connected domain")
    if min_clearance is None:
        min_clearance = 0.02 * domain.diameter
    outer = domain.curves[0]
    s_nodes, s_weights = _composite_gauss(panels, nodes_per_panel)
    cuts = []
    taken = []  # endpoint segments of accepted cuts
    for j in range(1, p + 1):
        hole = domain.curves[j]
        if anchors is not None:
            t_h, t_o = anchors[j - 1]
            candidates = [(float(t_h), float(t_o))]
        else:
            d = np.abs(hole.samples[:, None] - outer.samples[None, :])
            # break near-ties toward the lowest parameter pair
            near = np.argwhere(d <= d.min() * (1 + 1e-9))
            ih, io = near[0]
            candidates = [(hole.t[ih], outer.t[io])]
            # fallback anchor sweep in case the nearest pair is blocked
            step = max(1, hole.n_samples // 32)
            for ih2 in range(0, hole.n_samples, step):
                io2 = int(np.argmin(np.abs(hole.samples[ih2] - outer.samples)))
                candidates.append((hole.t[ih2], outer.t[io2]))
        obstacles = np.concatenate(
            [domain.curves[k].samples for k in range(1, p + 1) if k != j]
            or [np.empty(0, dtype=complex)])
        chosen = None
        best = (-np.inf, None)
        for t_h, t_o in candidates:
            a = complex(hole.evaluate(t_h))
            b = complex(outer.evaluate(t_o))
            clear = np.inf
            if len(obstacles):
                clear = _segment_clearance(a, b, obstacles)
            for (pa, pb) in taken:
                if segments_intersect(np.array([a]), np.array([b]),
                                      np.array([pa]), np.array([pb]))[0]:
                    clear = -np.inf
                clear = min(clear, _segment_point_distance(
                    0.5 * (pa + pb), a, b) * 2)
            if clear > best[0]:
                best = (clear, (t_h, t_o, a, b))
            if clear >= min_clearance:
                chosen = (t_h, t_o, a, b)
                break
        if chosen is None:
            if anchors is not None or best[0] <= 0:
                raise GeometryError(
                    f"cut {j} intersects another hole or cut "
                    f"(clearance {best[0]:.3e} < {min_clearance:.3e})")
            chosen = best[1]
        t_h, t_o, a, b = chosen
        nodes = a + s_nodes * (b - a)
        derivs = np.full_like(nodes, b - a)
        cuts.append(CutArc(nodes=nodes, derivatives=derivs, weights=s_weights,
                           start=a, end=b, start_anchor=(j, float(t_h)),
                           end_anchor=(0, float(t_o))))
        taken.append((a, b))
    for i in range(len(cuts)):
        for k in range(i + 1, len(cuts)):
            if polylines_intersect(np.array([cuts[i].start, cuts[i].end]),
                                   np.array([cuts[k].start, cuts[k].end])):
                raise GeometryError(f"cuts {i} and {k} intersect")
    return CutSystem(domain=domain, cuts=tuple(cuts))


# ---------------------------------------------------------------------------
# Stock domains and JSON round trip


def disc_domain(radius=1.0, center=0.0, n=256):
    c = np.zeros(3, dtype=complex)
    c[2] = radius
    c[1] = center
    return validate_domain([make_curve(c, n)])


def ellipse_domain(a=2.0, b=1.0, n=256, center=0.0):
    # a*cos t + i b*sin t = ((a+b)/2) e^{it} + ((a-b)/2) e^{-it}
    c = np.zeros(3, dtype=complex)
    c[2] = (a + b) / 2
    c[0] = (a - b) / 2
    c[1] = center
    return validate_domain([make_curve(c, n)])


def annulus_domain(rho=0.4, n=256, n_inner=None):
    outer = np.zeros(3, dtype=complex)
    outer[2] = 1.0
    inner = np.zeros(3, dtype=complex)
    inner[0] = rho  # frequency -1: clockwise circle
    return validate_domain(
        [make_curve(outer, n), make_curve(inner, n_inner or n)],
        hole_points=[0.0])


def domain_to_dict(domain):
    return {
        "curves": [
            {"coeffs": [[float(c.real), float(c.imag)] for c in curve.coeffs],
             "n_samples": int(curve.n_samples)}
            for curve in domain.curves
        ],
        "hole_points": [[float(z.real), float(z.imag)]
                        for z in domain.hole_points],
    }


def domain_from_dict(data):
    try:
        curves = [make_curve([complex(re, im) for re, im in spec["coeffs"]],
                             int(spec["n_samples"]))
                  for spec in data["curves"]]
        holes = [complex(re, im) for re, im in data.get("hole_points", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise GeometryError(f"malformed domain spec: {exc}") from exc
    return validate_domain(curves, holes)


def save_domain(domain, path):
    with open(path, "w") as fh:
        json.dump(domain_to_dict(domain), fh, indent=2)


def load_domain(path):
    with open(path) as fh:
        data = json.load(fh)
    return domain_from_dict(data)

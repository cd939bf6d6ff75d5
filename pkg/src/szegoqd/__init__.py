"""Szego-coordinate construction and certification of quadrature domains."""

from .errors import (BuildError, GeometryError, GridMismatchError, InputError,
                     QdError, SolverError)
from .geometry import (BoundaryFunction, CutSystem, Curve, Domain,
                       annulus_domain, contour_integral, disc_domain,
                       ellipse_domain, load_domain, make_curve, make_cuts,
                       save_domain, tangent_frame, validate_domain)

__all__ = [
    "BoundaryFunction", "BuildError", "CutSystem", "Curve", "Domain",
    "GeometryError", "GridMismatchError", "InputError", "QdError",
    "SolverError", "annulus_domain", "contour_integral", "disc_domain",
    "ellipse_domain", "load_domain", "make_curve", "make_cuts",
    "save_domain", "tangent_frame", "validate_domain",
]

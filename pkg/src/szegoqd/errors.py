"""Exception hierarchy shared across the package."""


class QdError(Exception):
    """Base class for all package errors."""


class GeometryError(QdError):
    """Invalid curve or domain data: degenerate parametrization,
    self-intersection, wrong orientation or nesting."""


class GridMismatchError(QdError):
    """Boundary data combined across different grids."""


class SolverError(QdError):
    """Kernel solver failure: singular discretization, base point too
    close to the boundary, evaluation clearance violated."""


class BuildError(QdError):
    """Map construction failure: infeasible fit, Newton divergence,
    univalence certificate not satisfied."""


class InputError(QdError):
    """Malformed input file or configuration."""

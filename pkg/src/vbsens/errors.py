"""Exception hierarchy shared by every module."""


class VbsensError(Exception):
    """Base class for all package errors."""


class DomainError(VbsensError, ValueError):
    """A function was evaluated outside the region where it is finite."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class LayoutError(VbsensError, ValueError):
    """Vector lengths or parameter layouts do not line up."""


class ConsistencyError(VbsensError):
    """A numerical self-check (symmetry, PSD-ness, structure) failed."""


class NotPositiveDefiniteError(VbsensError, ValueError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class NegativeCurvature(VbsensError):
    """Conjugate gradients found a direction with d'Hd <= 0."""

    def __init__(self, direction, curvature):
        super().__init__(f"negative curvature {curvature:.3e} along search direction")
        self.direction = direction
        self.curvature = curvature


class NonConvergenceError(VbsensError):
    """An iterative method ran out of iterations."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegenerateError(VbsensError):
    """An optimum is not strict, or a normalization divides by zero."""


class DataError(VbsensError, ValueError):
    """Malformed model data (e.g. a group index out of range)."""


class ConfigError(VbsensError, ValueError):
    """Invalid experiment configuration."""


class UnsupportedQueryError(VbsensError, ValueError):
    """A query function selector is not available for this family."""


class MixingError(VbsensError):
    """An MCMC chain accepted no proposals after warmup."""

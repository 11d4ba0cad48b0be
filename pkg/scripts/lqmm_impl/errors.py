"""Exception hierarchy for the lqmm implementation package."""


class LqmmError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(LqmmError, ValueError):
    """Invalid inputs, dimension mismatches and precondition violations."""


class CovarianceError(ValidationError):
    """A matrix is not positive definite or does not fit the structure."""


class QuadratureError(LqmmError, ArithmeticError):
    """Quadrature order out of range, grid too large or non-finite integral."""


class EstimationError(LqmmError):
    """Estimation cannot proceed (rank-deficient design, no usable replicate)."""


class ReportError(LqmmError, OSError):
    """A report cannot be written to the requested location."""

"""
Exception types for ivmqr.

Argument errors also subclass ValueError so callers that catch ValueError keep working.
"""


class IvmqrError(Exception):
    """Base class for every error raised by ivmqr."""


class InvalidResolutionError(IvmqrError, ValueError):
    """Quadrature resolution below 2."""


class UnsupportedDomainError(IvmqrError, ValueError):
    """Domain/measure combination without a quadrature rule (ball with p >= 3)."""


class DomainViolationError(IvmqrError, ValueError):
    """Point outside the reference domain U."""


class InvalidCycleError(IvmqrError, ValueError):
    """Cycle whose first and last points differ, or with fewer than two points."""


class NoPreimageError(IvmqrError, ValueError):
    """Point outside the image of a quantile map."""


class SizeMismatchError(IvmqrError, ValueError):
    """Source and target samples of different sizes."""


class InvalidModelError(IvmqrError, ValueError):
    """Structural model violating its invariants (non-SPD matrix, map outside the eigenvalue box)."""


class UnsupportedCouplingError(IvmqrError):
    """Rank coupling for which the conditional law of U given (D, Z) is not computable."""


class InsufficientDataError(IvmqrError, ValueError):
    """Too few observations in a (D, Z) cell."""


class InvalidBandwidthError(IvmqrError, ValueError):
    """Non-positive kernel bandwidth."""


class DimensionError(IvmqrError, ValueError):
    """Operation called for an outcome dimension it does not support."""


class InvalidBError(IvmqrError, ValueError):
    """Weighting matrix b of the wrong shape."""


class SingularMatrixError(IvmqrError, ValueError):
    """Matrix that must be invertible is singular."""


class NoDirectionsError(IvmqrError, ValueError):
    """Probe called without tangent directions."""


class InvalidStartError(IvmqrError, ValueError):
    """Fit started outside the admissible eigenvalue box."""


class ConfigError(IvmqrError, ValueError):
    """Malformed experiment config. `line` is the 1-based source line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class BoundaryDerivativeWarning(UserWarning):
    """Derivative evaluated on the boundary of U (one-sided value)."""

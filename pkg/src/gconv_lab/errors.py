"""Exception hierarchy shared across the package."""


class GConvLabError(Exception):
    """Base class for all library errors."""


class DimensionError(GConvLabError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(GConvLabError, ValueError):
    """A documented precondition was violated."""


class NonFiniteError(GConvLabError, FloatingPointError):
    """A NaN or Inf appeared in a recorded intermediate."""


class NormalizationError(GConvLabError, ValueError):
    """Spectral normalization received an all-zero matrix."""


class TrainingError(GConvLabError, RuntimeError):
    """Training diverged or produced an invalid gradient."""


class AuditError(GConvLabError, RuntimeError):
    """A model failed its shape or parameter audit."""

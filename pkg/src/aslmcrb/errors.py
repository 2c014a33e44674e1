"""Exception types shared across the package."""


class AslMcrbError(Exception):
    """Base class for all package-specific errors."""


class KinkProximity(AslMcrbError):
    """A sample time coincides with a kink of the kinetic curve (t = att or
    t = att + tau), where the derivative is undefined."""


class InsufficientSamples(AslMcrbError):
    """Too few background samples for a stable noise estimate."""


class SingularNormalEquations(AslMcrbError):
    """Gauss-Newton normal equations were numerically singular and the
    gradient fallback also stalled."""


class NotNegativeDefinite(AslMcrbError):
    """Empirical expected-Hessian estimate has a non-negative eigenvalue."""


class SingularInformation(AslMcrbError):
    """Fisher information matrix is numerically singular."""


class NotPositiveDefinite(AslMcrbError):
    """Matrix required to be symmetric positive definite is not."""


class DegenerateEigen(AslMcrbError):
    """Eigenvalue ratio below the representable floor."""


class IoFailure(AslMcrbError):
    """Filesystem write/read failure, with path context."""


class FormatError(AslMcrbError):
    """Dataset container violates the documented format; names the field."""


class SizeMismatch(AslMcrbError):
    """Raw blob size disagrees with the manifest dimensions."""


class VersionUnsupported(AslMcrbError):
    """Unknown dataset container format_version."""


class ColumnMissing(AslMcrbError):
    """Requested table column does not exist."""

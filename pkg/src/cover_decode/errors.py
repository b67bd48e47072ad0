"""Exception types shared across the package.

Exit-code mapping for the CLI: ValidationError -> 2, InfeasibleError -> 3.
"""


class CoverDecodeError(Exception):
    """Base class for all package errors."""


class ValidationError(CoverDecodeError):
    """Bad input: malformed files, parameter ranges, invariant violations."""


class UnsupportedOperationError(CoverDecodeError):
    """Operation not available on this object (e.g. expansion on a
    trace-backed scorer)."""


class InfeasibleError(CoverDecodeError):
    """The coverage constraint cannot be met at any feasible configuration."""

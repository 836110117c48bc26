"""Exception taxonomy shared across the package.

CLI exit codes: usage/config problems map to 1, verification failures to 2,
numeric failures to 3.
"""


class DualDiffError(Exception):
    """Base class for all package errors."""


class ShapeError(DualDiffError):
    """Operand shapes do not conform to an operation's rule."""


class NumericError(DualDiffError):
    """Non-finite values or numerically invalid state."""


class RangeError(DualDiffError):
    """Scalar argument outside its documented domain (e.g. t outside [0,1])."""


class DistributionError(DualDiffError):
    """A probability vector violates its contract (normalization, support)."""


class ConfigError(DualDiffError):
    """Invalid configuration: unknown keys, divisibility violations, hash mismatch."""


class VocabError(DualDiffError):
    """Out-of-vocabulary word or token id."""


class CheckFailure(DualDiffError):
    """A verification check did not pass."""

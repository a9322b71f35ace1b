"""Exception types shared across the package.

The split matters for the CLI, which maps usage problems, bad configs and
runtime/numerical failures to distinct exit codes.
"""


class SparseflowError(Exception):
    """Base class for all package errors."""


class ShapeError(SparseflowError, ValueError):
    """Operand shapes are incompatible."""


class LengthError(SparseflowError, ValueError):
    """A sequence length violates an operation's contract."""


class DomainError(SparseflowError, ValueError):
    """An argument lies outside the documented domain."""


class VocabError(SparseflowError, ValueError):
    """A token id is outside the task vocabulary."""


class ConfigError(SparseflowError, ValueError):
    """A configuration value or combination is invalid."""


class StateError(SparseflowError, RuntimeError):
    """An object is used before reaching the required state."""


class NumericsError(SparseflowError, ArithmeticError):
    """A computation produced non-finite values."""

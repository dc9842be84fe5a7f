"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data/validation
problems exit 2, numerical failures exit 3.
"""


class DualTsstError(Exception):
    """Base class for package errors."""


class UsageError(DualTsstError):
    """Bad command-line invocation."""


class DataError(DualTsstError):
    """Invalid dataset, manifest, configuration, or geometry."""


class NumericalError(DualTsstError):
    """Non-finite values or a failed gradient check."""

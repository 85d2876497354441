"""Exception hierarchy shared by all modules.

Each class maps to one CLI exit code so command-line failures are
distinguishable by category: configuration (2), data (3),
incompatibility (4), internal (5).
"""


class DrunetError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 5


class ConfigurationError(DrunetError):
    """Invalid shapes, dimensions, config keys or hyperparameters."""

    exit_code = 2


class DataError(DrunetError):
    """Bad input data: unreadable files, label range violations, mismatched sets."""

    exit_code = 3


class IncompatibilityError(DrunetError):
    """Checkpoint and dataset (or reports under comparison) do not fit together."""

    exit_code = 4


class InternalError(DrunetError):
    """Invariant breakage inside the package itself, e.g. a missing gradient."""

    exit_code = 5

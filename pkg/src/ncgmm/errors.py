"""Exception hierarchy shared across the package.

The CLI maps these onto its exit codes: ``ConfigError`` and ``ShapeError``
are user errors (2), ``DataFileError`` is an IO problem (3) and
``NumericalError`` is a numerical abort (4).
"""


class NcgmmError(Exception):
    """Base class for all package errors."""


class ShapeError(NcgmmError, ValueError):
    """Operand dimensions do not line up."""


class ConfigError(NcgmmError, ValueError):
    """Invalid configuration value; message starts with the key path."""


class NumericalError(NcgmmError, ArithmeticError):
    """Non-finite loss, gradient or parameter encountered."""


class DataFileError(NcgmmError, IOError):
    """A dataset, checkpoint or trajectory file could not be parsed."""


class CorruptFileError(DataFileError):
    pass


class VersionMismatchError(DataFileError):
    pass


class CheckpointShapeError(DataFileError, ShapeError):
    """Checkpoint layer table differs from what the caller expects."""

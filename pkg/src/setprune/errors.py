"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes (see cli.EXIT_CODES), so new
error types should subclass one of the three branches below rather than
raising bare ValueError.
"""


class SetpruneError(Exception):
    """Base class for all package errors."""


class ParameterError(SetpruneError):
    """Invalid configuration or argument (bad k, bad strategy, bad spec)."""


class DataError(SetpruneError):
    """Dataset-level problem: empty dataset, inconsistent dimensions."""


class FormatError(DataError):
    """Malformed file content (OFF, PSET, checkpoint, instance files)."""


class GeometryError(DataError):
    """Degenerate geometry, e.g. a mesh with zero total surface area."""


class UnknownIdError(DataError):
    """An element id that is not part of the point set."""


class NumericError(SetpruneError):
    """Numeric contract violation."""


class DimensionError(NumericError):
    """Shapes do not conform for the requested operation."""


class EmptySetError(NumericError):
    """An operation that requires at least one element got none."""

"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: :class:`CoverageError` exits 3, every
other :class:`ToolkitError` exits 2.
"""


class ToolkitError(Exception):
    pass


class AnnotationFormatError(ToolkitError, ValueError):
    """Header or column layout of an annotation/prediction file is wrong."""


class AnnotationValueError(ToolkitError, ValueError):
    """A cell holds a value outside its domain (e.g. a tool bit of 2)."""


class OrderingError(ToolkitError, ValueError):
    """Frame indices within one video are not strictly increasing."""


class ConfigurationError(ToolkitError, ValueError):
    pass


class JoinError(ToolkitError, ValueError):
    """Phase label references a frame with no tool record."""


class EmptyInputError(ToolkitError, ValueError):
    pass


class UnknownVideoError(ToolkitError, LookupError):
    pass


class ShapeError(ToolkitError, ValueError):
    pass


class WeightsLoadError(ToolkitError):
    def __init__(self, message, mismatched=()):
        super().__init__(message)
        self.mismatched = list(mismatched)


class TrainingDivergedError(ToolkitError, FloatingPointError):
    pass


class UndefinedMetricError(ToolkitError, ValueError):
    """Precision/recall requested for a tool with no positive frames."""


class ArityError(ToolkitError, ValueError):
    pass


class CoverageError(ToolkitError):
    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)

"""Exception hierarchy shared by all modules."""


class RespFocusError(Exception):
    """Base class for every error raised by this package."""


class OutOfRangeError(RespFocusError, ValueError):
    pass


class GeometryError(RespFocusError, ValueError):
    """Degenerate geometry, e.g. a zero-length line of sight."""


class CoverageError(RespFocusError, ValueError):
    """A scatterer or voxel falls outside the sampled range/angle span."""


class ConfigurationError(RespFocusError, ValueError):
    pass


class EmptySetError(RespFocusError, ValueError):
    pass


class FitError(RespFocusError, RuntimeError):
    pass


class FocusError(RespFocusError, RuntimeError):
    pass


class UndefinedMetricError(RespFocusError, ValueError):
    pass


class ShapeError(RespFocusError, ValueError):
    pass

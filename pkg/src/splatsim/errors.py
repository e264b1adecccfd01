"""Exception types raised across the package."""


class SplatSimError(Exception):
    pass


class ShapeError(SplatSimError, ValueError):
    pass


class BoundError(SplatSimError, ValueError):
    pass


class DegenerateGeometryError(SplatSimError, ValueError):
    def __init__(self, message, face_index=None):
        super().__init__(message)
        self.face_index = face_index


class TopologyError(SplatSimError, ValueError):
    pass


class NormalizationError(SplatSimError, ValueError):
    pass


class EmptyMaskError(SplatSimError, ValueError):
    pass


class NonFiniteError(SplatSimError, FloatingPointError):
    """A loss or gradient became NaN/inf. ``group`` and ``step`` locate it when known."""

    def __init__(self, message, group=None, step=None):
        super().__init__(message)
        self.group = group
        self.step = step


class StateError(SplatSimError, RuntimeError):
    pass


class DatasetError(SplatSimError, OSError):
    pass


class VersionError(DatasetError):
    pass


class ConfigError(SplatSimError, ValueError):
    pass

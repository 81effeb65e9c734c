"""
errors.py
Exception types shared by every fiberseg module.

Library code raises; main.py is the only place that turns these into
process exit codes (the `exit_code` class attribute).
"""

from __future__ import annotations


class FiberSegError(Exception):
    """Base class. Anything not more specific exits with 1."""

    exit_code = 1


class ConfigError(FiberSegError, ValueError):
    exit_code = 2


class CheckpointMismatchError(FiberSegError, ValueError):
    exit_code = 3


class UnsegmentableTileError(FiberSegError):
    """A tile has DBSCAN outliers but no cluster to grow them from."""

    exit_code = 4

    def __init__(self, message: str, origin: tuple | None = None):
        super().__init__(message)
        self.origin = origin


class GradientCheckError(FiberSegError):
    exit_code = 5


class VolumeFormatError(FiberSegError, ValueError):
    pass


class DegenerateInputError(FiberSegError, ValueError):
    pass


class PlacementError(FiberSegError):
    pass


class NonFiniteError(FiberSegError, FloatingPointError):
    pass


class TilingError(FiberSegError, ValueError):
    pass


class MetricError(FiberSegError, ValueError):
    pass

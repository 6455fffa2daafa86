"""
Error hierarchy shared by every package in the toolkit.

All exceptions derive from ReconstructionError so the CLI can map them to exit
codes in one place. Several also subclass the closest built-in so callers that
only know about ValueError or ArithmeticError keep working.
"""

from typing import Any, Dict, Optional


class ReconstructionError(Exception):
    """Root of all toolkit errors."""


class GeometryError(ReconstructionError, ValueError):
    """Invalid mesh, pose or camera."""


class NonProjectableError(GeometryError):
    """A point sits at or behind the camera plane."""


class OutOfRangeError(ReconstructionError, ValueError):
    """A UV coordinate lies outside the unit square."""


class DimensionError(ReconstructionError, ValueError):
    """Array or coefficient lengths do not match."""


class ParameterError(ReconstructionError, ValueError):
    """A generator or scene parameter is out of its valid range."""


class FittingDegenerateError(ReconstructionError):
    """The face mask of a view is empty, so the photo term is undefined."""


class MetricError(ReconstructionError, ValueError):
    """An evaluation mask is empty."""


class ConfigError(ReconstructionError, ValueError):
    """Unknown or invalid configuration keys."""


class FormatError(ReconstructionError, ValueError):
    """A file does not follow its documented format."""


class SolverError(ReconstructionError, ArithmeticError):
    """
    A solver hit a non-finite residual, gradient or energy.

    The `diagnostics` mapping carries whatever the solver had at hand when it
    gave up (iterate, cost history, offending block) so callers can dump it.
    """

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

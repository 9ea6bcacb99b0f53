"""Exception types shared across the package.

The CLI maps these onto distinct exit codes (see cli.py), so library code
should raise the most specific type that applies.
"""


class OccMocapError(Exception):
    """Base class for all package errors."""


class ConfigError(OccMocapError, ValueError):
    """Invalid configuration value or inconsistent config combination."""


class ShapeMismatchError(OccMocapError, ValueError):
    """Array arguments whose shapes do not agree with each other or the config."""


class InvalidBboxError(OccMocapError, ValueError):
    """Bounding box with non-positive scale."""


class SingularRotationError(OccMocapError, ValueError):
    """Rotation input that is degenerate or not orthonormal within tolerance."""


class DataError(OccMocapError, ValueError):
    """Missing, empty, or malformed data (datasets, samples, batches)."""


class DetectionParseError(DataError):
    """Malformed detection file; message carries line/frame context."""


class ProjectionError(OccMocapError, ValueError):
    """Perspective projection of a point at or behind the camera plane."""


class TranslationSolveError(OccMocapError, RuntimeError):
    """Translation fit is unsolvable (e.g. no confident joints anywhere)."""


class NumericalError(OccMocapError, RuntimeError):
    """Non-finite values or a diverged numerical procedure."""

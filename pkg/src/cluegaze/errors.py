"""Exception types shared across the package.

Grouped here so the CLI can map error families onto exit codes without
importing every module.
"""


class CluegazeError(Exception):
    """Base class for all package errors."""


class ConfigError(CluegazeError):
    """Invalid or inconsistent configuration."""


class InvalidBoxError(CluegazeError):
    """Box with nonpositive width/height or otherwise unusable geometry."""


class DegenerateGazeError(CluegazeError):
    """Gaze vector with (near-)zero norm."""


class InvalidAnnotationError(CluegazeError):
    """Ground-truth annotation that cannot be consumed (e.g. degenerate box)."""


class SchemaError(CluegazeError):
    """Manifest or prediction file does not match the documented schema."""


class MissingFrameError(CluegazeError):
    """Manifest references a frame file that does not exist."""


class CoverageError(CluegazeError):
    """Prediction file does not cover every annotated frame."""


class InternalConsistencyError(CluegazeError):
    """Mismatched shapes/lengths between values that must agree."""


class TrainingAbortError(CluegazeError):
    """Training stopped because the loss became non-finite."""

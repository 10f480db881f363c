"""
Exception hierarchy shared by the simulation, fusion and mapping services.
"""
from typing import List, Optional


class TerraFusionError(Exception):
    """Base class for every error raised by the toolkit."""


class InvalidArgumentError(TerraFusionError, ValueError):
    """An argument is outside the domain accepted by an operation."""


class UnsupportedRegionError(InvalidArgumentError):
    """Coordinates fall outside the region handled by the UTM projection."""


class FrameMismatchError(InvalidArgumentError):
    """A point is expressed in a different UTM zone than the transform."""


class GimbalSingularityError(InvalidArgumentError):
    """Pitch is too close to ±90° for the Euler-rate mapping."""


class OutOfMapError(InvalidArgumentError):
    """A position lies outside the grid map bounds."""


class StreamOrderError(InvalidArgumentError):
    """Sensor readings are not ordered by timestamp."""


class EvaluationError(InvalidArgumentError):
    """Estimated and reference trajectories cannot be compared."""


class CovarianceDegenerateError(TerraFusionError, ArithmeticError):
    """A covariance matrix has no Cholesky factor even after jitter."""


class FormatError(TerraFusionError, ValueError):
    """A binary stream could not be parsed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MapFormatError(FormatError):
    """Malformed grid map stream."""


class RecordingFormatError(FormatError):
    """Malformed sensor recording stream."""


class IncompatibleRecordingError(RecordingFormatError):
    """Recording header carries an unsupported format version."""


class ScenarioValidationError(TerraFusionError, ValueError):
    """Scenario configuration failed validation.

    Attributes:
        violations: One human readable entry per problem, prefixed with the
            dotted config path it was found at.
    """

    def __init__(self, violations: List[str], source: Optional[str] = None):
        header = f"Invalid scenario config {source}" if source else "Invalid scenario config"
        super().__init__(header + ":\n" + "\n".join(f"  - {v}" for v in violations))
        self.violations = violations


class PartialArtifactError(TerraFusionError, RuntimeError):
    """Some work items failed; completed items are listed."""

    def __init__(self, message: str, completed: List[str], failed: List[str]):
        super().__init__(
            f"{message}; completed: {', '.join(completed) or 'none'}; "
            f"failed: {', '.join(failed) or 'none'}"
        )
        self.completed = completed
        self.failed = failed

"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Operands live on different grids or have inconsistent shapes."""


class DataIntegrityError(ValueError):
    """Array data violates a basic invariant (NaN/Inf, wrong support)."""


class DegenerateDataError(ValueError):
    """Input data carries no usable signal (zero variance, empty mask)."""


class ConvergenceError(RuntimeError):
    """Iterative solver diverged.  Carries the last iterate when available."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class ConfigError(ValueError):
    """Pipeline configuration could not be parsed or validated."""


class ArtifactError(RuntimeError):
    """A persisted artifact is missing, truncated, or inconsistent."""


class DependencyError(ArtifactError):
    """A pipeline stage ran before the artifacts it consumes exist."""


class ChecksumError(ArtifactError):
    """Artifact payload does not match its recorded checksum."""

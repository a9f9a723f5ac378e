"""Exception hierarchy shared by all stages."""


class StagedGPError(Exception):
    """Base class for every error raised by this package."""


class ArgumentError(StagedGPError, ValueError):
    """Invalid argument: wrong shape, out-of-range value, non-finite entry."""


class DegenerateDataError(StagedGPError, ValueError):
    """Data that cannot support the requested computation (e.g. zero variance)."""


class UnsupportedDimensionError(ArgumentError):
    pass


class NumericalError(StagedGPError, ArithmeticError):
    """A numerical procedure failed (singular matrix, non-convergence, no bracket).

    ``diagnostics`` carries whatever the failing routine knew at the time.
    """

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class IdentifiabilityError(StagedGPError, ValueError):
    """Too few points for the requested regression basis."""


class StageError(StagedGPError):
    """Failure inside one stage of the pipeline, tagged with the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class InputError(StagedGPError, ValueError):
    """Malformed user input file (CSV row, dimension mismatch)."""


class ConfigError(StagedGPError, ValueError):
    """Configuration that violates the schema; ``key_path`` locates the offender."""

    def __init__(self, message, key_path=""):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path


class ArtifactError(StagedGPError, ValueError):
    """Unreadable or incompatible serialized pipeline."""

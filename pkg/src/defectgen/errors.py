"""Exception types shared across the package."""


class DefectGenError(Exception):
    """Base class for all package errors."""


class ParameterError(DefectGenError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(DefectGenError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class DataError(DefectGenError, ValueError):
    """A dataset or pool is empty or otherwise unusable."""


class ConfigError(DefectGenError, ValueError):
    """Configuration values are inconsistent or refer to missing objects."""


class InitializationError(DefectGenError, RuntimeError):
    """An embedding or model could not be initialized."""


class TrainingError(DefectGenError, RuntimeError):
    """Training diverged or could not proceed.

    ``last_state`` optionally carries the last finite state (e.g. the most
    recent finite embedding vector) so callers can inspect or salvage it.
    """

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class SamplingError(DefectGenError, RuntimeError):
    """Rejection sampling exhausted its attempt budget."""


class MetricUndefinedError(DefectGenError, ValueError):
    """A metric is undefined for the given labels (e.g. single class)."""


class LayoutError(DefectGenError, ValueError):
    """A dataset directory failed validation.

    ``problems`` lists every validation failure found, not just the first.
    """

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems or [])


class StageError(DefectGenError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it for diagnostics."""

    def __init__(self, stage, message):
        super().__init__(f"[stage:{stage}] {message}")
        self.stage = stage

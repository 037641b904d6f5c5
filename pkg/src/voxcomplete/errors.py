"""Exception hierarchy shared across the package."""


class VoxError(Exception):
    """Base class for all package-specific errors."""


class FormatError(VoxError):
    """File does not look like the expected format (bad magic, bad version)."""


class CorruptionError(VoxError):
    """File has the right header but the payload is truncated or inconsistent."""


class ShapeError(VoxError):
    """Operands disagree on resolution or tensor shape."""


class ConfigError(VoxError):
    """Invalid configuration value or unsatisfiable request."""


class DomainError(VoxError):
    """Input outside the mathematical domain of the operation."""


class TrainingDiverged(VoxError):
    """Loss became non-finite; carries the step and batch that triggered it."""

    def __init__(self, step, object_ids, message="non-finite loss"):
        self.step = step
        self.object_ids = list(object_ids)
        super().__init__(f"{message} at step {step} (batch objects: {self.object_ids})")

"""Exception types shared across the pipeline."""


class DimensionError(ValueError):
    """Tensor shapes do not line up for an operation."""


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class ConfigError(ValueError):
    """Invalid configuration value or missing input."""


class ModelError(RuntimeError):
    """A model produced non-finite output."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss or gradient)."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause

"""Error taxonomy shared across the pipeline."""


class ConfigurationError(ValueError):
    """Invalid configuration values or infeasible specs."""


class ShapeError(ValueError):
    """Array shape or size constraints violated."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class CheckpointError(RuntimeError):
    """Checkpoint missing, corrupted, or from an incompatible version."""


class TrainingDiverged(RuntimeError):
    """Training aborted on a non-finite loss."""

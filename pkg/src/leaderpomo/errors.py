class ParameterError(ValueError):
    """A caller-supplied size or count is outside the supported range."""


class SizeError(ParameterError):
    pass


class FeasibilityError(ValueError):
    """An action violates the environment's feasibility mask."""


class ContractError(ValueError):
    pass


class ParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient goes non-finite.

    ``checkpoint`` holds the last good state (parameters are never updated
    with a non-finite step).
    """

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint

"""Exception hierarchy shared across invforge."""


class InvForgeError(Exception):
    """Base class for all library errors."""


class DimensionError(InvForgeError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(InvForgeError, ValueError):
    """A configuration value is out of range or unknown."""


class ContractError(InvForgeError, ValueError):
    """A call violated an operation precondition."""


class DataError(InvForgeError, ValueError):
    """Input data is malformed (bad labels, bad file contents, ...)."""


class DegenerateDataError(DataError):
    """Data carries too little variation for the requested computation."""


class TrainingDivergenceError(InvForgeError, RuntimeError):
    """A loss became non-finite during training.

    The offending :class:`~invforge.losses.LossBreakdown` is kept on
    ``breakdown`` so callers can log it.
    """

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown


class CheckpointError(InvForgeError, ValueError):
    """Checkpoint content does not match what the loader expects."""


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass

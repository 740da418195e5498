"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value (cardinalities, layer indices, ratios...)."""


class InputError(ValueError):
    """Input data violates an operation's precondition (shapes, alignment...)."""


class DegenerateBinsError(InputError):
    """Quantile binning requested more bins than there are distinct values."""


class TrainingDiverged(RuntimeError):
    """A training loop produced a non-finite loss.

    ``record`` holds the diagnostic state at the failing step.
    """

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record

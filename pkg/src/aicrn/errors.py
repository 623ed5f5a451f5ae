"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible (broadcast, inner-dimension, channel count)."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraint."""


class DegenerateStatisticsError(ValueError):
    """Batch statistics cannot be formed from the given input."""


class CorruptCheckpointError(ValueError):
    """Checkpoint bytes do not decode to a model of the expected layout."""


class IngestionError(ValueError):
    """Input ECG data cannot be turned into records."""


class TrainingError(RuntimeError):
    """Training aborted; the message carries the epoch and offending quantity."""


class R2UndefinedError(ValueError):
    """Target variance is zero so R^2 has no value; MAE and RMSE are still attached."""

    def __init__(self, mae: float, rmse: float):
        super().__init__("r2 undefined: target variance is zero")
        self.mae = mae
        self.rmse = rmse

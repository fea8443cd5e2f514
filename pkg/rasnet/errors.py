"""
Exception hierarchy for rasnet.
Every failure the library raises on purpose derives from RasnetError.
"""

from typing import Optional


class RasnetError(Exception):
    """Base class for all rasnet errors."""


class DimensionError(RasnetError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(RasnetError, ValueError):
    """A configuration value is unknown, inconsistent or out of range."""


class ContractError(RasnetError):
    """A caller broke an operation contract (e.g. backward on a non-scalar)."""


class DegenerateBatchError(RasnetError, ValueError):
    """Train-mode batch normalization was asked to normalize a single example."""


class NonFiniteError(RasnetError, FloatingPointError):
    """A forward operation produced NaN or Inf from finite inputs."""

    def __init__(self, op_name: str):
        super().__init__(f"{op_name} produced non-finite values")
        self.op_name = op_name


class CorruptDatasetError(RasnetError):
    """A dataset file does not have the byte layout it should."""

    def __init__(self, path: str, expected_bytes: int, actual_bytes: int, detail: str = ""):
        message = f"{path}: expected {expected_bytes} bytes, found {actual_bytes}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.path = path
        self.expected_bytes = expected_bytes
        self.actual_bytes = actual_bytes


class TrainingDivergedError(RasnetError):
    """Loss became NaN/Inf during training."""

    def __init__(self, epoch: int, batch: int, lr: float, loss: Optional[float] = None):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}, lr {lr}")
        self.epoch = epoch
        self.batch = batch
        self.lr = lr
        self.loss = loss


class UsageError(RasnetError):
    """Bad command line or config file. Maps to exit code 2."""

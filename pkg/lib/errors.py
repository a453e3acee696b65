"""
Exception hierarchy shared by every module of the forecaster.
"""


class DfdgcnError(Exception):
    """Base class for all errors raised by the library."""


class NumericsError(DfdgcnError):
    """Shape mismatch, non-finite kernel output, empty signal or tape misuse."""


class GraphError(DfdgcnError):
    """Invalid graph inputs: missing active graph, bad window, bad distances."""


class DataError(DfdgcnError):
    """Dataset problems: extent mismatch, too-short series, zero std."""


class ConfigError(DfdgcnError):
    """Unknown, missing or invalid configuration key."""


class CheckpointError(DfdgcnError):
    """Unreadable or incompatible checkpoint file."""


class TrainingDivergedError(DfdgcnError):
    """
    Raised when the training loss stops being finite.

    Attributes:
        params: Last parameter set that produced a finite loss
        history: Per-epoch history rows recorded before the divergence
    """

    def __init__(self, message: str, params=None, history=None):
        super().__init__(message)
        self.params = params
        self.history = history if history is not None else []

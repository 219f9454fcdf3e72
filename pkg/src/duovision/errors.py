"""Exception taxonomy shared by every module.

The CLI maps these onto its exit-code contract: usage/configuration
problems exit 2, numerical or threshold failures exit 3.
"""


class DuovisionError(Exception):
    """Base class for all library errors."""


class DimensionError(DuovisionError):
    """Operand shapes are incompatible for the requested op."""


class ConfigurationError(DuovisionError):
    """A config value is invalid (bad stride, zero steps, wrong image size...)."""


class UsageError(DuovisionError):
    """The API was called outside its contract (non-scalar backward, empty mask...)."""


class NumericalError(DuovisionError):
    """A non-finite value appeared mid-computation."""


class PretrainingError(DuovisionError):
    """Encoder pretraining finished below its quality threshold."""


class DataError(DuovisionError):
    """Input data is unusable (non-finite features, degenerate covariance...)."""


class TruncationError(DuovisionError):
    """An assembled sequence would overflow the context window."""


class CheckpointError(DuovisionError):
    """A checkpoint file is malformed or has an incompatible version."""

"""Exception types shared across the package."""


class AxNetError(Exception):
    """Base class for all package errors."""


class ShapeError(AxNetError):
    """Rejected input: dimensions do not match the network or data."""


class ConfigError(AxNetError):
    """Invalid configuration: unknown tags, inconsistent widths, bad bounds."""


class NumericalError(AxNetError):
    """Non-finite values encountered where finite ones are required."""


class TrainingDiverged(NumericalError):
    """Training aborted on a non-finite loss or gradient.

    Carries the last epoch that completed with finite values and whatever
    trace rows were recorded before the abort.
    """

    def __init__(self, message, last_stable_epoch, trace=None):
        super().__init__(message)
        self.last_stable_epoch = last_stable_epoch
        self.trace = trace if trace is not None else []

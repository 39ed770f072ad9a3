"""Exception hierarchy shared across the package."""


class PassatError(Exception):
    """Base class for all package errors."""


class ConfigError(PassatError, ValueError):
    """Invalid configuration or arguments."""


class GridError(PassatError, ValueError):
    """Grid too small, or fields living on different grids."""


class ShapeMismatchError(PassatError, ValueError):
    """Array dimensions do not match the bound grid, graph or model."""


class GraphDisconnectedError(PassatError, ValueError):
    """Pruning left some node with fewer than two nonzeros in its row."""


class NumericalError(PassatError, ArithmeticError):
    """A non-finite value appeared in a tendency, loss or parameter.

    ``field`` and ``cell`` identify the worst offender when known.
    """

    def __init__(self, message: str, field: str | None = None, cell: tuple | None = None,
                 sample: int | None = None):
        super().__init__(message)
        self.field = field
        self.cell = cell
        self.sample = sample


class DatasetError(PassatError):
    """Corrupt or inconsistent dataset, graph or checkpoint file."""


class ZeroStdError(DatasetError):
    """A variable has zero standard deviation, so it cannot be normalized."""


class UndefinedMetricError(PassatError, ArithmeticError):
    """A metric is undefined for the inputs (e.g. zero anomaly variance)."""


class NoForwardCacheError(PassatError, RuntimeError):
    """backward() was called without a cached forward pass."""

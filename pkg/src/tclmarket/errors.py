"""Exceptions raised by tclmarket."""


class TclMarketError(Exception):
    """Base class for all tclmarket errors."""


class InvalidParameters(TclMarketError, ValueError):
    """A domain type was constructed with values that violate its invariants."""


class NonConvergence(TclMarketError, RuntimeError):
    """A deadband crossing could not be bracketed inside the market period."""


class DegeneratePrefs(TclMarketError, ValueError):
    """The comfort band has zero width; the load cannot respond to price."""


class Infeasible(TclMarketError, ValueError):
    """Unresponsive demand alone exceeds the feeder capacity."""


class InfeasibleCapacity(TclMarketError, ValueError):
    """The team problem was posed with a negative energy budget."""


class NumericalBreakdown(TclMarketError, RuntimeError):
    """The innovation variance of the Kalman filter is not positive."""


class SingularPrediction(TclMarketError, RuntimeError):
    """A predicted covariance could not be inverted during smoothing."""


class RankDeficient(TclMarketError, RuntimeError):
    """The measurement log does not excite every parameter of the M-step."""


class SchemaError(TclMarketError, ValueError):
    """An input file does not follow the expected column layout."""


class DataGap(TclMarketError, ValueError):
    """A time series is missing samples the run needs."""

    def __init__(self, message: str, timestamp: object = None):
        super().__init__(message)
        self.timestamp = timestamp


class NonMonotoneWarning(RuntimeWarning):
    """EM log-likelihood decreased by more than the numerical jitter."""

"""Exception hierarchy shared by all thetaem modules."""


class ThetaEMError(Exception):
    """Base class for every error raised by the package."""


class OutOfDomain(ThetaEMError, ValueError):
    """A time offset lies outside the segment interval [-tau, 0]."""


class DimensionMismatch(ThetaEMError, ValueError):
    """Shapes of segments, measures, vectors or models do not agree."""


class GridMismatch(ThetaEMError, ValueError):
    """Two objects live on different time or evaluation grids."""


class UnequalSampleCounts(ThetaEMError, ValueError):
    """Empirical measures with different atom counts were compared."""


class SchemeError(ThetaEMError, ValueError):
    """Scheme parameters are outside the supported range."""


class MissingParams(ThetaEMError, ValueError):
    """A model lacks the assumption metadata an operation needs."""


class MissingIncrements(ThetaEMError, ValueError):
    """A trajectory was produced without retaining its Brownian increments."""


class IndexOutOfRange(ThetaEMError, IndexError):
    """A step index lies outside the simulated range."""


class EmptyWindow(ThetaEMError, ValueError):
    """An averaging window contains no samples."""


class EmptySamples(ThetaEMError, ValueError):
    """A density estimate was requested from too few samples."""


class NonNestedGrids(ThetaEMError, ValueError):
    """Step sizes used for coupled runs are not mutually nested."""


class DegenerateInput(ThetaEMError, ValueError):
    """A regression received too few or non-positive points."""


class ZeroHits(ThetaEMError, RuntimeError):
    """A Monte Carlo event was never observed at the pilot noise level."""


class ConfigInvalid(ThetaEMError, ValueError):
    """An experiment configuration failed validation.

    Parameters
    ----------
    field : str
        Dotted path of the offending field, e.g. ``"scheme.theta"``.
    message : str
        Human readable reason.
    """

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class SolverDiverged(ThetaEMError, RuntimeError):
    """The implicit Newton solve failed to reach its tolerance.

    Attributes
    ----------
    residual : float
        Last residual norm of the failing path.
    step : int or None
        Step index k of the failing transition t_k -> t_{k+1}, when known.
    path : int or None
        Position of the failing path inside the simulated batch.
    """

    def __init__(self, message, residual=float("nan"), step=None, path=None):
        super().__init__(message)
        self.residual = residual
        self.step = step
        self.path = path


class OptimizerStalled(ThetaEMError, RuntimeError):
    """The endpoint rate optimizer could not meet its endpoint tolerance.

    The best result found so far is attached as ``best``.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best

"""Exception and warning types raised across the package."""


class CalibrationError(Exception):
    """Base class for data and numerical failures."""


class DataError(CalibrationError):
    """Malformed or inconsistent input data."""


class NoReferenceData(DataError):
    """No reference value is available to condition the filter on."""


class UnderdeterminedFit(DataError):
    """Fewer training rows than model columns."""


class InsufficientExceedances(DataError):
    """Too few threshold exceedances to fit the Pareto model."""


class NumericalError(CalibrationError):
    """A numerical routine failed."""


class SingularCovariance(NumericalError):
    """Covariance matrix could not be factorized even after jitter."""


class RankDeficientDesign(NumericalError):
    """Regression design matrix does not have full column rank."""


class FitDiverged(NumericalError):
    """Likelihood became non-finite during optimization."""


class MleNotConverged(NumericalError):
    """Optimizer hit its iteration limit.

    The best point found is kept on ``best`` so callers can fall back to it.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class MleWarning(UserWarning):
    """Spatial MLE did not converge; the best point found was used."""


class MixingWarning(UserWarning):
    """Post burn-in Metropolis acceptance rate is outside (0.05, 0.95)."""

"""Spatial filtering calibration for low-cost air-pollution sensor networks."""

from .bayes_filter import (
    McmcConfig,
    PosteriorDraws,
    PriorSpec,
    grid_posterior,
    mcmc_filter_time_point,
    posterior_predictive_pvalues,
    summarize_posterior,
)
from .calib_models import (
    CovariateSchema,
    ObsModelFit,
    ParetoFit,
    RegCalFit,
    fit_inverse_regression,
    fit_obs_no_collocation,
    fit_pareto,
    fit_regression_calibration,
    invert_prediction,
    predict_pareto,
    predict_regcal,
)
from .covariance import KernelFamily, KernelSpec, condition_gaussian, empirical_variogram
from .errors import (
    CalibrationError,
    DataError,
    MixingWarning,
    MleWarning,
    NoReferenceData,
    NumericalError,
    SingularCovariance,
)
from .geo_core import NetworkLayout, PanelDataset, SiteRole, TimeSlice, build_time_slice
from .gp_filter import FilterConfig, FilterResult, SpatialParams, filter_time_point, predict_grid

__version__ = "0.1.0"

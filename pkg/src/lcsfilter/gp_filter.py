"""Frequentist spatial GP filter.

At each time point the reference values at A and C sites are treated as a
partial realization of a Gaussian process for the true concentration. The
filter

1. inverts the observation model at the B sites for initial values,
2. fits the GP mean and covariance parameters by maximum likelihood,
3. kriges the B sites from the reference sites (predict step),
4. combines that prior with the transformed low-cost readings
   ``u = y - b0 - b2'z ~ N(H x, tau2 I)`` (update step).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.stats import norm

from .calib_models import GAIN_EPS, ObsModelFit, invert_prediction
from .covariance import (
    KernelFamily,
    KernelSpec,
    cholesky_jitter,
    condition_gaussian,
    cov_from_distances,
    cov_matrix,
    distance_matrix,
)
from .errors import DataError, MleNotConverged, MleWarning, NoReferenceData
from .geo_core import TimeSlice


@dataclass(frozen=True)
class SpatialParams:
    mu: float
    kernel: KernelSpec
    fixed_phi: bool = False
    boundary: bool = False
    converged: bool = True
    loglik: float = float("nan")


@dataclass(frozen=True)
class FilterConfig:
    family: KernelFamily = KernelFamily.EXPONENTIAL
    nugget: bool = False
    phi_fixed: float | None = None
    level: float = 0.95
    # add B-site posterior uncertainty to grid variances
    grid_propagate: bool = True
    gain_eps: float = GAIN_EPS

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily.parse(self.family))
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")


@dataclass(eq=False)
class FilterResult:
    """Posterior summaries at the B sites for one time point."""

    t: int
    ids_b: tuple
    x_update: np.ndarray
    post_var: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    post_cov: np.ndarray | None = None
    prior_mean: np.ndarray | None = None
    prior_cov: np.ndarray | None = None
    params: SpatialParams | None = None
    x_init: np.ndarray | None = None
    unstable: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.post_var)


def z_quantile(level: float) -> float:
    return float(norm.ppf(0.5 + level / 2.0))


def transform_observations(fit: ObsModelFit, y_b, z_b) -> np.ndarray:
    """Offset-corrected readings ``u = y - b0 - Z b2``."""
    y_b = np.asarray(y_b, dtype=float)
    return y_b - fit.offset(np.asarray(z_b, dtype=float).reshape(len(y_b), len(fit.schema)))


# ----------------------------------------------------------------------------
# maximum likelihood for the spatial parameters


def _profiled_loglik(chol: np.ndarray, vals: np.ndarray):
    """GP log-likelihood with the constant mean replaced by its GLS estimate."""
    ones = np.ones_like(vals)
    a1 = solve_triangular(chol, ones, lower=True)
    av = solve_triangular(chol, vals, lower=True)
    mu = float(a1 @ av) / float(a1 @ a1)
    r = av - mu * a1
    n = len(vals)
    ll = -0.5 * float(r @ r) - float(np.log(np.diag(chol)).sum()) - 0.5 * n * math.log(2 * math.pi)
    return ll, mu


def mle_spatial_params(values, locs, family=KernelFamily.EXPONENTIAL, nugget_on: bool = False,
                       phi_fixed: float | None = None, raise_on_nonconvergence: bool = True) -> SpatialParams:
    """Maximum-likelihood constant mean and kernel parameters.

    The mean is profiled out in closed form; ``log sigma2``, ``log phi``
    (unless ``phi_fixed`` is given) and ``log nugget`` (when ``nugget_on``)
    are optimized by bounded Nelder-Mead. A constant field returns the
    constant as the mean with a vanishing sill and ``boundary=True``.
    """
    family = KernelFamily.parse(family)
    vals = np.asarray(values, dtype=float)
    locs = np.asarray(locs, dtype=float).reshape(-1, 2)
    if len(vals) < 3:
        raise DataError(f"spatial MLE needs at least 3 sites, got {len(vals)}")
    if not np.all(np.isfinite(vals)):
        raise DataError("non-finite values passed to spatial MLE")
    dist = distance_matrix(locs)
    off = dist[np.triu_indices(len(vals), k=1)]
    positive = off[off > 0]
    if positive.size == 0:
        raise DataError("all sites share one location")
    var = float(np.var(vals, ddof=1))
    mean = float(np.mean(vals))
    if var <= 1e-12 * max(1.0, mean * mean):
        phi = phi_fixed if phi_fixed is not None else 3.0 / float(np.median(positive))
        tiny = 1e-10 * max(1.0, mean * mean)
        return SpatialParams(mean, KernelSpec(family, tiny, phi, tiny if nugget_on else 0.0),
                             fixed_phi=phi_fixed is not None, boundary=True)

    phi0 = 3.0 / float(np.median(positive))
    names = ["log_sigma2"]
    start = [math.log(var)]
    bounds = [(math.log(var * 1e-6), math.log(var * 1e3))]
    if phi_fixed is None:
        names.append("log_phi")
        start.append(math.log(phi0))
        bounds.append((math.log(0.01 * 3.0 / positive.max()), math.log(100.0 * 3.0 / positive.min())))
    if nugget_on:
        names.append("log_nugget")
        start.append(math.log(0.1 * var))
        bounds.append((math.log(var * 1e-8), math.log(var * 10.0)))
    start = np.clip(start, [b[0] for b in bounds], [b[1] for b in bounds])

    def unpack(theta):
        p = dict(zip(names, theta))
        sigma2 = math.exp(p["log_sigma2"])
        phi = math.exp(p["log_phi"]) if "log_phi" in p else phi_fixed
        nug = math.exp(p["log_nugget"]) if "log_nugget" in p else 0.0
        return sigma2, phi, nug

    def negll(theta):
        sigma2, phi, nug = unpack(theta)
        k = cov_from_distances(KernelSpec(family, sigma2, phi, nug), dist)
        try:
            chol, _ = cholesky_jitter(k, sigma2)
        except Exception:
            return 1e300
        ll, _ = _profiled_loglik(chol, vals)
        return -ll if np.isfinite(ll) else 1e300

    dim = len(names)
    f0 = negll(start)
    res = minimize(negll, start, method="Nelder-Mead", bounds=bounds,
                   options={"maxiter": 500 * dim, "maxfev": 1000 * dim,
                            "xatol": 1e-5, "fatol": 1e-8 * max(1.0, abs(f0))})
    theta = res.x
    sigma2, phi, nug = unpack(theta)
    spec = KernelSpec(family, sigma2, phi, nug)
    chol, _ = cholesky_jitter(cov_from_distances(spec, dist), sigma2)
    ll, mu = _profiled_loglik(chol, vals)
    # a nugget pinned at its lower bound just means "no nugget"
    at_bound = any(min(v - lo, hi - v) < 1e-6 for name, v, (lo, hi) in zip(names, theta, bounds)
                   if name != "log_nugget")
    converged = bool(res.success)
    params = SpatialParams(mu, spec, fixed_phi=phi_fixed is not None, boundary=at_bound,
                           converged=converged, loglik=ll)
    if not converged and raise_on_nonconvergence:
        raise MleNotConverged(f"Nelder-Mead stopped after {res.nit} iterations", best=params)
    return params


# ----------------------------------------------------------------------------
# predict and update


def kalman_update(prior_mean, prior_cov, gains, u, tau2: float):
    """Gaussian posterior of ``x`` given ``u ~ N(diag(gains) x, tau2 I)``.

    Algebraically equal to ``(P^-1 + H^2/tau2)^-1 (P^-1 m + H u / tau2)``
    but written in gain form so a singular prior covariance is allowed.
    Returns ``(mean, cov, jitter_escalations)``.
    """
    m = np.asarray(prior_mean, dtype=float)
    p = np.asarray(prior_cov, dtype=float)
    h = np.asarray(gains, dtype=float)
    hp = h[:, None] * p
    s = hp * h[None, :]
    s[np.diag_indices_from(s)] += tau2
    chol, esc = cholesky_jitter(s, max(tau2, float(np.max(np.abs(np.diag(s)), initial=1.0))))
    w = solve_triangular(chol, hp, lower=True)
    r = solve_triangular(chol, np.asarray(u, dtype=float) - h * m, lower=True)
    mean = m + w.T @ r
    cov = p - w.T @ w
    cov = 0.5 * (cov + cov.T)
    return mean, cov, esc


def filter_time_point(fit: ObsModelFit, slc: TimeSlice, config: FilterConfig = FilterConfig(),
                      params: SpatialParams | None = None) -> FilterResult:
    """Run the frequentist filter at one time point.

    ``params`` bypasses the spatial MLE when given.
    """
    if slc.n_ac == 0:
        raise NoReferenceData(f"no reference values at t={slc.t}")
    if slc.n_b == 0:
        raise DataError(f"no low-cost readings at t={slc.t}")
    gains = fit.gain(slc.z_b)
    u = transform_observations(fit, slc.y_b, slc.z_b)
    x_init, unstable = invert_prediction(fit, slc.y_b, slc.z_b, config.gain_eps)
    diagnostics = {"n_unstable": int(unstable.sum()), "mle_converged": True}
    if params is None:
        keep = ~unstable & np.isfinite(x_init)
        vals = np.concatenate([slc.x_ac, x_init[keep]])
        locs = np.vstack([slc.locs_ac, slc.locs_b[keep]])
        try:
            params = mle_spatial_params(vals, locs, config.family, config.nugget, config.phi_fixed)
        except MleNotConverged as exc:
            warnings.warn(f"t={slc.t}: {exc}; using best point", MleWarning, stacklevel=2)
            params = exc.best
            diagnostics["mle_converged"] = False
    prior = condition_gaussian(params.kernel, params.mu, slc.locs_b, slc.locs_ac, slc.x_ac)
    mean, cov, esc = kalman_update(prior.mean, prior.cov, gains, u, fit.tau2)
    var = np.clip(np.diag(cov), 0.0, None)
    half = z_quantile(config.level) * np.sqrt(var)
    diagnostics["jitter_escalations"] = prior.jitter_escalations + esc
    return FilterResult(
        t=slc.t, ids_b=slc.ids_b, x_update=mean, post_var=var,
        lower=mean - half, upper=mean + half, post_cov=cov,
        prior_mean=prior.mean, prior_cov=prior.cov, params=params,
        x_init=x_init, unstable=unstable, diagnostics=diagnostics,
    )


def predict_grid(result: FilterResult, slc: TimeSlice, grid_locs, params: SpatialParams | None = None,
                 propagate: bool = True):
    """Kriging of grid points from reference values and filtered B values.

    Returns ``(mean, var)``. The variance is the kriging variance given all
    network sites plus, when ``propagate``, the B-site posterior covariance
    pushed through the B block of the kriging weights.
    """
    params = result.params if params is None else params
    grid_locs = np.asarray(grid_locs, dtype=float).reshape(-1, 2)
    if len(grid_locs) == 0:
        raise DataError("grid is empty")
    known = np.vstack([slc.locs_ac, slc.locs_b])
    xbar = np.concatenate([slc.x_ac, result.x_update])
    spec = params.kernel
    k_kk = cov_matrix(spec, known)
    k_dk = cov_matrix(spec, grid_locs, known)
    chol, _ = cholesky_jitter(k_kk, spec.sigma2)
    weights = cho_solve((chol, True), k_dk.T).T
    mean = params.mu + weights @ (xbar - params.mu)
    w_half = solve_triangular(chol, k_dk.T, lower=True)
    var = spec.sill - np.einsum("ij,ij->j", w_half, w_half)
    if propagate and result.post_cov is not None and slc.n_b:
        wb = weights[:, slc.n_ac:]
        var = var + np.einsum("ij,jk,ik->i", wb, result.post_cov, wb)
    return mean, np.clip(var, 0.0, None)


def pooled_phi(slices: Sequence[TimeSlice], fit: ObsModelFit, config: FilterConfig) -> float:
    """Median of per-time MLE decay parameters, for holding phi fixed."""
    phis = []
    for slc in slices:
        x_init, unstable = invert_prediction(fit, slc.y_b, slc.z_b, config.gain_eps)
        keep = ~unstable & np.isfinite(x_init)
        vals = np.concatenate([slc.x_ac, x_init[keep]])
        if len(vals) < 3:
            continue
        locs = np.vstack([slc.locs_ac, slc.locs_b[keep]])
        p = mle_spatial_params(vals, locs, config.family, config.nugget, None, raise_on_nonconvergence=False)
        if not p.boundary:
            phis.append(p.kernel.phi)
    if not phis:
        raise DataError("no time point yielded an interior decay estimate")
    return float(np.median(phis))

"""Bayesian spatial GP filter.

The true values at the B sites, the GP mean and the kernel parameters are
sampled jointly at each time point, with the observation-model coefficients
plugged in. The sampler is Metropolis-within-Gibbs:

* ``x_B | mu, theta, y`` is Gaussian (kriging prior combined with the
  transformed readings) and is drawn exactly;
* ``(mu, log sigma2, log phi, log nugget) | x`` is a random-walk Metropolis
  block on the GP likelihood over all sites, with the proposal adapted
  toward 30% acceptance during burn-in.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .calib_models import ObsModelFit, invert_prediction
from .covariance import KernelFamily, KernelSpec, cholesky_jitter, cov_from_distances, cov_matrix, distance_matrix
from .errors import DataError, FitDiverged, MixingWarning, NoReferenceData, SingularCovariance
from .geo_core import TimeSlice
from .gp_filter import FilterConfig, FilterResult, SpatialParams, kalman_update, mle_spatial_params, transform_observations

TARGET_ACCEPTANCE = 0.3
_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    """Priors on the GP mean and kernel parameters.

    ``None`` entries take data-scaled defaults at each time point:

    * ``mu ~ N(mean of reference values, mu_sd^2)``
    * ``sqrt(sigma2) ~ half-Normal(5 sd(x_init))``
    * ``phi ~ U(0.1 * 3 / maxdist, 10 * 3 / mindist)``
    * ``sqrt(nugget) ~ half-Normal(sd(x_init))``

    A ``*_fixed`` value replaces the prior by a point mass.
    """

    mu_mean: float | None = None
    mu_sd: float = 100.0
    sigma_scale: float | None = None
    phi_lo: float | None = None
    phi_hi: float | None = None
    nugget_scale: float | None = None
    mu_fixed: float | None = None
    sigma2_fixed: float | None = None
    phi_fixed: float | None = None
    nugget_fixed: float | None = None

    def __post_init__(self):
        for name in ("mu_sd", "sigma_scale", "nugget_scale", "sigma2_fixed", "phi_fixed"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        if self.nugget_fixed is not None and self.nugget_fixed < 0:
            raise ValueError("nugget_fixed must be non-negative")
        if self.phi_lo is not None and self.phi_hi is not None and not self.phi_lo < self.phi_hi:
            raise ValueError("need phi_lo < phi_hi")

    @classmethod
    def point_mass(cls, params: SpatialParams) -> "PriorSpec":
        k = params.kernel
        return cls(mu_fixed=params.mu, sigma2_fixed=k.sigma2, phi_fixed=k.phi, nugget_fixed=k.nugget)


@dataclass(frozen=True)
class McmcConfig:
    n_iter: int = 4000
    n_burn: int = 2000
    thin: int = 1
    seed: int = 0
    # initial random-walk standard deviations; mu's is in units of sd(x_init)
    step_scales: tuple = (0.2, 0.3, 0.3, 0.3)
    adapt: bool = True

    def __post_init__(self):
        if not 0 <= self.n_burn < self.n_iter:
            raise ValueError("need 0 <= n_burn < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if len(self.step_scales) != 4 or min(self.step_scales) <= 0:
            raise ValueError("step_scales needs four positive entries")


@dataclass(eq=False)
class PosteriorDraws:
    """Retained draws for one time point (rows are draws)."""

    t: int
    ids_b: tuple
    x_b: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    phi: np.ndarray
    nugget: np.ndarray
    family: KernelFamily
    acceptance: dict = field(default_factory=dict)
    x_init: np.ndarray | None = None
    unstable: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return len(self.mu)

    def kernel(self, k: int) -> KernelSpec:
        return KernelSpec(self.family, float(self.sigma2[k]), float(self.phi[k]), float(self.nugget[k]))


@dataclass(frozen=True)
class _Resolved:
    mu_mean: float
    mu_sd: float
    sigma_scale: float
    phi_lo: float
    phi_hi: float
    nugget_scale: float


def batch_means_se(draws, n_batches: int = 20) -> np.ndarray:
    """Monte-Carlo standard error of the column means by non-overlapping batch means."""
    a = np.asarray(draws, dtype=float)
    a = a.reshape(len(a), -1)
    n = len(a)
    n_batches = max(2, min(n_batches, n // 2))
    size = n // n_batches
    means = a[: size * n_batches].reshape(n_batches, size, -1).mean(axis=1)
    return (means.std(axis=0, ddof=1) / math.sqrt(n_batches)).reshape(np.shape(draws)[1:])


def _spread(x: np.ndarray) -> float:
    x = x[np.isfinite(x)]
    sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
    return sd if sd > 0 else 1.0


def _resolve(priors: PriorSpec, slc: TimeSlice, x_init: np.ndarray, dist: np.ndarray) -> _Resolved:
    stable = x_init[np.isfinite(x_init)]
    sd = _spread(stable) if len(stable) > 1 else _spread(np.concatenate([slc.x_ac, stable]))
    off = dist[np.triu_indices(len(dist), k=1)]
    off = off[off > 0]
    if off.size:
        lo, hi = 0.1 * 3.0 / off.max(), 10.0 * 3.0 / off.min()
    else:
        lo, hi = 1e-3, 1e3
    return _Resolved(
        mu_mean=float(np.mean(slc.x_ac)) if priors.mu_mean is None else priors.mu_mean,
        mu_sd=priors.mu_sd,
        sigma_scale=5.0 * sd if priors.sigma_scale is None else priors.sigma_scale,
        phi_lo=lo if priors.phi_lo is None else priors.phi_lo,
        phi_hi=hi if priors.phi_hi is None else priors.phi_hi,
        nugget_scale=sd if priors.nugget_scale is None else priors.nugget_scale,
    )


def _rng_for(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(t) & 0xFFFFFFFFFFFFFFFF])


class _Chain:
    """State and cached factorizations of one time point's sampler."""

    def __init__(self, fit, slc, family, res: _Resolved, free, fixed, dist):
        self.fit = fit
        self.slc = slc
        self.family = family
        self.res = res
        self.free = free
        self.fixed = fixed
        self.dist = dist
        self.n_ac = slc.n_ac
        self.gains = fit.gain(slc.z_b)
        self.u = transform_observations(fit, slc.y_b, slc.z_b)

    def unpack(self, theta):
        p = dict(self.fixed)
        p.update(zip(self.free, theta))
        mu = p["mu"]
        sigma2 = math.exp(p["log_sigma2"]) if "log_sigma2" in p else p["sigma2"]
        phi = math.exp(p["log_phi"]) if "log_phi" in p else p["phi"]
        nug = math.exp(p["log_nugget"]) if "log_nugget" in p else p["nugget"]
        return mu, sigma2, phi, nug

    def log_prior(self, theta) -> float:
        r = self.res
        lp = 0.0
        for name, v in zip(self.free, theta):
            if name == "mu":
                lp += -0.5 * ((v - r.mu_mean) / r.mu_sd) ** 2
            elif name == "log_sigma2":
                # half-Normal on sqrt(sigma2), Jacobian of the log transform included
                lp += -math.exp(v) / (2.0 * r.sigma_scale ** 2) + 0.5 * v
            elif name == "log_phi":
                if not (math.log(r.phi_lo) <= v <= math.log(r.phi_hi)):
                    return -math.inf
                lp += v
            elif name == "log_nugget":
                lp += -math.exp(v) / (2.0 * r.nugget_scale ** 2) + 0.5 * v
        return lp

    def factor(self, theta):
        """Cholesky factor of the covariance over [A/C, B]; ``None`` if singular."""
        mu, sigma2, phi, nug = self.unpack(theta)
        if not (np.isfinite(sigma2) and sigma2 > 0 and np.isfinite(phi) and phi > 0):
            return None
        k = cov_from_distances(KernelSpec(self.family, sigma2, phi, nug), self.dist)
        try:
            chol, _ = cholesky_jitter(k, sigma2)
        except SingularCovariance:
            return None
        return chol

    def log_lik(self, theta, chol, x_b) -> float:
        mu = self.unpack(theta)[0]
        vals = np.concatenate([self.slc.x_ac, x_b]) - mu
        z = solve_triangular(chol, vals, lower=True)
        return float(-0.5 * (z @ z) - np.log(np.diag(chol)).sum() - 0.5 * len(vals) * _LOG2PI)

    def x_conditional(self, theta, chol):
        """Mean and lower factor of ``x_B | x_AC, mu, theta, y``."""
        mu = self.unpack(theta)[0]
        na = self.n_ac
        l_aa = chol[:na, :na]
        l_ba = chol[na:, :na]
        l_bb = chol[na:, na:]
        prior_mean = mu + l_ba @ solve_triangular(l_aa, self.slc.x_ac - mu, lower=True)
        prior_cov = l_bb @ l_bb.T
        mean, cov, _ = kalman_update(prior_mean, prior_cov, self.gains, self.u, self.fit.tau2)
        scale = max(float(np.max(np.diag(cov), initial=0.0)), 1e-300)
        try:
            lc, _ = cholesky_jitter(cov, scale)
        except SingularCovariance:
            # fully determined sites: fall back to the clipped eigen square root
            w, v = np.linalg.eigh(cov)
            lc = v * np.sqrt(np.clip(w, 0.0, None))
        return mean, lc


def _initial_state(fit, slc, config, res, x_init, unstable):
    keep = ~unstable & np.isfinite(x_init)
    vals = np.concatenate([slc.x_ac, x_init[keep]])
    locs = np.vstack([slc.locs_ac, slc.locs_b[keep]])
    try:
        p = mle_spatial_params(vals, locs, config.family, config.nugget, config.phi_fixed,
                               raise_on_nonconvergence=False)
        k = p.kernel
        return p.mu, k.sigma2, k.phi, max(k.nugget, 1e-6 * k.sigma2)
    except DataError:
        var = _spread(vals) ** 2
        d = distance_matrix(locs)
        off = d[d > 0]
        phi = 3.0 / float(np.median(off)) if off.size else 1.0
        return res.mu_mean, var, phi, 0.1 * var


def mcmc_filter_time_point(fit: ObsModelFit, slc: TimeSlice, priors: PriorSpec | None = None,
                           cfg: McmcConfig = McmcConfig(), config: FilterConfig = FilterConfig()) -> PosteriorDraws:
    """Sample the joint posterior at one time point.

    The chain's random stream is derived from ``(cfg.seed, slc.t)``. A
    retained-draw acceptance rate outside (0.05, 0.95) raises a
    ``MixingWarning`` and is flagged in ``diagnostics``.
    """
    if slc.n_ac == 0:
        raise NoReferenceData(f"no reference values at t={slc.t}")
    if slc.n_b == 0:
        raise DataError(f"no low-cost readings at t={slc.t}")
    priors = PriorSpec() if priors is None else priors
    rng = _rng_for(cfg.seed, slc.t)
    x_init, unstable = invert_prediction(fit, slc.y_b, slc.z_b, config.gain_eps)
    x_init_ok = np.where(unstable, np.nan, x_init)
    dist = distance_matrix(slc.all_locs())
    res = _resolve(priors, slc, x_init_ok, dist)

    phi_fixed = priors.phi_fixed if priors.phi_fixed is not None else config.phi_fixed
    nugget_fixed = priors.nugget_fixed if priors.nugget_fixed is not None else (None if config.nugget else 0.0)
    mu0, s20, phi0, nug0 = _initial_state(fit, slc, config, res, x_init, unstable)
    fixed, free, theta = {}, [], []
    for name, fixed_val, start in (
        ("mu", priors.mu_fixed, mu0),
        ("sigma2", priors.sigma2_fixed, s20),
        ("phi", phi_fixed, float(np.clip(phi0, res.phi_lo * (1 + 1e-9), res.phi_hi * (1 - 1e-9)))),
        ("nugget", nugget_fixed, nug0),
    ):
        if fixed_val is not None:
            fixed[name] = float(fixed_val)
        elif name == "mu":
            free.append(name)
            theta.append(start)
        else:
            free.append("log_" + name)
            theta.append(math.log(start))
    theta = np.array(theta, dtype=float)
    chain = _Chain(fit, slc, config.family, res, free, fixed, dist)

    chol = chain.factor(theta)
    if chol is None:
        raise SingularCovariance(f"t={slc.t}: covariance singular at the initial state")
    x_mean, x_chol = chain.x_conditional(theta, chol)
    x_b = np.where(unstable, x_mean, x_init)
    lp = chain.log_lik(theta, chol, x_b) + chain.log_prior(theta)

    names_all = ("mu", "log_sigma2", "log_phi", "log_nugget")
    sd_x = _spread(np.concatenate([slc.x_ac, x_init_ok]))
    base_steps = np.array([cfg.step_scales[names_all.index(n)] * (sd_x if n == "mu" else 1.0) for n in free])
    prop_chol = np.diag(base_steps)
    log_adj = 0.0
    dim = len(free)
    hist = []

    n_keep = len(range(cfg.n_burn, cfg.n_iter, cfg.thin))
    out_x = np.empty((n_keep, slc.n_b))
    out_p = np.empty((n_keep, 4))
    accepted = 0
    proposed = 0
    k = 0
    for it in range(cfg.n_iter):
        # (a) exact Gaussian draw of x_B, cached until theta moves
        x_b = x_mean + x_chol @ rng.standard_normal(slc.n_b)
        lp = chain.log_lik(theta, chol, x_b) + chain.log_prior(theta) if dim else 0.0
        # (b) random-walk Metropolis on (mu, log kernel parameters)
        if dim:
            prop = theta + math.exp(log_adj) * (prop_chol @ rng.standard_normal(dim))
            lp_prior = chain.log_prior(prop)
            acc = False
            if np.isfinite(lp_prior):
                c_new = chain.factor(prop)
                if c_new is not None:
                    lp_new = chain.log_lik(prop, c_new, x_b) + lp_prior
                    if math.log(rng.uniform()) < lp_new - lp:
                        theta, chol, lp, acc = prop, c_new, lp_new, True
                        x_mean, x_chol = chain.x_conditional(theta, chol)
            if it >= cfg.n_burn:
                proposed += 1
                accepted += acc
            elif cfg.adapt:
                log_adj += min(0.5, 10.0 / (it + 1) ** 0.6) * (float(acc) - TARGET_ACCEPTANCE)
                hist.append(theta.copy())
                if it >= 199 and (it + 1) % 100 == 0:
                    emp = np.cov(np.array(hist[len(hist) // 2:]).T).reshape(dim, dim)
                    emp = emp + 1e-10 * np.eye(dim)
                    try:
                        prop_chol = (2.38 / math.sqrt(dim)) * np.linalg.cholesky(emp)
                    except np.linalg.LinAlgError:
                        pass
        if it >= cfg.n_burn and (it - cfg.n_burn) % cfg.thin == 0:
            out_x[k] = x_b
            out_p[k] = chain.unpack(theta)
            k += 1

    if not (np.all(np.isfinite(out_x)) and np.all(np.isfinite(out_p))):
        raise FitDiverged(f"t={slc.t}: non-finite posterior draws")
    acceptance = {}
    diagnostics = {"free_parameters": tuple(free), "mixing_warning": False, "n_unstable": int(unstable.sum())}
    if dim and proposed:
        rate = accepted / proposed
        acceptance["theta"] = rate
        if not 0.05 < rate < 0.95:
            diagnostics["mixing_warning"] = True
            warnings.warn(f"t={slc.t}: Metropolis acceptance {rate:.3f} outside (0.05, 0.95)",
                          MixingWarning, stacklevel=2)
    return PosteriorDraws(
        t=slc.t, ids_b=slc.ids_b, x_b=out_x, mu=out_p[:, 0], sigma2=out_p[:, 1], phi=out_p[:, 2],
        nugget=out_p[:, 3], family=config.family, acceptance=acceptance,
        x_init=x_init, unstable=unstable, diagnostics=diagnostics,
    )


def _chain_job(args):
    fit, slc, priors, cfg, config = args
    return mcmc_filter_time_point(fit, slc, priors, cfg, config)


def mcmc_filter_series(fit: ObsModelFit, slices: Sequence[TimeSlice], priors: PriorSpec | None = None,
                       cfg: McmcConfig = McmcConfig(), config: FilterConfig = FilterConfig(),
                       threads: int = 1) -> list[PosteriorDraws]:
    """One chain per time point; results do not depend on ``threads``."""
    jobs = [(fit, s, priors, cfg, config) for s in slices]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_chain_job, jobs))
    return [_chain_job(j) for j in jobs]


def summarize_posterior(draws: PosteriorDraws, level: float = 0.95) -> FilterResult:
    """Posterior means, variances and equal-tailed credible intervals at the B sites."""
    if draws.n_draws < 100:
        raise ValueError(f"need at least 100 retained draws, got {draws.n_draws}")
    x = draws.x_b
    mean = x.mean(axis=0)
    var = x.var(axis=0, ddof=1)
    alpha = 0.5 * (1.0 - level)
    lower, upper = np.quantile(x, [alpha, 1.0 - alpha], axis=0)
    # constant columns must give a degenerate interval at the constant
    const = np.ptp(x, axis=0) == 0
    mean = np.where(const, x[0], mean)
    var = np.where(const, 0.0, var)
    lower = np.where(const, x[0], lower)
    upper = np.where(const, x[0], upper)
    nug = float(draws.nugget.mean())
    params = SpatialParams(
        float(draws.mu.mean()),
        KernelSpec(draws.family, float(draws.sigma2.mean()), float(draws.phi.mean()), nug),
    )
    summary = {}
    for name in ("mu", "sigma2", "phi", "nugget"):
        v = getattr(draws, name)
        lo, hi = np.quantile(v, [alpha, 1.0 - alpha])
        summary[name] = {"mean": float(v.mean()), "sd": float(v.std(ddof=1)), "lower": float(lo), "upper": float(hi)}
    diagnostics = dict(draws.diagnostics)
    diagnostics.update({"parameters": summary, "acceptance": dict(draws.acceptance),
                        "mcse": batch_means_se(x)})
    return FilterResult(
        t=draws.t, ids_b=draws.ids_b, x_update=mean, post_var=var, lower=lower, upper=upper,
        post_cov=np.atleast_2d(np.cov(x, rowvar=False)), params=params, x_init=draws.x_init,
        unstable=draws.unstable, diagnostics=diagnostics,
    )


@dataclass
class GridPosterior:
    mean: np.ndarray
    var: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def grid_posterior(draws: PosteriorDraws, slc: TimeSlice, grid_locs, level: float = 0.95,
                   seed: int | None = None, max_draws: int | None = None) -> GridPosterior:
    """Posterior of the field at grid points.

    For each retained draw the grid is kriged from ``(x_AC, x_B^(k))`` under
    that draw's parameters and sampled independently per point. The mean and
    variance are the mixture moments of those kriging distributions; the
    interval uses the sampled values.
    """
    grid_locs = np.asarray(grid_locs, dtype=float).reshape(-1, 2)
    if len(grid_locs) == 0:
        raise DataError("grid is empty")
    rng = np.random.default_rng(seed)
    idx = np.arange(draws.n_draws)
    if max_draws is not None and max_draws < len(idx):
        idx = np.linspace(0, len(idx) - 1, max_draws).round().astype(int)
    known = slc.all_locs()
    d_kk = distance_matrix(known)
    d_gk = distance_matrix(grid_locs, known)
    d_gg0 = np.zeros(len(grid_locs))
    means = np.empty((len(idx), len(grid_locs)))
    vars_ = np.empty_like(means)
    cache_key, cache = None, None
    for row, k in enumerate(idx):
        spec = draws.kernel(k)
        key = (spec.sigma2, spec.phi, spec.nugget)
        if key != cache_key:
            chol, _ = cholesky_jitter(cov_from_distances(spec, d_kk), spec.sigma2)
            w = solve_triangular(chol, cov_from_distances(spec, d_gk).T, lower=True)
            sill = cov_from_distances(spec, d_gg0)
            cache_key, cache = key, (chol, w, np.clip(sill - np.einsum("ij,ij->j", w, w), 0.0, None))
        chol, w, kvar = cache
        vals = np.concatenate([slc.x_ac, draws.x_b[k]]) - draws.mu[k]
        means[row] = draws.mu[k] + w.T @ solve_triangular(chol, vals, lower=True)
        vars_[row] = kvar
    samples = means + np.sqrt(vars_) * rng.standard_normal(means.shape)
    alpha = 0.5 * (1.0 - level)
    lower, upper = np.quantile(samples, [alpha, 1.0 - alpha], axis=0)
    mean = means.mean(axis=0)
    var = vars_.mean(axis=0) + (means.var(axis=0) if len(idx) > 1 else 0.0)
    return GridPosterior(mean, var, lower, upper)


def posterior_predictive_pvalues(draws: PosteriorDraws, fit: ObsModelFit, slc: TimeSlice,
                                 seed: int | None = None) -> np.ndarray:
    """Per-B-site probability that the model generates a reading more extreme than observed.

    ``mu^(k) = b0 + Z b2 + H x_B^(k)`` per draw; one replicate reading per
    site is drawn around the last retained draw's mean, and the p-value is
    the fraction of draws with ``|y_rep - mu^(k)| > |y_obs - mu^(k)|``.
    """
    rng = np.random.default_rng(seed)
    offset = fit.offset(slc.z_b)
    gains = fit.gain(slc.z_b)
    mu_k = offset[None, :] + gains[None, :] * draws.x_b
    y_rep = mu_k[-1] + math.sqrt(fit.tau2) * rng.standard_normal(slc.n_b)
    return np.mean(np.abs(y_rep[None, :] - mu_k) > np.abs(slc.y_b[None, :] - mu_k), axis=0)

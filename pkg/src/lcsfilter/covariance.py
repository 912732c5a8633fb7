"""Isotropic covariance kernels, kriging and Gaussian-process likelihoods.

Three stationary families are supported, all parameterized by a partial
sill ``sigma2`` and an inverse-range ``phi``::

    Exponential          sigma2 * exp(-phi d)
    Matern32             sigma2 * (1 + sqrt(3) phi d) * exp(-sqrt(3) phi d)
    SquaredExponential   sigma2 * exp(-(phi d)^2)

A nugget is added only where two locations coincide exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import cdist, pdist

from .errors import DataError, SingularCovariance

SQRT3 = math.sqrt(3.0)
JITTER_BASE = 1e-8
JITTER_ESCALATIONS = 3


class KernelFamily(enum.Enum):
    EXPONENTIAL = "exponential"
    MATERN32 = "matern32"
    SQUARED_EXPONENTIAL = "sqexp"

    @classmethod
    def parse(cls, name) -> "KernelFamily":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "exponential": cls.EXPONENTIAL, "exp": cls.EXPONENTIAL,
            "matern32": cls.MATERN32, "matern": cls.MATERN32,
            "sqexp": cls.SQUARED_EXPONENTIAL, "squaredexponential": cls.SQUARED_EXPONENTIAL,
            "gaussian": cls.SQUARED_EXPONENTIAL,
        }
        try:
            return aliases[key]
        except KeyError:
            raise DataError(f"unknown kernel family {name!r}") from None


@dataclass(frozen=True)
class KernelSpec:
    family: KernelFamily
    sigma2: float
    phi: float
    nugget: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily.parse(self.family))
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not self.phi > 0:
            raise ValueError(f"phi must be positive, got {self.phi}")
        if not self.nugget >= 0:
            raise ValueError(f"nugget must be non-negative, got {self.nugget}")

    @property
    def sill(self) -> float:
        """Variance at zero distance, nugget included."""
        return self.sigma2 + self.nugget

    def replace(self, **changes) -> "KernelSpec":
        vals = dict(family=self.family, sigma2=self.sigma2, phi=self.phi, nugget=self.nugget)
        vals.update(changes)
        return KernelSpec(**vals)


class CondGaussian(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray
    jitter_escalations: int = 0


class VariogramBin(NamedTuple):
    distance: float
    semivariance: float
    count: int


def _correlation(family: KernelFamily, phi: float, d):
    r = phi * np.asarray(d, dtype=float)
    if family is KernelFamily.EXPONENTIAL:
        return np.exp(-r)
    if family is KernelFamily.MATERN32:
        r = SQRT3 * r
        return (1.0 + r) * np.exp(-r)
    return np.exp(-r * r)


def kernel_eval(spec: KernelSpec, d):
    """Covariance at distance ``d`` (scalar or array)."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    out = spec.sigma2 * _correlation(spec.family, spec.phi, d)
    if spec.nugget:
        out = out + spec.nugget * (d == 0)
    return out if out.ndim else float(out)


def distance_matrix(locs_row, locs_col=None) -> np.ndarray:
    a = np.asarray(locs_row, dtype=float).reshape(-1, 2)
    b = a if locs_col is None else np.asarray(locs_col, dtype=float).reshape(-1, 2)
    return cdist(a, b)


def cov_matrix(spec: KernelSpec, locs_row, locs_col=None) -> np.ndarray:
    """Cross-covariance between two location sets (``locs_col`` defaults to ``locs_row``)."""
    return cov_from_distances(spec, distance_matrix(locs_row, locs_col))


def cov_from_distances(spec: KernelSpec, d: np.ndarray) -> np.ndarray:
    out = spec.sigma2 * _correlation(spec.family, spec.phi, d)
    if spec.nugget:
        out = out + spec.nugget * (d == 0)
    return out


def cholesky_jitter(k: np.ndarray, scale: float) -> tuple[np.ndarray, int]:
    """Lower Cholesky factor of ``k``, adding diagonal jitter on failure.

    Jitter starts at ``1e-8 * scale`` and grows tenfold up to three times.
    Returns the factor and the number of jitter levels that were needed.
    """
    try:
        return np.linalg.cholesky(k), 0
    except np.linalg.LinAlgError:
        pass
    n = k.shape[0]
    eye = np.eye(n)
    jitter = JITTER_BASE * scale
    for level in range(1, JITTER_ESCALATIONS + 2):
        try:
            return np.linalg.cholesky(k + jitter * eye), level
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SingularCovariance(f"covariance of size {n} not positive definite after jitter")


def condition_gaussian(spec: KernelSpec, mu: float, target_locs, known_locs, known_vals) -> CondGaussian:
    """Kriging mean and covariance of the GP at ``target_locs`` given values at ``known_locs``."""
    known_locs = np.asarray(known_locs, dtype=float).reshape(-1, 2)
    target_locs = np.asarray(target_locs, dtype=float).reshape(-1, 2)
    known_vals = np.asarray(known_vals, dtype=float)
    if len(known_locs) == 0:
        raise DataError("conditioning set is empty")
    k_kk = cov_matrix(spec, known_locs)
    k_tk = cov_matrix(spec, target_locs, known_locs)
    k_tt = cov_matrix(spec, target_locs)
    chol, esc = cholesky_jitter(k_kk, spec.sigma2)
    return _condition_with_factor(chol, k_tk, k_tt, mu, known_vals, esc)


def _condition_with_factor(chol, k_tk, k_tt, mu, known_vals, esc=0) -> CondGaussian:
    w = solve_triangular(chol, k_tk.T, lower=True)
    resid = solve_triangular(chol, known_vals - mu, lower=True)
    mean = mu + w.T @ resid
    cov = k_tt - w.T @ w
    cov = 0.5 * (cov + cov.T)
    return CondGaussian(mean, cov, esc)


def kriging_weights(spec: KernelSpec, target_locs, known_locs) -> tuple[np.ndarray, np.ndarray]:
    """Weights ``C_tk C_kk^-1`` and the kriging covariance for ``target_locs``."""
    known_locs = np.asarray(known_locs, dtype=float).reshape(-1, 2)
    k_kk = cov_matrix(spec, known_locs)
    k_tk = cov_matrix(spec, target_locs, known_locs)
    k_tt = cov_matrix(spec, target_locs)
    chol, _ = cholesky_jitter(k_kk, spec.sigma2)
    weights = cho_solve((chol, True), k_tk.T).T
    cov = k_tt - weights @ k_tk.T
    return weights, 0.5 * (cov + cov.T)


def mvn_logpdf_chol(chol: np.ndarray, resid: np.ndarray) -> float:
    """Log N(resid | 0, L L^T) given the lower factor ``L``."""
    z = solve_triangular(chol, resid, lower=True)
    n = len(resid)
    return float(-0.5 * (z @ z) - np.log(np.diag(chol)).sum() - 0.5 * n * math.log(2 * math.pi))


def gp_loglik(spec: KernelSpec, mu: float, locs, vals) -> float:
    """Log-density of ``vals`` under the GP with constant mean ``mu``."""
    vals = np.asarray(vals, dtype=float)
    chol, _ = cholesky_jitter(cov_matrix(spec, locs), spec.sigma2)
    return mvn_logpdf_chol(chol, vals - mu)


def empirical_variogram(locs, vals, n_bins: int = 10, max_lag: float | None = None) -> list[VariogramBin]:
    """Matheron estimator, half the mean squared difference per distance bin.

    Bins are equal-width on ``[0, max_lag]``; ``max_lag`` defaults to half
    the largest pairwise distance, widened to the full distance when that
    would leave no pair (e.g. two sites).
    """
    locs = np.asarray(locs, dtype=float).reshape(-1, 2)
    vals = np.asarray(vals, dtype=float)
    if len(locs) < 2:
        raise DataError("variogram needs at least two sites")
    iu = np.triu_indices(len(vals), k=1)
    return variogram_from_pairs(pdist(locs), (vals[iu[0]] - vals[iu[1]]) ** 2, n_bins, max_lag)


def variogram_from_pairs(d, sq, n_bins: int = 10, max_lag: float | None = None) -> list[VariogramBin]:
    """Bin pair distances ``d`` and squared differences ``sq`` (e.g. pooled over times)."""
    d = np.asarray(d, dtype=float)
    sq = np.asarray(sq, dtype=float)
    if d.size == 0:
        raise DataError("variogram needs at least one pair")
    if max_lag is None:
        max_lag = d.max() / 2.0
        if not np.any(d <= max_lag):
            max_lag = d.max()
    edges = np.linspace(0.0, max_lag, n_bins + 1)
    keep = d <= max_lag
    which = np.clip(np.searchsorted(edges, d[keep], side="right") - 1, 0, n_bins - 1)
    out = []
    for b in range(n_bins):
        sel = which == b
        count = int(sel.sum())
        if count:
            out.append(VariogramBin(float(d[keep][sel].mean()), float(0.5 * sq[keep][sel].mean()), count))
        else:
            out.append(VariogramBin(float(0.5 * (edges[b] + edges[b + 1])), float("nan"), 0))
    return out

"""Per-site calibration models.

Two linear models share one design: the intercept, a regressor, the
covariates, and regressor-by-covariate interactions.

* inverse regression (observation model): low-cost reading ``y`` regressed
  on the reference concentration ``x``; predictions invert the fitted line.
* regression calibration: ``x`` regressed on ``y``; the usual baseline.

A generalized-Pareto exceedance model is provided as a peaks-only baseline,
and ``fit_obs_no_collocation`` trains the observation model when no site has
both instruments.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import (
    DataError,
    MleNotConverged,
    MleWarning,
    FitDiverged,
    InsufficientExceedances,
    NoReferenceData,
    RankDeficientDesign,
    UnderdeterminedFit,
)
from .geo_core import NetworkLayout, PanelDataset, SiteRole

FORMAT_VERSION = "1.0"
GAIN_EPS = 1e-6
PARETO_MIN_EXCEEDANCES = 10


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered covariate names and whether each interacts with the regressor."""

    names: tuple[str, ...] = ()
    interacts: tuple[bool, ...] | None = None

    def __post_init__(self):
        names = tuple(self.names)
        if len(set(names)) != len(names):
            raise DataError("covariate names must be unique")
        inter = tuple(True for _ in names) if self.interacts is None else tuple(bool(b) for b in self.interacts)
        if len(inter) != len(names):
            raise DataError("one interaction flag per covariate is required")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "interacts", inter)

    def __len__(self):
        return len(self.names)

    @property
    def n_interactions(self) -> int:
        return sum(self.interacts)

    @property
    def n_columns(self) -> int:
        return 2 + len(self.names) + self.n_interactions

    def to_dict(self) -> dict:
        return {"names": list(self.names), "interacts": list(self.interacts)}

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateSchema":
        return cls(tuple(d["names"]), tuple(d.get("interacts", [True] * len(d["names"]))))


def _as_rows(z, k: int) -> np.ndarray:
    """Covariates as an ``(n, k)`` array; a 1-D input is one row."""
    z = np.asarray(z, dtype=float)
    if k == 0:
        return z.reshape(z.shape[0] if z.ndim == 2 else 1, 0)
    return z.reshape(-1, k)


def design_rows(regressor, z, schema: CovariateSchema) -> np.ndarray:
    """Columns ``[1, r, Z, Z[:, interacting] * r]``."""
    r = np.asarray(regressor, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(len(r), len(schema))
    inter = z[:, np.array(schema.interacts, dtype=bool)] * r[:, None]
    return np.column_stack([np.ones_like(r), r, z, inter])


def build_design_matrix(records: PanelDataset, schema: CovariateSchema, direction: str):
    """Design matrix and response for a forward or inverse fit.

    ``inverse``: response ``y``, regressor ``x_ref``.
    ``forward``: response ``x_ref``, regressor ``y``.
    """
    z = records.covariate_matrix(schema.names)
    if np.any(np.isnan(records.y)) or np.any(np.isnan(records.x_ref)) or not np.all(np.isfinite(z)):
        raise DataError("design records need y, x_ref and all covariates")
    if direction == "inverse":
        regressor, response = records.x_ref, records.y
    elif direction == "forward":
        regressor, response = records.y, records.x_ref
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', not {direction!r}")
    design = design_rows(regressor, z, schema)
    if design.shape[0] < design.shape[1]:
        raise UnderdeterminedFit(f"{design.shape[0]} rows for {design.shape[1]} columns")
    return design, np.asarray(response, dtype=float)


def _ols(design: np.ndarray, response: np.ndarray):
    n, p = design.shape
    if n <= p:
        raise UnderdeterminedFit(f"{n} rows for {p} columns; need more rows than columns")
    coef, _, rank, _ = np.linalg.lstsq(design, response, rcond=None)
    if rank < p:
        raise RankDeficientDesign(f"design rank {rank} < {p} columns")
    resid = response - design @ coef
    tau2 = float(resid @ resid) / (n - p)
    xtx_inv = np.linalg.inv(design.T @ design)
    return coef, tau2, tau2 * xtx_inv


@dataclass(frozen=True, eq=False)
class LinearCalibration:
    """Coefficients of a gain-offset linear model in design-column order.

    ``beta3`` always has one entry per covariate; non-interacting covariates
    carry a structural zero.
    """

    beta0: float
    beta1: float
    beta2: np.ndarray
    beta3: np.ndarray
    tau2: float
    schema: CovariateSchema = field(default_factory=CovariateSchema)
    n_train: int = 0
    window: tuple[int, int] | None = None
    coef_cov: np.ndarray | None = None

    kind = "linear"

    def __post_init__(self):
        k = len(self.schema)
        object.__setattr__(self, "beta2", np.asarray(self.beta2, dtype=float).reshape(k))
        object.__setattr__(self, "beta3", np.asarray(self.beta3, dtype=float).reshape(k))
        if self.coef_cov is not None:
            p = self.schema.n_columns
            object.__setattr__(self, "coef_cov", np.asarray(self.coef_cov, dtype=float).reshape(p, p))
        if not self.tau2 >= 0:
            raise ValueError("tau2 must be non-negative")

    @classmethod
    def from_coef(cls, coef, tau2, schema, coef_cov=None, n_train=0, window=None):
        coef = np.asarray(coef, dtype=float)
        k = len(schema)
        beta3 = np.zeros(k)
        beta3[np.array(schema.interacts, dtype=bool)] = coef[2 + k:]
        return cls(float(coef[0]), float(coef[1]), coef[2:2 + k], beta3, float(tau2),
                   schema, int(n_train), window, coef_cov)

    @property
    def coef(self) -> np.ndarray:
        """Coefficient vector matching ``design_rows`` columns."""
        return np.concatenate([[self.beta0, self.beta1], self.beta2,
                               self.beta3[np.array(self.schema.interacts, dtype=bool)]])

    def offset(self, z) -> np.ndarray:
        z = _as_rows(z, len(self.schema))
        return self.beta0 + z @ self.beta2

    def gain(self, z) -> np.ndarray:
        z = _as_rows(z, len(self.schema))
        return self.beta1 + z @ self.beta3

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "schema": self.schema.to_dict(),
            "coef": self.coef.tolist(),
            "tau2": self.tau2,
            "n_train": self.n_train,
            "window": list(self.window) if self.window is not None else None,
            "coef_cov": None if self.coef_cov is None else self.coef_cov.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict):
        _check_version(d)
        if d.get("kind") != cls.kind:
            raise DataError(f"model file holds a {d.get('kind')!r} model, expected {cls.kind!r}")
        schema = CovariateSchema.from_dict(d["schema"])
        cov = d.get("coef_cov")
        window = tuple(d["window"]) if d.get("window") is not None else None
        return cls.from_coef(d["coef"], d["tau2"], schema, None if cov is None else np.array(cov),
                             d.get("n_train", 0), window)


class ObsModelFit(LinearCalibration):
    """Inverse regression: ``y = b0 + b1 x + b2'z + b3'z x + eps``."""

    kind = "inverse"


class RegCalFit(LinearCalibration):
    """Forward regression calibration: ``x = b0 + b1 y + b2'z + b3'z y + eps``."""

    kind = "regcal"


def _check_version(d: dict) -> None:
    version = str(d.get("format_version", ""))
    major = version.split(".")[0]
    if major != FORMAT_VERSION.split(".")[0]:
        raise DataError(f"unsupported model format_version {version!r}")


# ----------------------------------------------------------------------------
# training-data selection


def collocated_records(panel: PanelDataset, layout: NetworkLayout, window, schema: CovariateSchema) -> PanelDataset:
    """Role-A records inside ``window`` with y, x_ref and all covariates present."""
    sub = panel.in_window(window) if window is not None else panel
    is_a = np.array([layout.role_of(s) is SiteRole.COLLOCATED for s in sub.site_id], dtype=bool)
    z = sub.covariate_matrix(schema.names)
    paired = is_a & ~np.isnan(sub.y) & ~np.isnan(sub.x_ref)
    complete = np.all(np.isfinite(z), axis=1)
    dropped = int((paired & ~complete).sum())
    if dropped:
        warnings.warn(f"dropping {dropped} collocated records with missing covariates", stacklevel=3)
    return sub.subset(paired & complete)


def fit_inverse_arrays(x, y, z, schema: CovariateSchema, window=None) -> ObsModelFit:
    design = design_rows(x, z, schema)
    coef, tau2, cov = _ols(design, np.asarray(y, dtype=float))
    return ObsModelFit.from_coef(coef, tau2, schema, cov, len(design), window)


def fit_regcal_arrays(x, y, z, schema: CovariateSchema, window=None) -> RegCalFit:
    design = design_rows(y, z, schema)
    coef, tau2, cov = _ols(design, np.asarray(x, dtype=float))
    return RegCalFit.from_coef(coef, tau2, schema, cov, len(design), window)


def fit_inverse_regression(panel: PanelDataset, layout: NetworkLayout, window, schema: CovariateSchema) -> ObsModelFit:
    """OLS fit of the observation model on collocated data in ``window``."""
    rec = collocated_records(panel, layout, window, schema)
    if len(rec) == 0:
        raise NoReferenceData("no collocated training records in window")
    design, response = build_design_matrix(rec, schema, "inverse")
    coef, tau2, cov = _ols(design, response)
    return ObsModelFit.from_coef(coef, tau2, schema, cov, len(design), window)


def fit_regression_calibration(panel: PanelDataset, layout: NetworkLayout, window, schema: CovariateSchema) -> RegCalFit:
    rec = collocated_records(panel, layout, window, schema)
    if len(rec) == 0:
        raise NoReferenceData("no collocated training records in window")
    design, response = build_design_matrix(rec, schema, "forward")
    coef, tau2, cov = _ols(design, response)
    return RegCalFit.from_coef(coef, tau2, schema, cov, len(design), window)


def predict_regcal(fit: RegCalFit, y, z):
    """Plug-in prediction and predictive variance ``tau2 + x0' V x0``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    design = design_rows(y, np.asarray(z, dtype=float).reshape(len(y), len(fit.schema)), fit.schema)
    mean = design @ fit.coef
    var = np.full(len(y), fit.tau2)
    if fit.coef_cov is not None:
        var = var + np.einsum("ij,jk,ik->i", design, fit.coef_cov, design)
    return mean, var


def invert_prediction(fit: ObsModelFit, y, z, eps: float = GAIN_EPS):
    """Solve the fitted observation equation for ``x``.

    Returns ``(x_hat, unstable)`` where ``unstable`` marks readings whose
    gain ``b1 + b3'z`` is smaller than ``eps`` in magnitude. Flagged values
    are returned as computed, not clamped.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z = np.asarray(z, dtype=float).reshape(len(y), len(fit.schema))
    gain = fit.gain(z) if len(y) else np.zeros(0)
    offset = fit.offset(z) if len(y) else np.zeros(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_hat = (y - offset) / gain
    return x_hat, np.abs(gain) < eps


def obs_gain_matrix(fit: ObsModelFit, z_b) -> np.ndarray:
    """Diagonal observation matrix with entries ``b1 + b3'z_i``."""
    z_b = _as_rows(z_b, len(fit.schema))
    return np.diag(fit.gain(z_b) if len(z_b) else np.zeros(0))


# ----------------------------------------------------------------------------
# generalized Pareto exceedance model


@dataclass(frozen=True, eq=False)
class ParetoFit:
    """GPD for exceedances of ``x`` over ``threshold``.

    ``xi = exp(gamma[0]) - 0.5`` and ``log sigma = D @ gamma[1:]`` where the
    design ``D`` is ``[1, log y, w, w * log y]`` and ``w`` holds the
    covariates, log-transformed where ``log_cols`` is set.
    """

    gamma: np.ndarray
    threshold: float = 12.0
    schema: CovariateSchema = field(default_factory=CovariateSchema)
    log_cols: tuple[bool, ...] = ()
    n_exceed: int = 0
    loglik: float = float("nan")

    kind = "pareto"

    @property
    def xi(self) -> float:
        return math.exp(self.gamma[0]) - 0.5

    def sigma(self, y, z) -> np.ndarray:
        return np.exp(pareto_design(y, z, self.schema, self.log_cols) @ self.gamma[1:])

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "schema": self.schema.to_dict(),
            "gamma": list(map(float, self.gamma)),
            "threshold": self.threshold,
            "log_cols": list(self.log_cols),
            "n_exceed": self.n_exceed,
            "loglik": self.loglik,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParetoFit":
        _check_version(d)
        if d.get("kind") != cls.kind:
            raise DataError(f"model file holds a {d.get('kind')!r} model, expected 'pareto'")
        return cls(np.array(d["gamma"], dtype=float), float(d["threshold"]),
                   CovariateSchema.from_dict(d["schema"]), tuple(d["log_cols"]),
                   int(d.get("n_exceed", 0)), float(d.get("loglik", float("nan"))))


def pareto_design(y, z, schema: CovariateSchema, log_cols) -> np.ndarray:
    ly = np.log(np.asarray(y, dtype=float).reshape(-1))
    z = np.asarray(z, dtype=float).reshape(len(ly), len(schema))
    mask = np.asarray(log_cols, dtype=bool).reshape(len(schema))
    w = z.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        w[:, mask] = np.log(z[:, mask])
    return design_rows(ly, w, schema)


def gpd_logpdf(excess, sigma, xi):
    """Generalized Pareto log-density of ``excess >= 0``; -inf outside support."""
    excess = np.asarray(excess, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    s = excess / sigma
    if abs(xi) < 1e-12:
        return -np.log(sigma) - s
    arg = 1.0 + xi * s
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -np.log(sigma) - (1.0 / xi + 1.0) * np.log1p(xi * s)
    return np.where(arg > 0, out, -np.inf)


def _indicator_columns(z: np.ndarray) -> np.ndarray:
    return np.all((z == 0) | (z == 1), axis=0)


def fit_pareto_arrays(x, y, z, schema: CovariateSchema, threshold: float = 12.0,
                      seed: int = 0, n_restarts: int = 3) -> ParetoFit:
    """Maximum-likelihood GPD fit on records with ``x > threshold``.

    Nelder-Mead from a zero start, then ``n_restarts`` seeded random starts;
    each run is restarted from its own optimum until the log-likelihood
    improves by less than 1e-8. Columns are standardized internally and the
    coefficients mapped back afterwards.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float).reshape(len(x), len(schema))
    keep = x > threshold
    if keep.sum() < PARETO_MIN_EXCEEDANCES:
        raise InsufficientExceedances(f"{int(keep.sum())} exceedances of {threshold}; need {PARETO_MIN_EXCEEDANCES}")
    x, y, z = x[keep], y[keep], z[keep]
    log_cols = tuple(bool(b) for b in ~_indicator_columns(z)) if len(schema) else ()
    if np.any(y <= 0) or np.any(z[:, np.array(log_cols, dtype=bool)] <= 0):
        raise DataError("Pareto model log-transforms y and continuous covariates; values must be positive")
    design = pareto_design(y, z, schema, log_cols)
    center = design.mean(axis=0)
    scale = design.std(axis=0)
    center[0], scale[0] = 0.0, 1.0
    const = scale < 1e-12
    scale[const] = 1.0
    center[const] = 0.0
    std_design = (design - center) / scale
    excess = x - threshold

    def nll(params):
        xi = math.exp(params[0]) - 0.5
        if not xi < 1.0:
            return np.inf
        log_sigma = std_design @ params[1:]
        if np.any(log_sigma > 700):
            return np.inf
        ll = gpd_logpdf(excess, np.exp(log_sigma), xi).sum()
        return -ll if np.isfinite(ll) else np.inf

    opts = {"maxiter": 20000, "maxfev": 20000, "fatol": 1e-10, "xatol": 1e-8}

    def run(start):
        # simplex vertices outside the support evaluate to inf
        with np.errstate(invalid="ignore"):
            best = minimize(nll, start, method="Nelder-Mead", options=opts)
            for _ in range(50):
                nxt = minimize(nll, best.x, method="Nelder-Mead", options=opts)
                if not np.isfinite(nxt.fun):
                    break
                improved = best.fun - nxt.fun
                if nxt.fun < best.fun:
                    best = nxt
                if not improved >= 1e-8:
                    break
        return best

    rng = np.random.default_rng(seed)
    dim = design.shape[1] + 1
    best = run(np.zeros(dim))
    for _ in range(n_restarts):
        cand = run(rng.normal(0.0, 0.5, dim))
        if cand.fun < best.fun:
            best = cand
    if not np.isfinite(best.fun):
        raise FitDiverged("Pareto likelihood is non-finite at every start")
    b = best.x[1:] / scale
    b[0] = best.x[1] - np.sum(best.x[1:] * center / scale)
    gamma = np.concatenate([[best.x[0]], b])
    return ParetoFit(gamma, float(threshold), schema, log_cols, int(keep.sum()), float(-best.fun))


def fit_pareto(panel: PanelDataset, layout: NetworkLayout, window, schema: CovariateSchema,
               threshold: float = 12.0, seed: int = 0) -> ParetoFit:
    rec = collocated_records(panel, layout, window, schema)
    return fit_pareto_arrays(rec.x_ref, rec.y, rec.covariate_matrix(schema.names), schema, threshold, seed)


def predict_pareto(fit: ParetoFit, y, z) -> np.ndarray:
    """Exceedance mean ``threshold + sigma / (1 - xi)`` where ``y > threshold``; ``y`` elsewhere."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z = np.asarray(z, dtype=float).reshape(len(y), len(fit.schema))
    out = y.copy()
    above = y > fit.threshold
    if np.any(above):
        out[above] = fit.threshold + fit.sigma(y[above], z[above]) / (1.0 - fit.xi)
    return out


# ----------------------------------------------------------------------------
# training without collocated sites


def krige_lowcost_to_reference(locs_b, y_b, locs_c, family, nugget_on: bool = True) -> np.ndarray:
    """Kriging prediction of the low-cost field at reference locations.

    Fits a constant-mean stationary GP to ``y_b`` by maximum likelihood and
    returns its conditional mean at ``locs_c``.
    """
    from .covariance import condition_gaussian
    from .gp_filter import mle_spatial_params

    try:
        params = mle_spatial_params(y_b, locs_b, family, nugget_on=nugget_on)
    except MleNotConverged as exc:
        warnings.warn(f"kriging y: {exc}; using best point", MleWarning, stacklevel=2)
        params = exc.best
    return condition_gaussian(params.kernel, params.mu, locs_c, locs_b, y_b).mean


def fit_obs_no_collocation(panel: PanelDataset, layout: NetworkLayout, window, schema: CovariateSchema,
                           kernel_for_y) -> ObsModelFit:
    """Observation model trained on kriged low-cost values at reference-only sites.

    For each training time, ``y`` is kriged from the B-sites to every C-site
    with a per-time MLE kernel of ``kernel_for_y.family`` (nugget fitted when
    ``kernel_for_y.nugget > 0``); the kriged values and the observed
    reference values are then used as collocated pairs.
    """
    c_ids = layout.ids(SiteRole.REFERENCE)
    if not c_ids:
        raise NoReferenceData("no reference-only sites to train against")
    sub = panel.in_window(window) if window is not None else panel
    z_all = sub.covariate_matrix(schema.names)
    roles = np.array([layout.role_of(s).value for s in sub.site_id])
    xs, ys, zs = [], [], []
    for t in np.unique(sub.t):
        at = sub.t == t
        b = at & (roles == "B") & ~np.isnan(sub.y) & np.all(np.isfinite(z_all), axis=1)
        c = at & (roles == "C") & ~np.isnan(sub.x_ref) & np.all(np.isfinite(z_all), axis=1)
        if b.sum() < 3 or c.sum() == 0:
            continue
        locs_b = layout.coords(sub.site_id[b])
        locs_c = layout.coords(sub.site_id[c])
        y_hat = krige_lowcost_to_reference(locs_b, sub.y[b], locs_c, kernel_for_y.family,
                                           nugget_on=kernel_for_y.nugget > 0)
        xs.append(sub.x_ref[c])
        ys.append(y_hat)
        zs.append(z_all[c])
    if not xs:
        raise NoReferenceData("no training time with reference-only data and at least 3 low-cost readings")
    return fit_inverse_arrays(np.concatenate(xs), np.concatenate(ys), np.vstack(zs), schema, window)

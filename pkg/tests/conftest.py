import os
import sys
from importlib import resources

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lcsfilter.calib_models import CovariateSchema, ObsModelFit
from lcsfilter.covariance import KernelFamily, KernelSpec, cov_matrix
from lcsfilter.geo_core import TimeSlice

settings.register_profile(
    "default", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FAMILIES = list(KernelFamily)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_paths():
    base = resources.files("lcsfilter") / "data"
    return {k: str(base / f"toy_{k}.csv") for k in ("network", "observations", "truth")}


def spread_locs(rng, n, min_sep=0.05):
    """``n`` points on the unit square with pairwise separation >= ``min_sep``."""
    out = []
    while len(out) < n:
        p = rng.uniform(0.0, 1.0, 2)
        if all(np.hypot(*(p - q)) >= min_sep for q in out):
            out.append(p)
    return np.array(out)


def random_instance(rng, n_ac, n_b, family=KernelFamily.EXPONENTIAL, nugget=0.0, n_cov=1):
    """A random time slice, observation model and kernel."""
    locs = spread_locs(rng, n_ac + n_b)
    spec = KernelSpec(family, rng.uniform(2.0, 20.0), rng.uniform(1.0, 6.0), nugget)
    names = tuple(f"z{i}" for i in range(n_cov))
    schema = CovariateSchema(names)
    fit = ObsModelFit(
        beta0=rng.normal(2.0, 1.0), beta1=rng.uniform(0.8, 2.5),
        beta2=rng.normal(0.0, 0.1, n_cov), beta3=rng.normal(0.0, 0.05, n_cov),
        tau2=rng.uniform(0.5, 3.0), schema=schema,
    )
    z_b = rng.uniform(0.0, 2.0, (n_b, n_cov))
    x_ac = rng.normal(7.0, 3.0, n_ac)
    y_b = rng.normal(15.0, 5.0, n_b)
    slc = TimeSlice(
        t=0, ids_ac=tuple(f"R{i}" for i in range(n_ac)), locs_ac=locs[:n_ac], x_ac=x_ac,
        ids_b=tuple(f"B{i}" for i in range(n_b)), locs_b=locs[n_ac:], y_b=y_b, z_b=z_b,
        covariate_names=names,
    )
    return slc, fit, spec, rng.normal(7.0, 1.0)


def joint_oracle(slc, fit, spec, mu):
    """Posterior mean and covariance of x_B by one dense conditioning of the
    unconditional joint Gaussian of (x_AC, x_B, y_B) on (x_AC, y_B)."""
    n_ac, n_b = slc.n_ac, slc.n_b
    locs = np.vstack([slc.locs_ac, slc.locs_b])
    c = cov_matrix(spec, locs)
    h = np.diag(fit.gain(slc.z_b))
    off = fit.offset(slc.z_b)
    n = n_ac + 2 * n_b
    joint = np.zeros((n, n))
    joint[: n_ac + n_b, : n_ac + n_b] = c
    c_xb = c[:, n_ac:]  # Cov((x_AC, x_B), x_B)
    joint[: n_ac + n_b, n_ac + n_b:] = c_xb @ h
    joint[n_ac + n_b:, : n_ac + n_b] = (c_xb @ h).T
    joint[n_ac + n_b:, n_ac + n_b:] = h @ c[n_ac:, n_ac:] @ h + fit.tau2 * np.eye(n_b)
    mean = np.concatenate([np.full(n_ac + n_b, mu), off + h @ np.full(n_b, mu)])
    obs = np.r_[np.arange(n_ac), np.arange(n_ac + n_b, n)]
    tgt = np.arange(n_ac, n_ac + n_b)
    s_oo = joint[np.ix_(obs, obs)]
    s_to = joint[np.ix_(tgt, obs)]
    inv = np.linalg.inv(s_oo)
    vals = np.concatenate([slc.x_ac, slc.y_b])
    m = mean[tgt] + s_to @ inv @ (vals - mean[obs])
    v = joint[np.ix_(tgt, tgt)] - s_to @ inv @ s_to.T
    return m, v


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    reports = [r for key in ("passed", "failed", "error") for r in terminalreporter.stats.get(key, [])
               if "test_acceptance" in getattr(r, "nodeid", "")]
    if not reports:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, 11):
        if k in mod.RESULTS:
            line = mod.RESULTS[k]
        elif any(f"::test_{k}_" in r.nodeid for r in reports):
            line = f"criterion {k:2d} [FAIL] errored before its check"
        else:
            line = f"criterion {k:2d} [----] not run"
        terminalreporter.write_line(line)

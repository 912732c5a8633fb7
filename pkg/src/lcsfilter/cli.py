"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Settings resolve as defaults < environment (``LCSFILTER_THREADS``,
``LCSFILTER_SEED``) < command-line flags < ``--config`` JSON.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import fields

import numpy as np
from scipy.spatial.distance import pdist

from . import calib_models as cm
from . import cli_io as cio
from . import sim_bench as sb
from .bayes_filter import McmcConfig, grid_posterior, mcmc_filter_series, summarize_posterior
from .covariance import KernelSpec, variogram_from_pairs
from .errors import CalibrationError, DataError, NoReferenceData, NumericalError
from .geo_core import SiteRole, build_time_slice
from .gp_filter import FilterConfig, filter_time_point, pooled_phi, predict_grid, z_quantile

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _csv_list(text):
    return tuple(s.strip() for s in text.split(",") if s.strip()) if text else ()


def _common(p: argparse.ArgumentParser, *, data=True, model=False, grid=False):
    g = p.add_argument_group("run settings")
    if data:
        g.add_argument("--network", help="network CSV (site_id,x,y,role)")
        g.add_argument("--observations", help="observations CSV (site_id,t,y,x_ref,<covariates>)")
        g.add_argument("--covariates", type=_csv_list, help="comma-separated covariate columns")
        g.add_argument("--no-interact", type=_csv_list, default=None,
                       help="covariates that enter without an interaction term")
        g.add_argument("--window", help="half-open time window t0:t1")
    if model:
        g.add_argument("--model", help="model JSON")
    if grid:
        g.add_argument("--grid", help="grid CSV (x,y)")
    g.add_argument("--output", "-o", help="output path (default: standard output)")
    g.add_argument("--family", choices=["exponential", "matern32", "sqexp"])
    g.add_argument("--nugget", action="store_true", default=None, help="fit a nugget")
    g.add_argument("--fix-phi", action="store_true", default=None,
                   help="hold the decay at the median of per-time MLEs")
    g.add_argument("--method", choices=list(cio.METHODS))
    g.add_argument("--mcmc-iter", type=int)
    g.add_argument("--mcmc-burn", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--threshold", type=float)
    g.add_argument("--level", type=float)
    g.add_argument("--threads", type=int)
    g.add_argument("--config", help="JSON RunConfig; its keys supersede flags")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lcsfilter", description="Calibrate low-cost sensor networks with a spatial GP filter.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    for name, help_ in (("fit-obs", "fit the inverse-regression observation model"),
                        ("fit-regcal", "fit the forward regression calibration"),
                        ("fit-pareto", "fit the generalized Pareto exceedance model")):
        s = sub.add_parser(name, help=help_)
        _common(s)
        if name == "fit-obs":
            s.add_argument("--no-collocation", action="store_true",
                           help="train on low-cost values kriged to reference-only sites")

    s = sub.add_parser("calibrate", help="calibrate low-cost readings")
    _common(s, model=True)
    s = sub.add_parser("predict-grid", help="predict the field at grid points")
    _common(s, model=True, grid=True)

    s = sub.add_parser("simulate", help="run a simulation scenario and write metrics")
    s.add_argument("--scenario", default="1a", choices=list(sb.SCENARIOS) + ["nocolloc"])
    s.add_argument("--profile", default="desk", choices=["desk", "full", "smoke"])
    s.add_argument("--sigma2", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--replicates", type=int)
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--methods", type=_csv_list, default=("regcal", "inverse", "pareto", "gpfilter"))
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--output", "-o")
    s.add_argument("--predictions", help="also write per-time predictions to this CSV")

    s = sub.add_parser("metrics", help="score a predictions CSV against truth")
    s.add_argument("--predictions", required=True)
    s.add_argument("--truth", required=True, help="CSV site_id,t,x")
    s.add_argument("--network", help="network CSV, for RMSE by distance to the nearest reference")
    s.add_argument("--threshold", type=float, default=12.0)
    s.add_argument("--output", "-o")

    s = sub.add_parser("variogram", help="binned empirical semivariogram")
    _common(s)
    s.add_argument("--field", choices=["x_ref", "y"], default="x_ref")
    s.add_argument("--t", type=int, help="single time index (default: pool all times in window)")
    s.add_argument("--bins", type=int, default=10)
    return p


def resolve_config(args) -> cio.RunConfig:
    vals = cio.env_overrides()
    names = {f.name for f in fields(cio.RunConfig)}
    for key, v in vars(args).items():
        if key in names and v is not None:
            vals[key] = v
    if getattr(args, "no_interact", None) is not None and getattr(args, "covariates", None):
        vals["interacts"] = tuple(c not in args.no_interact for c in args.covariates)
    vals.pop("config", None)
    cfg = cio.RunConfig(**vals)
    if getattr(args, "config", None):
        cfg = cio.RunConfig.from_json(args.config, cfg)
    return cfg


def _need(cfg, *names):
    missing = [n for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        raise _UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _load_data(cfg, schema_names=None):
    _need(cfg, "network", "observations")
    layout = cio.read_network_csv(cfg.network)
    panel = cio.read_observations_csv(cfg.observations, schema_names, layout)
    return layout, panel


# ----------------------------------------------------------------------------
# subcommands


def cmd_fit(cfg, args) -> int:
    _need(cfg, "output")
    layout, panel = _load_data(cfg, cfg.covariates)
    schema = cfg.schema
    if args.command == "fit-pareto":
        model = cm.fit_pareto(panel, layout, cfg.window, schema, cfg.threshold, cfg.seed)
    elif getattr(args, "no_collocation", False):
        model = cm.fit_obs_no_collocation(panel, layout, cfg.window, schema,
                                          KernelSpec(cfg.family, 1.0, 1.0, 1.0))
    elif args.command == "fit-obs":
        model = cm.fit_inverse_regression(panel, layout, cfg.window, schema)
    else:
        model = cm.fit_regression_calibration(panel, layout, cfg.window, schema)
    cio.save_model(cfg.output, model)
    return EXIT_OK


def _times(panel, window):
    times = panel.times()
    if window is not None:
        times = times[(times >= window[0]) & (times < window[1])]
    if len(times) == 0:
        raise DataError("no time points in window")
    return times


def _filter_config(cfg, model, slices) -> FilterConfig:
    fconf = FilterConfig(family=cfg.family, nugget=cfg.nugget, level=cfg.level)
    if cfg.fix_phi:
        fconf = FilterConfig(family=cfg.family, nugget=cfg.nugget, level=cfg.level,
                             phi_fixed=pooled_phi(slices, model, fconf))
    return fconf


def _slices(panel, layout, times, names):
    out = []
    for t in times:
        try:
            slc = build_time_slice(panel, layout, int(t), names)
        except NoReferenceData:
            warnings.warn(f"t={t}: no reference values, time point skipped", stacklevel=2)
            continue
        if slc.n_b:
            out.append(slc)
    return out


def _filter_results(cfg, model, slices):
    """``(slice, FilterResult, draws-or-None)`` per time point."""
    fconf = _filter_config(cfg, model, slices)
    if cfg.method == "gpfilter-bayes":
        mc = McmcConfig(n_iter=cfg.mcmc_iter, n_burn=cfg.mcmc_burn, seed=cfg.seed)
        draws = mcmc_filter_series(model, slices, None, mc, fconf, cfg.threads)
        return [(s, summarize_posterior(d, cfg.level), d) for s, d in zip(slices, draws)], fconf
    return [(s, filter_time_point(model, s, fconf), None) for s in slices], fconf


def _expect_kind(model, kind):
    if model.kind != kind:
        raise DataError(f"method needs a {kind!r} model, got {model.kind!r}")


def cmd_calibrate(cfg, args) -> int:
    _need(cfg, "model")
    model = cio.load_model(cfg.model)
    names = model.schema.names
    layout, panel = _load_data(cfg, names)
    times = _times(panel, cfg.window)
    in_t = np.isin(panel.t, times)
    roles = np.array([layout.role_of(s).value for s in panel.site_id])
    rows = []
    ref = in_t & np.isin(roles, ["A", "C"]) & ~np.isnan(panel.x_ref)
    for i in np.flatnonzero(ref):
        x = panel.x_ref[i]
        rows.append((panel.site_id[i], int(panel.t[i]), x, 0.0, x, x, "reference"))
    zq = z_quantile(cfg.level)
    if cfg.method in ("regcal", "inverse", "pareto"):
        kind = {"regcal": "regcal", "inverse": "inverse", "pareto": "pareto"}[cfg.method]
        _expect_kind(model, kind)
        z = panel.covariate_matrix(names)
        sel = in_t & (roles == "B") & ~np.isnan(panel.y)
        complete = np.all(np.isfinite(z), axis=1)
        if np.any(sel & ~complete):
            warnings.warn(f"dropping {int((sel & ~complete).sum())} low-cost records with missing covariates",
                          stacklevel=2)
        sel &= complete
        y, zs = panel.y[sel], z[sel]
        flags = np.full(sel.sum(), "ok", dtype=object)
        sd = np.full(sel.sum(), np.nan)
        if cfg.method == "regcal":
            xhat, var = cm.predict_regcal(model, y, zs)
            sd = np.sqrt(var)
        elif cfg.method == "inverse":
            xhat, unstable = cm.invert_prediction(model, y, zs)
            flags[unstable] = "unstable"
        else:
            xhat = cm.predict_pareto(model, y, zs)
        for j, i in enumerate(np.flatnonzero(sel)):
            rows.append((panel.site_id[i], int(panel.t[i]), xhat[j], sd[j],
                         xhat[j] - zq * sd[j], xhat[j] + zq * sd[j], flags[j]))
    else:
        _expect_kind(model, "inverse")
        slices = _slices(panel, layout, times, names)
        results, _ = _filter_results(cfg, model, slices)
        for slc, res, draws in results:
            mixing = draws is not None and draws.diagnostics.get("mixing_warning")
            for j, sid in enumerate(slc.ids_b):
                flag = "unstable" if res.unstable[j] else ("mixing" if mixing else "ok")
                rows.append((sid, slc.t, res.x_update[j], res.sd[j], res.lower[j], res.upper[j], flag))
    rows.sort(key=lambda r: (r[1], str(r[0])))
    cio.write_predictions_csv(cfg.output, rows)
    return EXIT_OK


def cmd_predict_grid(cfg, args) -> int:
    _need(cfg, "model", "grid")
    if cfg.method not in ("gpfilter-freq", "gpfilter-bayes"):
        raise _UsageError("predict-grid needs --method gpfilter-freq or gpfilter-bayes")
    model = cio.load_model(cfg.model)
    _expect_kind(model, "inverse")
    layout, panel = _load_data(cfg, model.schema.names)
    grid = cio.read_grid_csv(cfg.grid)
    slices = _slices(panel, layout, _times(panel, cfg.window), model.schema.names)
    results, _ = _filter_results(cfg, model, slices)
    zq = z_quantile(cfg.level)
    rows = []
    for slc, res, draws in results:
        if draws is None:
            mean, var = predict_grid(res, slc, grid)
            sd = np.sqrt(var)
            lo, hi = mean - zq * sd, mean + zq * sd
        else:
            gp = grid_posterior(draws, slc, grid, cfg.level, seed=cfg.seed + slc.t)
            mean, sd, lo, hi = gp.mean, np.sqrt(gp.var), gp.lower, gp.upper
        for k, (gx, gy) in enumerate(grid):
            rows.append((gx, gy, slc.t, mean[k], sd[k], lo[k], hi[k]))
    cio.write_rows(cfg.output, cio.GRID_OUT_HEADER, rows)
    return EXIT_OK


def cmd_simulate(args) -> int:
    env = cio.env_overrides()
    seed = args.seed if args.seed is not None else env.get("seed", 0)
    threads = args.threads if args.threads is not None else env.get("threads", 1)
    over = {"seed": seed}
    for key, attr in (("sigma2", "sigma2"), ("gamma", "gamma"), ("n_replicates", "replicates"),
                      ("n_train", "n_train"), ("n_test", "n_test")):
        v = getattr(args, attr)
        if v is not None:
            over[key] = v
    if args.scenario == "nocolloc":
        cfg = sb.ScenarioConfig.profile(args.profile, scenario="1a", **over)
        reps = sb.run_no_collocation(cfg, threads)
        rows = []
        for i, r in enumerate(reps):
            base = {"scenario": "nocolloc", "sigma2": cfg.sigma2, "gamma": "", "mc_se": ""}
            for name, v in (("beta1_colloc", r.beta1_colloc), ("beta1_nocolloc", r.beta1_nocolloc),
                            ("gain_colloc", r.gain_colloc), ("gain_nocolloc", r.gain_nocolloc)):
                rows.append({**base, "method": f"replicate{i}", "metric": name, "value": v})
            for label, v in r.rmse.items():
                rows.append({**base, "method": f"{label}#replicate{i}", "metric": "rmse_overall", "value": v})
    else:
        for m in args.methods:
            if m not in sb.METHODS:
                raise _UsageError(f"unknown method {m!r}; choose from {', '.join(sb.METHODS)}")
        cfg = sb.ScenarioConfig.profile(args.profile, scenario=args.scenario, **over)
        result = sb.run_scenario(cfg, args.methods, threads, keep_predictions=bool(args.predictions))
        if args.predictions:
            cio.write_rows(args.predictions,
                           ("replicate", "method", "t", "site", "truth", "pred", "lower", "upper"),
                           result.predictions)
        for rep, msg in result.failures:
            print(f"replicate {rep} failed: {msg}", file=sys.stderr)
        rows = sb.metrics_rows(result)
    header = ("scenario", "method", "sigma2", "gamma", "metric", "value", "mc_se")
    cio.write_rows(args.output, header, ([r[h] for h in header] for r in rows))
    return EXIT_OK


def cmd_metrics(args) -> int:
    pred = cio.read_predictions_csv(args.predictions)
    truth = cio.read_truth_csv(args.truth)
    keep = [i for i, f in enumerate(pred.flag) if f != "reference"]
    pairs = [(i, truth.get((pred.site_id[i], int(pred.t[i])))) for i in keep]
    pairs = [(i, x) for i, x in pairs if x is not None and np.isfinite(x)]
    if not pairs:
        raise DataError("no prediction rows match the truth file")
    idx = np.array([i for i, _ in pairs])
    x = np.array([v for _, v in pairs])
    dist = None
    if args.network:
        layout = cio.read_network_csv(args.network)
        refs = layout.coords(layout.ids(SiteRole.COLLOCATED, SiteRole.REFERENCE))
        locs = layout.coords([pred.site_id[i] for i in idx])
        dist = np.sqrt(((locs[:, None, :] - refs[None, :, :]) ** 2).sum(-1)).min(axis=1)
    lo, hi = pred.lower[idx], pred.upper[idx]
    has_int = np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))
    rep = sb.compute_metrics(pred.xhat[idx], x, args.threshold, lo if has_int else None,
                             hi if has_int else None, dist)
    rows = [(k, v) for k, v in rep.scalars().items() if k != "runtime"]
    rows.append(("n", rep.n))
    cio.write_rows(args.output, ("metric", "value"), rows)
    return EXIT_OK


def cmd_variogram(cfg, args) -> int:
    layout, panel = _load_data(cfg, cfg.covariates or None)
    vals_all = panel.x_ref if args.field == "x_ref" else panel.y
    times = [args.t] if args.t is not None else list(_times(panel, cfg.window))
    ds, sqs = [], []
    for t in times:
        at = (panel.t == t) & ~np.isnan(vals_all)
        if at.sum() < 2:
            continue
        locs = layout.coords(panel.site_id[at])
        v = vals_all[at]
        iu = np.triu_indices(len(v), k=1)
        ds.append(pdist(locs))
        sqs.append((v[iu[0]] - v[iu[1]]) ** 2)
    if not ds:
        raise DataError(f"no time point has two sites with {args.field}")
    bins = variogram_from_pairs(np.concatenate(ds), np.concatenate(sqs), args.bins)
    cio.write_rows(cfg.output, ("distance", "semivariance", "count"), bins)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            if args.command == "simulate":
                return cmd_simulate(args)
            if args.command == "metrics":
                return cmd_metrics(args)
            cfg = resolve_config(args)
            if args.command.startswith("fit-"):
                return cmd_fit(cfg, args)
            if args.command == "calibrate":
                return cmd_calibrate(cfg, args)
            if args.command == "predict-grid":
                return cmd_predict_grid(cfg, args)
            return cmd_variogram(cfg, args)
    except _UsageError as exc:
        print(f"lcsfilter: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"lcsfilter: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CalibrationError, OSError, ValueError) as exc:
        print(f"lcsfilter: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

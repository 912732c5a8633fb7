"""File formats and run configuration.

CSV layouts
-----------
network        ``site_id,x,y,role``
observations   ``site_id,t,y,x_ref,<covariates...>`` (empty cell = absent)
grid           ``x,y``
predictions    ``site_id,t,xhat,sd,lower,upper,flag``
grid output    ``x,y,t,mean,sd,lower,upper``
truth          ``site_id,t,x``

Floats are written with 17 significant digits so files round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .calib_models import CovariateSchema, ObsModelFit, ParetoFit, RegCalFit
from .errors import DataError
from .geo_core import NetworkLayout, PanelDataset

NETWORK_HEADER = ("site_id", "x", "y", "role")
OBS_FIXED = ("site_id", "t", "y", "x_ref")
PREDICTION_HEADER = ("site_id", "t", "xhat", "sd", "lower", "upper", "flag")
GRID_OUT_HEADER = ("x", "y", "t", "mean", "sd", "lower", "upper")
METHODS = ("regcal", "inverse", "gpfilter-freq", "gpfilter-bayes", "pareto")
ENV_THREADS = "LCSFILTER_THREADS"
ENV_SEED = "LCSFILTER_SEED"


def fmt(v) -> str:
    """17-significant-digit float, empty for NaN/None."""
    if v is None:
        return ""
    if isinstance(v, (str, bool)):
        return str(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return ""
    return format(v, ".17g")


def _open_read(path):
    # newline="" lets csv handle LF and CRLF alike; utf-8-sig drops a BOM
    return open(path, "r", encoding="utf-8-sig", newline="")


def _open_write(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8", newline="")


def _float(cell: str, line: int, col: str) -> float:
    cell = cell.strip()
    if cell == "":
        return float("nan")
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"line {line}: non-numeric {col} {cell!r}") from None


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write a CSV; ``path`` of ``None`` or ``"-"`` means standard output."""
    if path in (None, "-"):
        _write(sys.stdout, header, rows)
        return
    with _open_write(path) as fh:
        _write(fh, header, rows)


def _write(fh, header, rows):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])


def read_rows(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    """Header and ``(line_number, cells)`` pairs, blank lines skipped."""
    with _open_read(path) as fh:
        reader = csv.reader(fh)
        header = None
        rows = []
        for row in reader:
            if not row or all(c.strip() == "" for c in row):
                continue
            if header is None:
                header = [c.strip() for c in row]
                continue
            rows.append((reader.line_num, row))
    if header is None:
        raise DataError(f"{path}: empty file")
    return header, rows


# ----------------------------------------------------------------------------
# network


def read_network_csv(path) -> NetworkLayout:
    try:
        header, rows = read_rows(path)
    except DataError:
        raise DataError(f"{path}: no sites") from None
    if tuple(header) != NETWORK_HEADER:
        raise DataError(f"{path}: header must be {','.join(NETWORK_HEADER)}, got {','.join(header)}")
    if not rows:
        raise DataError(f"{path}: no sites")
    ids, coords, roles = [], [], []
    seen = set()
    for line, r in rows:
        if len(r) != 4:
            raise DataError(f"{path} line {line}: expected 4 fields, got {len(r)}")
        sid = r[0].strip()
        if sid in seen:
            raise DataError(f"{path} line {line}: duplicate site_id {sid!r}")
        seen.add(sid)
        x, y = _float(r[1], line, "x"), _float(r[2], line, "y")
        if not (math.isfinite(x) and math.isfinite(y)):
            raise DataError(f"{path} line {line}: missing coordinate")
        role = r[3].strip().upper()
        if role not in ("A", "B", "C", "D"):
            raise DataError(f"{path} line {line}: unknown role {r[3]!r}")
        ids.append(sid)
        coords.append((x, y))
        roles.append(role)
    return NetworkLayout.from_arrays(ids, coords, roles)


def write_network_csv(path, layout: NetworkLayout) -> None:
    write_rows(path, NETWORK_HEADER,
               ((s.site_id, s.location.x, s.location.y, s.role.value) for s in layout.sites))


# ----------------------------------------------------------------------------
# observations


def read_observations_csv(path, schema: CovariateSchema | Sequence[str] | None = None,
                          layout: NetworkLayout | None = None) -> PanelDataset:
    """Parse an observations file.

    ``schema`` names the covariate columns to expect; ``None`` takes every
    column after ``x_ref``. When ``layout`` is given the role rules are
    checked.
    """
    header, rows = read_rows(path)
    if tuple(header[:4]) != OBS_FIXED:
        raise DataError(f"{path}: header must start with {','.join(OBS_FIXED)}")
    cov_cols = header[4:]
    if schema is not None:
        names = tuple(schema.names if isinstance(schema, CovariateSchema) else schema)
        missing = [n for n in names if n not in cov_cols]
        if missing:
            raise DataError(f"{path}: covariate columns missing: {', '.join(missing)}")
    else:
        names = tuple(cov_cols)
    col_idx = [4 + cov_cols.index(n) for n in names]
    sid, t, y, xr, z = [], [], [], [], []
    for line, r in rows:
        if len(r) != len(header):
            raise DataError(f"{path} line {line}: expected {len(header)} fields, got {len(r)}")
        sid.append(r[0].strip())
        tv = r[1].strip()
        try:
            t.append(int(tv))
        except ValueError:
            raise DataError(f"{path} line {line}: non-integer t {tv!r}") from None
        y.append(_float(r[2], line, "y"))
        xr.append(_float(r[3], line, "x_ref"))
        z.append([_float(r[j], line, header[j]) for j in col_idx])
    panel = PanelDataset(sid, np.array(t, dtype=np.int64), y, xr,
                         np.array(z, dtype=float).reshape(len(sid), len(names)), names)
    if layout is not None:
        panel.validate(layout)
    return panel


def write_observations_csv(path, panel: PanelDataset) -> None:
    header = OBS_FIXED + panel.covariate_names
    rows = (
        [panel.site_id[i], int(panel.t[i]), panel.y[i], panel.x_ref[i], *panel.covariates[i]]
        for i in range(len(panel))
    )
    write_rows(path, header, rows)


# ----------------------------------------------------------------------------
# grids, predictions, truth


def read_grid_csv(path) -> np.ndarray:
    header, rows = read_rows(path)
    if tuple(header[:2]) != ("x", "y"):
        raise DataError(f"{path}: header must start with x,y")
    out = [(_float(r[0], line, "x"), _float(r[1], line, "y")) for line, r in rows]
    if not out:
        raise DataError(f"{path}: grid is empty")
    arr = np.array(out, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: missing grid coordinate")
    return arr


def write_grid_csv(path, locs) -> None:
    write_rows(path, ("x", "y"), np.asarray(locs, dtype=float).reshape(-1, 2).tolist())


@dataclass
class Predictions:
    site_id: list
    t: np.ndarray
    xhat: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    flag: list


def write_predictions_csv(path, rows: Iterable[Sequence]) -> None:
    write_rows(path, PREDICTION_HEADER, rows)


def read_predictions_csv(path) -> Predictions:
    header, rows = read_rows(path)
    if tuple(header) != PREDICTION_HEADER:
        raise DataError(f"{path}: header must be {','.join(PREDICTION_HEADER)}")
    cols = list(zip(*[r for _, r in rows])) if rows else [()] * 7
    num = [np.array([_float(c, i + 2, "value") for i, c in enumerate(col)]) for col in cols[2:6]]
    return Predictions(list(cols[0]), np.array([int(v) for v in cols[1]], dtype=np.int64), *num, list(cols[6]))


def read_truth_csv(path) -> dict:
    """Mapping ``(site_id, t) -> x``."""
    header, rows = read_rows(path)
    if tuple(header[:3]) != ("site_id", "t", "x"):
        raise DataError(f"{path}: header must be site_id,t,x")
    return {(r[0].strip(), int(r[1])): _float(r[2], line, "x") for line, r in rows}


# ----------------------------------------------------------------------------
# models


def save_model(path, model) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path):
    """Read a model JSON and return the fit object matching its ``kind``."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    kinds = {"inverse": ObsModelFit, "regcal": RegCalFit, "pareto": ParetoFit}
    try:
        cls = kinds[d.get("kind")]
    except KeyError:
        raise DataError(f"{path}: unknown model kind {d.get('kind')!r}") from None
    return cls.from_dict(d)


# ----------------------------------------------------------------------------
# run configuration


def parse_window(text) -> tuple[int, int] | None:
    """``"t0:t1"`` -> ``(t0, t1)``, half-open."""
    if text is None or text == "":
        return None
    if isinstance(text, (list, tuple)):
        t0, t1 = int(text[0]), int(text[1])
    else:
        try:
            a, b = str(text).split(":")
            t0, t1 = int(a), int(b)
        except ValueError:
            raise DataError(f"window must look like t0:t1, got {text!r}") from None
    if t1 <= t0:
        raise DataError(f"empty window [{t0}, {t1})")
    return t0, t1


@dataclass
class RunConfig:
    network: str | None = None
    observations: str | None = None
    model: str | None = None
    grid: str | None = None
    output: str | None = None
    family: str = "exponential"
    nugget: bool = False
    fix_phi: bool = False
    method: str = "gpfilter-freq"
    covariates: tuple = ()
    interacts: tuple | None = None
    window: tuple | None = None
    mcmc_iter: int = 4000
    mcmc_burn: int = 2000
    seed: int = 0
    threshold: float = 12.0
    threads: int = 1
    level: float = 0.95

    def __post_init__(self):
        if self.method not in METHODS:
            raise DataError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        self.window = parse_window(self.window)
        self.covariates = tuple(self.covariates or ())
        if self.interacts is not None:
            self.interacts = tuple(bool(b) for b in self.interacts)
        if self.threads < 1:
            raise DataError("threads must be >= 1")

    @property
    def schema(self) -> CovariateSchema:
        return CovariateSchema(self.covariates, self.interacts)

    @classmethod
    def from_json(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        """Load a JSON config; its keys supersede ``base``."""
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"{path}: unknown config keys {sorted(unknown)}")
        vals = asdict(base) if base is not None else {}
        vals.update(d)
        return cls(**vals)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def env_overrides() -> dict:
    """Thread count and seed from the environment, when set."""
    out = {}
    for key, name in ((ENV_THREADS, "threads"), (ENV_SEED, "seed")):
        v = os.environ.get(key)
        if v not in (None, ""):
            try:
                out[name] = int(v)
            except ValueError:
                raise DataError(f"{key} must be an integer, got {v!r}") from None
    return out


def write_draws_csv(path, draws) -> None:
    """Posterior draws in long format: ``draw,parameter,value``."""
    def rows():
        for k in range(draws.n_draws):
            yield k, "mu", draws.mu[k]
            yield k, "sigma2", draws.sigma2[k]
            yield k, "phi", draws.phi[k]
            yield k, "nugget", draws.nugget[k]
            for j, sid in enumerate(draws.ids_b):
                yield k, f"x[{sid}]", draws.x_b[k, j]
    write_rows(path, ("draw", "parameter", "value"), rows())

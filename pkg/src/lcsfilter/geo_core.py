"""Network geometry, observation panels and per-time cross-sections.

Sites carry one of four roles:

* ``A`` collocated: reference instrument plus low-cost sensor
* ``B`` low-cost sensor only
* ``C`` reference instrument only
* ``D`` prediction grid point, no instrument

Coordinates are planar; geographic inputs have to be projected first.
Time is an opaque integer index.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, NoReferenceData


class SiteRole(enum.Enum):
    COLLOCATED = "A"
    LOWCOST = "B"
    REFERENCE = "C"
    GRID = "D"

    @classmethod
    def parse(cls, code: str) -> "SiteRole":
        try:
            return cls(code.strip().upper())
        except ValueError:
            raise DataError(f"unknown role {code!r} (expected A, B, C or D)") from None

    @property
    def has_reference(self) -> bool:
        return self in (SiteRole.COLLOCATED, SiteRole.REFERENCE)

    @property
    def has_lowcost(self) -> bool:
        return self in (SiteRole.COLLOCATED, SiteRole.LOWCOST)


@dataclass(frozen=True)
class Location:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DataError(f"non-finite coordinate ({self.x}, {self.y})")


@dataclass(frozen=True)
class Site:
    site_id: str
    location: Location
    role: SiteRole


@dataclass(frozen=True)
class NetworkLayout:
    """Immutable set of sites with unique ids."""

    sites: tuple[Site, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sites = tuple(self.sites)
        object.__setattr__(self, "sites", sites)
        index = {}
        for i, s in enumerate(sites):
            if s.site_id in index:
                raise DataError(f"duplicate site_id {s.site_id!r}")
            index[s.site_id] = i
        object.__setattr__(self, "_index", index)
        # coincident A/B/C sites are ambiguous; collocated pairs must be one A site
        instrumented = [s for s in sites if s.role is not SiteRole.GRID]
        seen = {}
        for s in instrumented:
            key = (s.location.x, s.location.y)
            if key in seen:
                raise DataError(
                    f"sites {seen[key]!r} and {s.site_id!r} share a location; "
                    "represent a collocated pair as a single role-A site"
                )
            seen[key] = s.site_id

    @classmethod
    def from_arrays(cls, ids: Sequence[str], coords, roles: Sequence) -> "NetworkLayout":
        coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        if not (len(ids) == len(coords) == len(roles)):
            raise DataError("ids, coords and roles must have equal length")
        sites = []
        for sid, (cx, cy), r in zip(ids, coords, roles):
            role = r if isinstance(r, SiteRole) else SiteRole.parse(r)
            sites.append(Site(str(sid), Location(float(cx), float(cy)), role))
        return cls(tuple(sites))

    def __len__(self):
        return len(self.sites)

    def __contains__(self, site_id):
        return site_id in self._index

    def site(self, site_id: str) -> Site:
        try:
            return self.sites[self._index[site_id]]
        except KeyError:
            raise DataError(f"unknown site_id {site_id!r}") from None

    def role_of(self, site_id: str) -> SiteRole:
        return self.site(site_id).role

    def ids(self, *roles: SiteRole) -> list[str]:
        return [s.site_id for s in self.sites if not roles or s.role in roles]

    def coords(self, ids: Iterable[str] | None = None) -> np.ndarray:
        chosen = self.sites if ids is None else [self.site(i) for i in ids]
        return np.array([[s.location.x, s.location.y] for s in chosen], dtype=float).reshape(-1, 2)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class PanelDataset:
    """Column store of per-(site, time) records.

    ``y`` and ``x_ref`` use NaN for an absent reading. Covariates are held as
    an ``(n_records, n_covariates)`` matrix whose columns follow
    ``covariate_names``.
    """

    def __init__(self, site_id, t, y, x_ref, covariates, covariate_names=()):
        site_id = np.asarray(site_id, dtype=object).astype(str).astype(object)
        n = len(site_id)
        t_arr = np.asarray(t)
        if t_arr.size and not np.issubdtype(t_arr.dtype, np.integer):
            if not np.all(np.equal(np.mod(t_arr.astype(float), 1), 0)):
                raise DataError("time index must be integer")
        t_arr = t_arr.astype(np.int64).reshape(n)
        y = np.asarray(y, dtype=float).reshape(n)
        x_ref = np.asarray(x_ref, dtype=float).reshape(n)
        names = tuple(covariate_names)
        cov = np.asarray(covariates, dtype=float).reshape(n, len(names))
        if len(set(names)) != len(names):
            raise DataError("covariate names must be unique")
        keys = set(zip(site_id.tolist(), t_arr.tolist()))
        if len(keys) != n:
            raise DataError("(site_id, t) pairs must be unique")
        self.site_id = _readonly(site_id)
        self.t = _readonly(t_arr)
        self.y = _readonly(y)
        self.x_ref = _readonly(x_ref)
        self.covariates = _readonly(cov)
        self.covariate_names = names

    @classmethod
    def from_records(cls, records: Iterable[dict], covariate_names: Sequence[str]):
        """Build from dicts with keys ``site_id, t, y, x_ref`` plus covariates."""
        records = list(records)
        names = tuple(covariate_names)
        nan = float("nan")

        def val(r, k):
            v = r.get(k)
            return nan if v is None else float(v)

        return cls(
            [r["site_id"] for r in records],
            [r["t"] for r in records],
            [val(r, "y") for r in records],
            [val(r, "x_ref") for r in records],
            np.array([[val(r, c) for c in names] for r in records], dtype=float).reshape(len(records), len(names)),
            names,
        )

    def __len__(self):
        return len(self.site_id)

    def __eq__(self, other):
        if not isinstance(other, PanelDataset):
            return NotImplemented
        return (
            self.covariate_names == other.covariate_names
            and np.array_equal(self.site_id, other.site_id)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.y, other.y, equal_nan=True)
            and np.array_equal(self.x_ref, other.x_ref, equal_nan=True)
            and np.array_equal(self.covariates, other.covariates, equal_nan=True)
        )

    def __repr__(self):
        return f"PanelDataset(n={len(self)}, covariates={self.covariate_names})"

    def times(self) -> np.ndarray:
        return np.unique(self.t)

    def subset(self, mask) -> "PanelDataset":
        mask = np.asarray(mask)
        return PanelDataset(
            self.site_id[mask], self.t[mask], self.y[mask], self.x_ref[mask],
            self.covariates[mask], self.covariate_names,
        )

    def in_window(self, window: tuple[int, int]) -> "PanelDataset":
        """Records with ``t0 <= t < t1``."""
        t0, t1 = window
        if t1 <= t0:
            raise DataError(f"empty time window [{t0}, {t1})")
        return self.subset((self.t >= t0) & (self.t < t1))

    def covariate_matrix(self, names: Sequence[str]) -> np.ndarray:
        """Covariate columns reordered to ``names``."""
        try:
            cols = [self.covariate_names.index(n) for n in names]
        except ValueError as e:
            raise DataError(f"covariate missing from panel: {e}") from None
        return self.covariates[:, cols]

    def validate(self, layout: NetworkLayout) -> None:
        """Check role rules: B never carries x_ref, C never carries y."""
        for i, sid in enumerate(self.site_id):
            if sid not in layout:
                raise DataError(f"record {i}: site {sid!r} not in network")
            role = layout.role_of(sid)
            if role is SiteRole.LOWCOST and not np.isnan(self.x_ref[i]):
                raise DataError(f"record {i}: role-B site {sid!r} carries a reference value")
            if role is SiteRole.REFERENCE and not np.isnan(self.y[i]):
                raise DataError(f"record {i}: role-C site {sid!r} carries a low-cost value")
            if role is SiteRole.GRID:
                raise DataError(f"record {i}: grid site {sid!r} cannot carry observations")


@dataclass(frozen=True, eq=False)
class TimeSlice:
    """Cross-section of the network at one time index.

    ``*_ac`` arrays describe reference sites (roles A and C) with an observed
    reference value; ``*_b`` arrays describe role-B sites with an observed
    low-cost value and complete covariates.
    """

    t: int
    ids_ac: tuple
    locs_ac: np.ndarray
    x_ac: np.ndarray
    ids_b: tuple
    locs_b: np.ndarray
    y_b: np.ndarray
    z_b: np.ndarray
    covariate_names: tuple = ()

    def __post_init__(self):
        for name in ("locs_ac", "x_ac", "locs_b", "y_b", "z_b"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "locs_ac", self.locs_ac.reshape(-1, 2))
        object.__setattr__(self, "locs_b", self.locs_b.reshape(-1, 2))
        nb = len(self.y_b)
        object.__setattr__(self, "z_b", self.z_b.reshape(nb, -1) if nb else self.z_b.reshape(0, len(self.covariate_names)))
        if len(self.x_ac) != len(self.locs_ac) or len(self.ids_ac) != len(self.x_ac):
            raise DataError("reference arrays disagree in length")
        if len(self.locs_b) != nb or len(self.ids_b) != nb:
            raise DataError("low-cost arrays disagree in length")

    @property
    def n_ac(self) -> int:
        return len(self.x_ac)

    @property
    def n_b(self) -> int:
        return len(self.y_b)

    def all_locs(self) -> np.ndarray:
        """Locations stacked as reference sites then low-cost sites."""
        return np.vstack([self.locs_ac, self.locs_b])


def build_time_slice(panel: PanelDataset, layout: NetworkLayout, t: int,
                     covariate_names: Sequence[str] | None = None) -> TimeSlice:
    """Extract the time-``t`` cross-section used by the filters.

    B-sites with an absent low-cost reading are dropped; B-sites with missing
    covariates are dropped with a warning. Raises ``NoReferenceData`` when no
    A or C site has a reference value at ``t``.
    """
    names = tuple(panel.covariate_names if covariate_names is None else covariate_names)
    at_t = np.flatnonzero(panel.t == t)
    if at_t.size == 0:
        raise DataError(f"time {t} not present in panel")
    z_all = panel.covariate_matrix(names)
    ids_ac, x_ac, ids_b, y_b, z_b = [], [], [], [], []
    for i in at_t:
        sid = panel.site_id[i]
        role = layout.role_of(sid)
        if role.has_reference and not np.isnan(panel.x_ref[i]):
            ids_ac.append(sid)
            x_ac.append(panel.x_ref[i])
        elif role is SiteRole.LOWCOST and not np.isnan(panel.y[i]):
            z = z_all[i]
            if not np.all(np.isfinite(z)):
                warnings.warn(f"dropping site {sid!r} at t={t}: missing covariates", stacklevel=2)
                continue
            ids_b.append(sid)
            y_b.append(panel.y[i])
            z_b.append(z)
    if not ids_ac:
        raise NoReferenceData(f"no reference values at t={t}")
    return TimeSlice(
        t=int(t),
        ids_ac=tuple(ids_ac),
        locs_ac=layout.coords(ids_ac),
        x_ac=np.array(x_ac),
        ids_b=tuple(ids_b),
        locs_b=layout.coords(ids_b),
        y_b=np.array(y_b),
        z_b=np.array(z_b, dtype=float).reshape(len(ids_b), len(names)),
        covariate_names=names,
    )

"""Regenerate the bundled toy dataset (1 collocated, 8 low-cost, 1 reference-only site, 30 times)."""

import argparse
from pathlib import Path

import numpy as np

from lcsfilter import sim_bench as sb
from lcsfilter.cli_io import write_rows
from lcsfilter.covariance import KernelSpec

DATA = Path(__file__).resolve().parents[1] / "src" / "lcsfilter" / "data"


def _s(v, digits: int = 4) -> str:
    # short decimal strings keep the bundled files readable
    return repr(round(float(v), digits))


def main(seed: int = 2024, out: Path = DATA) -> None:
    rng = np.random.default_rng(seed)
    ids = ["A1"] + [f"B{i}" for i in range(1, 9)] + ["C1"]
    roles = ["A"] + ["B"] * 8 + ["C"]
    locs = np.round(rng.uniform(0.0, 1.0, (10, 2)), 4)
    n_t = 30
    truth = sb.simulate_gp_truth(locs, KernelSpec("exponential", 15.0, 3.0 / np.sqrt(2.0)), 7.0, n_t, rng)
    z = sb.simulate_covariates(n_t * 10, rng).reshape(n_t, 10, 4)
    z[:, :, :2] = np.round(z[:, :, :2], 2)
    y = sb.simulate_lowcost(truth, z, sb.ObsCoefficients(), 2.0, rng)
    write_rows(out / "toy_network.csv", ("site_id", "x", "y", "role"),
               [(i, _s(lx), _s(ly), r) for i, (lx, ly), r in zip(ids, locs, roles)])
    obs, tru = [], []
    for t in range(n_t):
        for j, (sid, role) in enumerate(zip(ids, roles)):
            yv = _s(y[t, j], 3) if role in "AB" else None
            xv = _s(truth[t, j], 3) if role in "AC" else None
            obs.append((sid, t, yv, xv, *(_s(v, 2) for v in z[t, j])))
            tru.append((sid, t, _s(truth[t, j], 3)))
    write_rows(out / "toy_observations.csv", ("site_id", "t", "y", "x_ref") + sb.COVARIATES, obs)
    write_rows(out / "toy_truth.csv", ("site_id", "t", "x"), tru)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--out", type=Path, default=DATA)
    a = ap.parse_args()
    main(a.seed, a.out)

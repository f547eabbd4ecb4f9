"""Replication driver for simulation tables.

Every replicate draws from its own seed streams derived from the master
seed and the replicate index, so a report depends only on the master seed
and never on how replicates are spread over worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import norm
from threadpoolctl import threadpool_limits

from .data import response_jump_percentiles
from .dgp import SimConfig, censoring_fraction, simulate_study
from .exceptions import MsgeeError
from .gee import FitConfig, with_mode
from .inference import fit_with_influence, pointwise_se
from .multiplier import stream_sups

__all__ = ["BandConfig", "TestConfig", "MCReport", "run_replications", "run_replicate"]


@dataclass(frozen=True)
class BandConfig:
    alpha: float = 0.05
    B: int = 1000
    coefficients: tuple = (1,)
    percentiles: tuple = (0.10, 0.90)


@dataclass(frozen=True)
class TestConfig:
    """KS tests of ``beta_l = 0``; one simulated study per marginal effect size."""

    alpha: float = 0.05
    B: int = 1000
    coefficients: tuple = (1,)
    effects: tuple = (0.0,)
    percentiles: tuple = (0.10, 0.90)
    modes: tuple | None = None

    __test__ = False


def _stream(seed: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *path])


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint32)[0])


def run_replicate(r: int, sim: SimConfig, fit: FitConfig, report_times, band_cfg, test_cfg,
                  modes, seed: int, h=2, level: float = 0.95) -> dict:
    """One replicate; returns a plain dict of per-replicate outcomes.

    Stream layout under ``(seed, r)``: ``0`` data, ``1`` band multipliers,
    ``(2, j, 0)`` and ``(2, j, 1)`` data and multipliers for effect ``j``.
    """
    out = {"r": r, "errors": []}
    data, truth = simulate_study(sim, np.random.default_rng(_stream(seed, r, 0)))
    out["censoring"] = censoring_fraction(data)
    times = np.asarray(report_times, dtype=float)
    z = norm.ppf(0.5 + level / 2)
    if times.size:
        tb = truth.beta(times)
        for mode in modes:
            try:
                f, inf = fit_with_influence(data, h, with_mode(fit, mode), times=times,
                                            warm_start=False)
                se = pointwise_se(inf)
                out[f"point/{mode}"] = {
                    "beta": f.beta.tolist(),
                    "se": se.tolist(),
                    "cover": (np.abs(f.beta - tb) <= z * se).tolist(),
                }
            except MsgeeError as exc:
                out["errors"].append(f"point/{mode}: {exc}")
    if band_cfg is not None:
        dom = response_jump_percentiles(data, h, *band_cfg.percentiles)
        bseed = _int_seed(_stream(seed, r, 1))
        for mode in modes:
            try:
                sp = stream_sups(data, h, with_mode(fit, mode), dom, band_cfg.coefficients,
                                 band_cfg.B, bseed)
                cov = {}
                for l in band_cfg.coefficients:
                    band = sp.band(l, band_cfg.alpha)
                    cov[str(l)] = band.covers(truth.beta(band.grid)[:, l])
                out[f"band/{mode}"] = cov
            except MsgeeError as exc:
                out["errors"].append(f"band/{mode}: {exc}")
    if test_cfg is not None:
        for j, eff in enumerate(test_cfg.effects):
            d2, _ = simulate_study(sim.with_marginal_effect(eff),
                                   np.random.default_rng(_stream(seed, r, 2, j, 0)))
            dom = response_jump_percentiles(d2, h, *test_cfg.percentiles)
            tseed = _int_seed(_stream(seed, r, 2, j, 1))
            for mode in test_cfg.modes or modes:
                try:
                    sp = stream_sups(d2, h, with_mode(fit, mode), dom, test_cfg.coefficients,
                                     test_cfg.B, tseed)
                    out[f"test/{mode}/{j}"] = {str(l): sp.test(l).p_value
                                               for l in test_cfg.coefficients}
                except MsgeeError as exc:
                    out["errors"].append(f"test/{mode}/{j}: {exc}")
    return out


def _mean(values) -> float:
    return math.fsum(values) / len(values) if values else math.nan


def _rate(flags) -> dict:
    k = len(flags)
    p = _mean([float(f) for f in flags])
    return {"rate": p, "mc_error": math.sqrt(p * (1 - p) / k) if k else math.nan, "count": k}


@dataclass
class MCReport:
    """Aggregated simulation summaries.

    ``pointwise`` rows hold bias, average estimated SE (ASE), Monte Carlo SD
    (MCSD) and CP per mode, coefficient and time; ``band`` and ``rejection``
    hold rates with their binomial Monte Carlo errors.
    """

    reps: int
    seed: int
    sim: dict
    fit: dict
    pointwise: list = field(default_factory=list)
    band: list = field(default_factory=list)
    rejection: list = field(default_factory=list)
    censoring: float = math.nan
    failures: dict = field(default_factory=dict)

    def cell(self, table: str, **keys) -> dict:
        """The unique row of ``table`` matching ``keys``."""
        rows = [row for row in getattr(self, table)
                if all(row[k] == v for k, v in keys.items())]
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {keys}")
        return rows[0]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """One row per table cell; empty fields where a column does not apply."""
        cols = ["table", "mode", "coefficient", "t", "effect", "bias", "ase", "mcsd", "cp",
                "rate", "mc_error", "count"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for table in ("pointwise", "band", "rejection"):
            for row in getattr(self, table):
                w.writerow({"table": table, **{k: _fmt(v) for k, v in row.items()}})
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g") if math.isfinite(v) else "nan"
    return v


def _aggregate(results, sim, fit, reps, seed, report_times, band_cfg, test_cfg, modes, h):
    rep = MCReport(reps=reps, seed=seed, sim=sim.to_dict(), fit=fit.to_dict())
    rep.censoring = _mean([res["censoring"] for res in results])
    rep.failures = {"errors": sum(len(res["errors"]) for res in results)}
    P = len(sim.beta_resp_cond) + 1
    times = np.asarray(report_times, dtype=float)
    truth = sim.truth.beta(times) if times.size else None
    for mode in modes:
        key = f"point/{mode}"
        for l in range(P):
            for k, t in enumerate(times):
                b, s, c = [], [], []
                for res in results:
                    if key in res and math.isfinite(res[key]["se"][k][l]):
                        b.append(res[key]["beta"][k][l])
                        s.append(res[key]["se"][k][l])
                        c.append(res[key]["cover"][k][l])
                m = _mean(b)
                rep.pointwise.append({
                    "mode": mode, "coefficient": l, "t": float(t),
                    "bias": m - float(truth[k, l]),
                    "ase": _mean(s),
                    "mcsd": math.sqrt(math.fsum((x - m) ** 2 for x in b) / (len(b) - 1))
                    if len(b) > 1 else math.nan,
                    "cp": _mean([float(x) for x in c]),
                    "count": len(b),
                })
    if band_cfg is not None:
        for mode in modes:
            for l in band_cfg.coefficients:
                flags = [res[f"band/{mode}"][str(l)] for res in results if f"band/{mode}" in res]
                rep.band.append({"mode": mode, "coefficient": l, **_rate(flags)})
    if test_cfg is not None:
        for mode in test_cfg.modes or modes:
            for l in test_cfg.coefficients:
                for j, eff in enumerate(test_cfg.effects):
                    key = f"test/{mode}/{j}"
                    flags = [res[key][str(l)] < test_cfg.alpha for res in results if key in res]
                    rep.rejection.append({"mode": mode, "coefficient": l, "effect": float(eff),
                                          **_rate(flags)})
    return rep


def _init_worker():
    threadpool_limits(1)
    warnings.simplefilter("ignore")


def _job(args):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run_replicate(*args)


def run_replications(sim: SimConfig, fit: FitConfig | None = None, reps: int = 100,
                     report_times=(0.2, 1.0, 1.8), band_cfg: BandConfig | None = None,
                     test_cfg: TestConfig | None = None, modes=("tcm", "iid"), seed: int = 0,
                     workers: int | None = None, h=2, level: float = 0.95,
                     progress=None) -> MCReport:
    """Simulate ``reps`` studies and summarise estimates, bands and tests.

    ``workers`` defaults to the ``MSGEE_THREADS`` environment variable (1 if
    unset).  Results are identical for any worker count.  ``progress`` is
    called with the number of finished replicates.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    fit = fit or FitConfig()
    times = np.asarray(report_times, dtype=float)
    if times.size and (np.any(times <= 0) or np.any(times >= sim.tau)):
        raise ValueError("report times must lie in (0, tau)")
    if workers is None:
        workers = int(os.environ.get("MSGEE_THREADS", "1"))
    jobs = [(r, sim, fit, tuple(times), band_cfg, test_cfg, tuple(modes), seed, h, level)
            for r in range(reps)]
    results = []
    if workers <= 1:
        with threadpool_limits(1):
            for i, job in enumerate(jobs):
                results.append(_job(job))
                if progress:
                    progress(i + 1)
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker) as ex:
            for i, res in enumerate(ex.map(_job, jobs, chunksize=1)):
                results.append(res)
                if progress:
                    progress(i + 1)
    results.sort(key=lambda res: res["r"])
    return _aggregate(results, sim, fit, reps, seed, times, band_cfg, test_cfg, tuple(modes), h)


def table_preset(name: str, n: int | None = None):
    """Settings for the three simulation tables: ``(sim, kwargs)``."""
    presets = {
        "table1": (50, dict(report_times=(0.2, 1.0, 1.8))),
        "table2": (100, dict(report_times=(), band_cfg=BandConfig(coefficients=(0, 1, 2)))),
        "table3": (200, dict(report_times=(), modes=("tcm", "iid"),
                             test_cfg=TestConfig(coefficients=(1, 2), effects=(0.0, -0.05, -0.1, -0.25)))),
    }
    if name not in presets:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    n0, kw = presets[name]
    return replace(SimConfig(), n_clusters=n or n0), kw

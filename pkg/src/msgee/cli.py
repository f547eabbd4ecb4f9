"""Command-line interface.

Settings are resolved as command-line flag, then the ``--config`` JSON
file, then the built-in default.  The default worker count comes from the
``MSGEE_THREADS`` environment variable.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import jump_grid, response_jump_percentiles
from .dgp import SimConfig, simulate_study
from .exceptions import (
    DataFormatError,
    DomainUndefinedError,
    EmptyDomainError,
    InvalidStateError,
    NumericalError,
)
from .gee import FitConfig
from .inference import fit_with_influence, pointwise_se
from .longcsv import LongSchema, fmt_float, parse_long_csv, provenance_line, write_long_csv
from .montecarlo import run_replications, table_preset
from .multiplier import stream_sups

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "link": "logit",
    "mode": "tcm",
    "state": 2,
    "seed": 0,
    "threads": None,
    "alpha": 0.05,
    "boot": 1000,
    "percentiles": [0.10, 0.90],
    "tol": 1e-8,
    "max_iter": 50,
}

# points per influence block when streaming standard errors
_SE_CHUNK = 256


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _global_flags(default) -> argparse.ArgumentParser:
    # accepted before or after the subcommand; the copy attached to
    # subcommands suppresses its defaults so it cannot erase earlier values
    g = argparse.ArgumentParser(add_help=False, argument_default=default)
    g.add_argument("--link", choices=["logit", "cloglog"], help="link function (default logit)")
    g.add_argument("--mode", choices=["tcm", "acm", "iid"],
                   help="cluster weighting: tcm (1/M_i), acm (1) or iid (default tcm)")
    g.add_argument("--state", type=int, help="transient state h to model (default 2)")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--threads", type=int,
                   help="worker processes (default $MSGEE_THREADS, else 1)")
    g.add_argument("--config", type=Path, help="JSON file with defaults for any flag")
    return g


def _data_flags(p):
    p.add_argument("--absorbing", help="comma-separated absorbing states (default: file header)")
    p.add_argument("--tau", type=float, help="end of follow-up (default: file header)")


def _read(args, cfg):
    ab = getattr(args, "absorbing", None) or cfg.get("absorbing")
    if isinstance(ab, str):
        ab = tuple(int(v) if v.strip().lstrip("-").isdigit() else v.strip()
                   for v in ab.split(","))
    tau = getattr(args, "tau", None) or cfg.get("tau")
    return parse_long_csv(args.data, LongSchema(absorbing=tuple(ab) if ab else None, tau=tau))


def build_parser() -> argparse.ArgumentParser:
    parent = _global_flags(argparse.SUPPRESS)
    p = _Parser(
        prog="msgee",
        description="Marginal regression for transient state occupation probabilities.",
        epilog="Precedence: command-line flag > --config file > built-in default.",
        parents=[_global_flags(None)],
    )
    p.add_argument("--version", action="version", version=f"msgee {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", parents=[parent], help="coefficient path with standard errors")
    f.add_argument("data", type=Path, help="long-format CSV")
    f.add_argument("-o", "--out", type=Path, required=True)
    _data_flags(f)

    b = sub.add_parser("band", parents=[parent], help="simultaneous confidence bands")
    b.add_argument("data", type=Path)
    b.add_argument("-o", "--out", type=Path, required=True)
    _data_flags(b)
    b.add_argument("--alpha", type=float)
    b.add_argument("--boot", type=int, help="bootstrap draws B (default 1000)")
    b.add_argument("--domain", help="lo,hi times (default 10th,90th response-jump percentiles)")
    b.add_argument("--coef", help="comma-separated coefficient indices (default all)")

    t = sub.add_parser("test", parents=[parent], help="sup tests of zero covariate effects")
    t.add_argument("data", type=Path)
    t.add_argument("-o", "--out", type=Path, required=True)
    _data_flags(t)
    t.add_argument("--boot", type=int)
    t.add_argument("--domain")
    t.add_argument("--coef", help="comma-separated coefficient indices (default all slopes)")

    s = sub.add_parser("simulate", parents=[parent], help="draw a study from the simulation model")
    s.add_argument("--sim-config", type=Path, help="SimConfig JSON")
    s.add_argument("--n", type=int, help="number of clusters")
    s.add_argument("-o", "--out", type=Path, required=True)

    r = sub.add_parser("replicate", parents=[parent], help="Monte Carlo tables")
    r.add_argument("--preset", choices=["table1", "table2", "table3"], required=True)
    r.add_argument("--reps", type=int, default=100)
    r.add_argument("--n", type=int, help="number of clusters (default from preset)")
    r.add_argument("--boot", type=int)
    r.add_argument("-o", "--out", type=Path, required=True,
                   help="output prefix; writes PREFIX.csv and PREFIX.json")
    return p


def _resolve(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config is not None:
        try:
            cfg.update(json.loads(args.config.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise _UsageError(f"cannot read config {args.config}: {exc}") from None
    for key in ("link", "mode", "state", "seed", "threads", "alpha", "boot"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if cfg["threads"] is None:
        cfg["threads"] = int(os.environ.get("MSGEE_THREADS", "1"))
    return cfg


def _fit_config(cfg) -> FitConfig:
    return FitConfig(family=cfg["link"], weight_mode=cfg["mode"], tol=cfg["tol"],
                     max_iter=cfg["max_iter"])


def _audit(cfg: dict) -> dict:
    # thread count never changes results, so it stays out of the hash
    return {k: v for k, v in cfg.items() if k != "threads"}


def _domain(text, data, h, cfg):
    if text:
        try:
            lo, hi = (float(v) for v in text.split(","))
        except ValueError:
            raise _UsageError(f"--domain expects lo,hi, got {text!r}") from None
        return lo, hi
    return response_jump_percentiles(data, h, *cfg["percentiles"])


def _coefs(text, P, default):
    if not text:
        return default
    try:
        out = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise _UsageError(f"--coef expects integers, got {text!r}") from None
    if any(not 0 <= l < P for l in out):
        raise _UsageError(f"coefficient indices must lie in 0..{P - 1}")
    return out


def _write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="")
    os.replace(tmp, path)


def _cmd_fit(args, cfg):
    data = _read(args, cfg)
    h = cfg["state"]
    config = _fit_config(cfg)
    grid = jump_grid(data, h)
    P = data.n_covariates + 1
    beta = np.full((grid.size, P), np.nan)
    se = np.full((grid.size, P), np.nan)
    status = np.zeros(grid.size, dtype=int)
    for k0 in range(0, grid.size, _SE_CHUNK):
        fit, infl = fit_with_influence(data, h, config, times=grid[k0:k0 + _SE_CHUNK])
        sl = slice(k0, k0 + fit.grid.size)
        beta[sl], status[sl] = fit.beta, fit.status
        se[sl] = np.where(infl.valid[:, None], pointwise_se(infl), np.nan)
    if not np.any(status == 0):
        raise NumericalError("no time point could be estimated")
    lines = [provenance_line(cfg["seed"], _audit(cfg)),
             ",".join(["t", *[f"beta_{l}" for l in range(P)], *[f"se_{l}" for l in range(P)],
                       "converged"])]
    for k, t in enumerate(grid):
        lines.append(",".join([fmt_float(t), *map(fmt_float, beta[k]), *map(fmt_float, se[k]),
                               str(int(status[k] == 0))]))
    _write_text(args.out, "\n".join(lines) + "\n")


def _cmd_band(args, cfg):
    data = _read(args, cfg)
    h = cfg["state"]
    P = data.n_covariates + 1
    coefs = _coefs(args.coef, P, tuple(range(P)))
    dom = _domain(args.domain, data, h, cfg)
    if cfg["boot"] < 100:
        raise _UsageError("--boot must be at least 100")
    sp = stream_sups(data, h, _fit_config(cfg), dom, coefs, cfg["boot"], cfg["seed"])
    lines = [provenance_line(cfg["seed"], _audit(cfg), domain=f"{fmt_float(dom[0])},"
                             f"{fmt_float(dom[1])}"),
             "coefficient,t,estimate,lower,upper,c_alpha"]
    for l in coefs:
        band = sp.band(l, cfg["alpha"])
        for k, t in enumerate(band.grid):
            lines.append(",".join([str(l), fmt_float(t), fmt_float(band.estimate[k]),
                                   fmt_float(band.lower[k]), fmt_float(band.upper[k]),
                                   fmt_float(band.c_alpha)]))
    _write_text(args.out, "\n".join(lines) + "\n")


def _cmd_test(args, cfg):
    data = _read(args, cfg)
    h = cfg["state"]
    P = data.n_covariates + 1
    coefs = _coefs(args.coef, P, tuple(range(1, P)))
    dom = _domain(args.domain, data, h, cfg)
    sp = stream_sups(data, h, _fit_config(cfg), dom, coefs, cfg["boot"], cfg["seed"])
    results = []
    for l in coefs:
        res = sp.test(l)
        results.append({"coefficient": l, "K": res.K_stat, "p_value": res.p_value, "B": res.B})
    doc = _finite({"provenance": provenance_line(cfg["seed"], _audit(cfg)).lstrip("# "),
                   "domain": list(dom), "tests": results})
    _write_text(args.out, json.dumps(doc, indent=2) + "\n")


def _cmd_simulate(args, cfg):
    sim = SimConfig()
    if args.sim_config is not None:
        try:
            sim = SimConfig.from_dict(json.loads(args.sim_config.read_text()))
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise _UsageError(f"bad --sim-config: {exc}") from None
    if args.n is not None:
        sim = replace(sim, n_clusters=args.n)
    sim = replace(sim, rng_seed=cfg["seed"])
    data, _ = simulate_study(sim)
    write_long_csv(data, args.out, seed=cfg["seed"], config=sim.to_dict())


def _cmd_replicate(args, cfg):
    sim, kw = table_preset(args.preset, args.n)
    for key in ("band_cfg", "test_cfg"):
        if kw.get(key) is not None and args.boot is not None:
            kw[key] = replace(kw[key], B=args.boot)
    report = run_replications(sim, _fit_config(cfg), reps=args.reps, seed=cfg["seed"],
                              workers=cfg["threads"], h=cfg["state"], **kw)
    audit = {**_audit(cfg), "preset": args.preset, "reps": args.reps, "sim": sim.to_dict()}
    head = provenance_line(cfg["seed"], audit)
    prefix = str(args.out)
    _write_text(Path(prefix + ".csv"), head + "\n" + report.to_csv())
    doc = {"provenance": head.lstrip("# "), **report.to_dict()}
    _write_text(Path(prefix + ".json"), json.dumps(_finite(doc), indent=2, sort_keys=True) + "\n")


def _finite(v):
    """Replace non-finite floats by ``None`` so the JSON stays standard."""
    if isinstance(v, dict):
        return {k: _finite(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_finite(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


COMMANDS = {"fit": _cmd_fit, "band": _cmd_band, "test": _cmd_test, "simulate": _cmd_simulate,
            "replicate": _cmd_replicate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve(args)
        with threadpool_limits(1), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            COMMANDS[args.command](args, cfg)
    except _UsageError as exc:
        print(f"msgee: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, InvalidStateError, DomainUndefinedError, OSError) as exc:
        print(f"msgee: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, EmptyDomainError) as exc:
        print(f"msgee: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Long-format CSV input and output.

One row per subject and time::

    cluster_id,subject_id,time,state,x1,x2
    1,1,0,1,0.3,-1.2      baseline row: initial state and covariates
    1,1,0.8,2,,           a state change (blank covariates: unchanged)
    1,1,1.5,end,,         end of follow-up (censoring time)

Every subject needs exactly one end row, as its last row.  It may share
its time with the row before it (a change observed at the censoring
instant).  Lines starting with ``#`` are comments; the writer puts a
provenance line there (package version, seed, config hash, ``tau``, state
space), and the reader uses its ``tau``/``states``/``absorbing`` entries
when the schema leaves them unset.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import __version__
from .data import Cluster, StepFunction, StudyData, SubjectRecord
from .exceptions import DataFormatError, InvalidStateError

__all__ = ["LongSchema", "parse_long_csv", "write_long_csv", "provenance_line", "config_hash",
           "fmt_float"]


@dataclass(frozen=True)
class LongSchema:
    """Column names and study-level declarations for :func:`parse_long_csv`.

    ``covariates=None`` takes every column not named otherwise, in file
    order.  ``state_space=None`` accepts any label seen in the file.
    """

    cluster: str = "cluster_id"
    subject: str = "subject_id"
    time: str = "time"
    state: str = "state"
    covariates: tuple | None = None
    end_marker: str = "end"
    tau: float | None = None
    state_space: tuple | None = None
    absorbing: tuple | None = None
    max_cluster_size: int | None = None


def fmt_float(x: float) -> str:
    """Locale-independent text with 17 significant digits (exact round trip)."""
    return format(float(x), ".17g")


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance_line(seed=None, config: dict | None = None, **extra) -> str:
    parts = [f"# msgee {__version__}", f"seed={seed if seed is not None else 'none'}",
             f"config={config_hash(config or {})}"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return " ".join(parts)


def _label(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def _labels(text: str) -> tuple:
    return tuple(_label(v) for v in text.split(",") if v != "")


def _header_meta(comments: list[str]) -> dict:
    meta = {}
    for line in comments:
        for tok in line.lstrip("#").split():
            if "=" in tok:
                k, v = tok.split("=", 1)
                meta[k] = v
    return meta


def parse_long_csv(path, schema: LongSchema | None = None, strict_size: bool = False) -> StudyData:
    """Read a long-format CSV into :class:`StudyData`.

    Raises
    ------
    DataFormatError
        With the offending line number for unsorted times, duplicate
        ``(subject, time)`` rows, rows after the end marker, a missing end
        marker or malformed values.
    InvalidStateError
        For a state outside the declared state space (also line-numbered).
    """
    schema = schema or LongSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    comments = [ln for ln in lines if ln.startswith("#")]
    meta = _header_meta(comments)
    body = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip() and not ln.startswith("#")]
    if not body:
        raise DataFormatError("file has no header row")
    reader = csv.reader([ln for _, ln in body])
    header = next(reader)
    lineno = [i for i, _ in body]
    need = [schema.cluster, schema.subject, schema.time, schema.state]
    missing = [c for c in need if c not in header]
    if missing:
        raise DataFormatError(f"missing columns {missing}", lineno[0])
    cols = {name: k for k, name in enumerate(header)}
    covs = schema.covariates
    if covs is None:
        covs = tuple(c for c in header if c not in need)
    for c in covs:
        if c not in cols:
            raise DataFormatError(f"missing covariate column {c!r}", lineno[0])

    tau = schema.tau if schema.tau is not None else (float(meta["tau"]) if "tau" in meta else None)
    states = schema.state_space or (_labels(meta["states"]) if "states" in meta else None)
    absorbing = schema.absorbing if schema.absorbing is not None else \
        (_labels(meta["absorbing"]) if "absorbing" in meta else None)
    if absorbing is None:
        raise DataFormatError("absorbing states are not declared (schema or header)")
    known = set(states) if states is not None else None

    subjects: dict = {}
    order: list = []
    closed: set = set()
    last_key = None
    for row, ln in zip(reader, lineno[1:]):
        if len(row) != len(header):
            raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", ln)
        cid, sid = _label(row[cols[schema.cluster]]), _label(row[cols[schema.subject]])
        try:
            t = float(row[cols[schema.time]])
        except ValueError:
            raise DataFormatError(f"time {row[cols[schema.time]]!r} is not a number", ln) from None
        if not np.isfinite(t) or t < 0:
            raise DataFormatError(f"time {t} must be finite and nonnegative", ln)
        raw_state = row[cols[schema.state]]
        key = (str(cid), str(sid))
        rec = subjects.get(key)
        if rec is None:
            rec = {"cluster": cid, "subject": sid, "line": ln, "rows": []}
            subjects[key] = rec
            order.append(key)
        elif key != last_key:
            raise DataFormatError(f"rows of subject {sid!r} are not contiguous", ln)
        if key in closed:
            raise DataFormatError(f"subject {sid!r} has rows after its end marker", ln)
        if rec["rows"]:
            t_prev = rec["rows"][-1][0]
            if t < t_prev:
                raise DataFormatError(
                    f"time {t:g} for subject {sid!r} is before the previous time {t_prev:g}", ln)
            if t == t_prev and raw_state != schema.end_marker:
                raise DataFormatError(f"duplicate row for subject {sid!r} at time {t:g}", ln)
        if raw_state == schema.end_marker:
            if not rec["rows"]:
                raise DataFormatError(f"subject {sid!r} has no baseline row before its end marker",
                                      ln)
            rec["end"] = t
            closed.add(key)
        else:
            state = _label(raw_state)
            if known is not None and state not in known:
                raise InvalidStateError(f"line {ln}: unknown state {raw_state!r}")
            x = []
            for c in covs:
                v = row[cols[c]]
                if v == "":
                    if not rec["rows"]:
                        raise DataFormatError(f"baseline row lacks covariate {c!r}", ln)
                    x.append(rec["rows"][-1][2][len(x)])
                else:
                    try:
                        x.append(float(v))
                    except ValueError:
                        raise DataFormatError(f"covariate {c!r} value {v!r} is not a number",
                                              ln) from None
            rec["rows"].append((t, state, x, ln))
        last_key = key

    members: dict = {}
    seen_states = set()
    for key in order:
        rec = subjects[key]
        if "end" not in rec:
            raise DataFormatError(f"subject {rec['subject']!r} has no end marker", rec["line"])
        rows = rec["rows"]
        times = [r[0] for r in rows[1:]]
        st = [r[1] for r in rows]
        seen_states.update(st)
        path = StepFunction.from_changes(st[0], times, st[1:])
        cov_paths = tuple(
            StepFunction.from_changes(rows[0][2][k], times, [r[2][k] for r in rows[1:]])
            for k in range(len(covs))
        )
        subj = SubjectRecord(rec["subject"], path, rec["end"], cov_paths)
        members.setdefault(str(rec["cluster"]), (rec["cluster"], []))[1].append(subj)
    clusters = tuple(Cluster(cid, tuple(ms)) for cid, ms in members.values())
    if states is None:
        states = tuple(sorted(seen_states | set(absorbing), key=str))
    if tau is None:
        tau = max(subjects[k]["end"] for k in order) if order else 0.0
    return StudyData(clusters, tau, states, frozenset(absorbing),
                     max_cluster_size=schema.max_cluster_size, strict_size=strict_size)


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_long_csv(data: StudyData, path, covariate_names=None, seed=None, config=None,
                   end_marker: str = "end") -> None:
    """Write ``data`` in long format; :func:`parse_long_csv` reads it back exactly."""
    p = data.n_covariates
    names = list(covariate_names or [f"x{k + 1}" for k in range(p)])
    if len(names) != p:
        raise ValueError(f"need {p} covariate names")
    meta = dict(tau=fmt_float(data.tau), states=",".join(map(str, data.state_space)),
                absorbing=",".join(map(str, sorted(data.absorbing, key=str))))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        fh.write(provenance_line(seed, config, **meta) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster_id", "subject_id", "time", "state", *names])
        for cid, s in data.subjects():
            change = np.unique(np.concatenate(
                [s.state_path.breakpoints, *[c.breakpoints for c in s.covariates]]))
            if change.size and change[0] == 0.0:
                raise ValueError(f"subject {s.subject_id!r}: a change at time 0 cannot be written")
            w.writerow([_cell(cid), _cell(s.subject_id), "0", _cell(s.state_path.values[0]),
                        *[_cell(c.values[0]) for c in s.covariates]])
            for t in change:
                w.writerow([_cell(cid), _cell(s.subject_id), fmt_float(t),
                            _cell(s.state_path(t)), *[_cell(c(t)) for c in s.covariates]])
            w.writerow([_cell(cid), _cell(s.subject_id), fmt_float(s.censor_time), end_marker,
                        *[""] * p])
    os.replace(tmp, path)

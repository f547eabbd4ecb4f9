"""Clustered multistate panel data.

The record types (:class:`StepFunction`, :class:`SubjectRecord`,
:class:`Cluster`, :class:`StudyData`) are immutable.  ``StudyData`` keeps a
lazily built columnar view (:class:`Panel`) that evaluates the response,
at-risk and observation indicators for every subject at many times at once;
the solver works exclusively on that view.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterator, Sequence

import numpy as np

from .exceptions import DataFormatError, DomainUndefinedError, InvalidStateError

__all__ = [
    "StepFunction",
    "SubjectRecord",
    "Cluster",
    "StudyData",
    "IndicatorSlice",
    "Panel",
    "alive",
    "occupying_or_alive",
    "risk_indicator",
    "missingness_indicator",
    "slice_at",
    "jump_grid",
    "response_jump_percentiles",
]

#: Signature of an at-risk rule: ``rule(states, h, absorbing) -> bool array``.
AtRiskRule = Callable[[np.ndarray, int, frozenset], np.ndarray]


def alive(states: np.ndarray, h: int, absorbing: frozenset) -> np.ndarray:
    """Default at-risk rule: at risk for ``h`` while not absorbed."""
    return ~np.isin(states, list(absorbing))


# Kept as a named alias so that user code can be explicit about the choice.
occupying_or_alive = alive


def _readonly(a) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


def _id_key(x):
    if isinstance(x, (int, np.integer)):
        return (0, int(x), "")
    return (1, 0, str(x))


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous step function on ``[0, tau]``.

    ``values[0]`` holds on ``[0, breakpoints[0])`` and ``values[k]`` from
    ``breakpoints[k-1]`` on; the value at a breakpoint is the new one.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float).reshape(-1)
        vals = np.asarray(self.values).reshape(-1)
        if vals.size != bp.size + 1:
            raise ValueError(
                f"need len(values) == len(breakpoints) + 1, got {vals.size} and {bp.size}"
            )
        if bp.size and not np.all(np.diff(bp) > 0):
            raise ValueError("breakpoints must be strictly increasing")
        if not np.all(np.isfinite(bp)):
            raise ValueError("breakpoints must be finite")
        object.__setattr__(self, "breakpoints", _readonly(bp))
        object.__setattr__(self, "values", _readonly(vals))

    @classmethod
    def _trusted(cls, breakpoints: np.ndarray, values: np.ndarray) -> "StepFunction":
        # skips validation; callers guarantee sorted float breakpoints
        obj = object.__new__(cls)
        object.__setattr__(obj, "breakpoints", breakpoints)
        object.__setattr__(obj, "values", values)
        return obj

    @classmethod
    def constant(cls, value) -> "StepFunction":
        return cls(np.empty(0), np.array([value]))

    @classmethod
    def from_changes(cls, initial, times: Sequence[float], values: Sequence) -> "StepFunction":
        """Build from a (time, value) sequence, dropping changes to the same value."""
        bp, vals = [], [initial]
        for t, v in zip(times, values):
            if v != vals[-1]:
                bp.append(t)
                vals.append(v)
        return cls(np.asarray(bp, dtype=float), np.asarray(vals))

    def __call__(self, t):
        idx = np.searchsorted(self.breakpoints, t, side="right")
        out = self.values[idx]
        return out.item() if np.ndim(out) == 0 else out

    def __eq__(self, other):
        if not isinstance(other, StepFunction):
            return NotImplemented
        return np.array_equal(self.breakpoints, other.breakpoints) and np.array_equal(
            self.values, other.values
        )

    __hash__ = None

    @property
    def is_constant(self) -> bool:
        return self.breakpoints.size == 0

    def __repr__(self):
        return f"StepFunction(breakpoints={self.breakpoints.tolist()}, values={self.values.tolist()})"


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    """One subject: state path, censoring time and covariate paths.

    ``covariates`` excludes the intercept, which is added implicitly.
    """

    subject_id: object
    state_path: StepFunction
    censor_time: float
    covariates: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "censor_time", float(self.censor_time))

    def state(self, t):
        return self.state_path(t)

    def x(self, t) -> np.ndarray:
        """Covariate vector at ``t`` with a leading 1."""
        return np.array([1.0] + [float(c(t)) for c in self.covariates])


@dataclass(frozen=True, eq=False)
class Cluster:
    cluster_id: object
    members: tuple

    def __post_init__(self):
        members = tuple(sorted(self.members, key=lambda s: _id_key(s.subject_id)))
        if not members:
            raise ValueError(f"cluster {self.cluster_id!r} has no members")
        object.__setattr__(self, "members", members)

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True, eq=False)
class StudyData:
    """A study of ``n`` clusters followed on ``[0, tau]``.

    Clusters and members are stored sorted by id, so every derived row order
    is ``(cluster_id, subject_id)``.  ``max_cluster_size`` is the optional
    bound ``m0``; violating it warns, or raises when ``strict_size`` is set.
    """

    clusters: tuple
    tau: float
    state_space: tuple
    absorbing: frozenset
    max_cluster_size: int | None = None
    strict_size: bool = False

    def __post_init__(self):
        clusters = tuple(sorted(self.clusters, key=lambda c: _id_key(c.cluster_id)))
        object.__setattr__(self, "clusters", clusters)
        object.__setattr__(self, "tau", float(self.tau))
        object.__setattr__(self, "state_space", tuple(self.state_space))
        object.__setattr__(self, "absorbing", frozenset(self.absorbing))
        self._validate()

    def _validate(self):
        states = set(self.state_space)
        if not self.absorbing <= states:
            raise InvalidStateError("absorbing states must belong to the state space")
        ids = [c.cluster_id for c in self.clusters]
        if len(set(map(str, ids))) != len(ids):
            raise DataFormatError("duplicate cluster ids")
        p = None
        for c in self.clusters:
            if self.max_cluster_size is not None and c.size > self.max_cluster_size:
                msg = (
                    f"cluster {c.cluster_id!r} has {c.size} members, "
                    f"above the bound {self.max_cluster_size}"
                )
                if self.strict_size:
                    raise DataFormatError(msg)
                warnings.warn(msg, stacklevel=3)
            for s in c.members:
                if p is None:
                    p = len(s.covariates)
                elif len(s.covariates) != p:
                    raise DataFormatError(
                        f"subject {s.subject_id!r} has {len(s.covariates)} covariates, expected {p}"
                    )
        panel = self.panel
        if panel.n_subjects == 0:
            return

        def who(mask_over_subjects):
            return panel.subject_ids[int(np.argmax(mask_over_subjects))]

        bad = (panel.censor < 0.0) | (panel.censor > self.tau) | ~np.isfinite(panel.censor)
        if bad.any():
            raise DataFormatError(f"subject {who(bad)!r}: censor time outside [0, {self.tau}]")
        bank = panel.states
        known = np.isin(bank.values, list(states))
        if not known.all():
            k = int(np.argmin(known))
            owner = np.searchsorted(bank.offsets, k, side="right") - 1
            raise InvalidStateError(
                f"subject {panel.subject_ids[owner]!r}: unknown state {bank.values[k]!r}"
            )
        late = np.zeros(panel.n_subjects, bool)
        late[bank.owner[bank.bp > self.tau]] = True
        for cov in panel.covariates:
            late[cov.owner[cov.bp > self.tau]] = True
        if late.any():
            raise DataFormatError(f"subject {who(late)!r}: change recorded after tau")
        # once absorbed, every later value must repeat the absorbing state
        absorbed = np.isin(bank.values, list(self.absorbing)).astype(np.int64)
        seen = np.cumsum(absorbed)
        block = np.searchsorted(bank.offsets, np.arange(bank.values.size), side="right") - 1
        seen = seen - (seen[bank.offsets] - absorbed[bank.offsets])[block]
        prev_seen = np.zeros_like(seen)
        prev_seen[1:] = seen[:-1]
        same_block = np.zeros(bank.values.size, bool)
        same_block[1:] = block[1:] == block[:-1]
        leaves = same_block & (prev_seen > 0)
        leaves[1:] &= bank.values[1:] != bank.values[:-1]
        leaves[0] = False
        if leaves.any():
            raise InvalidStateError(
                f"subject {panel.subject_ids[block[int(np.argmax(leaves))]]!r} leaves an absorbing state"
            )

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n_subjects(self) -> int:
        return sum(c.size for c in self.clusters)

    @property
    def n_covariates(self) -> int:
        """Number of covariates ``p`` (intercept excluded)."""
        for c in self.clusters:
            return len(c.members[0].covariates)
        return 0

    @property
    def transient_states(self) -> tuple:
        return tuple(s for s in self.state_space if s not in self.absorbing)

    def subjects(self) -> Iterator[tuple[object, SubjectRecord]]:
        for c in self.clusters:
            for s in c.members:
                yield c.cluster_id, s

    def check_transient(self, h) -> None:
        if h not in self.state_space:
            raise InvalidStateError(f"state {h!r} is not in the state space {self.state_space}")
        if h in self.absorbing:
            raise InvalidStateError(f"state {h!r} is absorbing; only transient states are modelled")

    @cached_property
    def panel(self) -> "Panel":
        return Panel(self)

    @cached_property
    def fingerprint(self) -> str:
        """SHA-256 over a canonical, exact serialisation of the study."""
        h = hashlib.sha256()

        def put(*items):
            for it in items:
                h.update(str(it).encode())
                h.update(b"\x1f")

        def put_floats(arr):
            h.update(np.ascontiguousarray(np.asarray(arr, dtype="<f8")).tobytes())
            h.update(b"\x1e")

        put(float(self.tau).hex(), list(self.state_space), sorted(self.absorbing))
        for c in self.clusters:
            put("C", c.cluster_id)
            for s in c.members:
                put("S", s.subject_id, float(s.censor_time).hex())
                put_floats(s.state_path.breakpoints)
                put(s.state_path.values.tolist())
                for cov in s.covariates:
                    put_floats(cov.breakpoints)
                    put_floats(cov.values)
        return h.hexdigest()


class _Bank:
    """Flattened step functions, one per subject, evaluated in bulk."""

    def __init__(self, functions: Sequence[StepFunction], dtype=None):
        counts = np.array([f.breakpoints.size for f in functions], dtype=np.int64)
        self.n = len(functions)
        self.bp = np.concatenate([f.breakpoints for f in functions]) if self.n else np.empty(0)
        self.owner = np.repeat(np.arange(self.n), counts)
        vals = [f.values for f in functions]
        self.values = np.concatenate(vals) if self.n else np.empty(0, dtype=dtype or float)
        if dtype is not None:
            self.values = self.values.astype(dtype)
        self.offsets = np.concatenate([[0], np.cumsum(counts + 1)[:-1]]).astype(np.int64)
        self.initial = self.values[self.offsets] if self.n else self.values
        self.constant = self.bp.size == 0

    def at(self, times: np.ndarray) -> np.ndarray:
        """``len(times) x n`` matrix of values at sorted ``times``."""
        times = np.asarray(times, dtype=float)
        k = times.size
        if self.constant:
            return np.broadcast_to(self.initial, (k, self.n))
        # breakpoint b is in force at times[j] iff j >= searchsorted(times, b, 'left')
        first = np.searchsorted(times, self.bp, side="left")
        live = first < k
        flat = first[live] * self.n + self.owner[live]
        hist = np.bincount(flat, minlength=k * self.n).reshape(k, self.n)
        count = np.cumsum(hist, axis=0)
        return self.values[self.offsets[None, :] + count]


class Panel:
    """Columnar view of a :class:`StudyData` used by the numerical code.

    Rows follow ``(cluster_id, subject_id)`` order.
    """

    def __init__(self, data: StudyData):
        subjects = [s for c in data.clusters for s in c.members]
        self.data = data
        self.tau = data.tau
        self.absorbing = data.absorbing
        self.n_clusters = data.n_clusters
        self.n_subjects = len(subjects)
        self.cluster_ids = tuple(c.cluster_id for c in data.clusters)
        self.subject_ids = tuple(s.subject_id for s in subjects)
        self.cluster_sizes = np.array([c.size for c in data.clusters], dtype=np.int64)
        self.cluster_index = np.repeat(np.arange(self.n_clusters), self.cluster_sizes)
        self.censor = np.array([s.censor_time for s in subjects], dtype=float)
        self.states = _Bank([s.state_path for s in subjects])
        self.p = data.n_covariates
        self.covariates = [_Bank([s.covariates[c] for s in subjects], float) for c in range(self.p)]
        self.constant_covariates = all(b.constant for b in self.covariates)
        if self.constant_covariates:
            cols = [np.ones(self.n_subjects)] + [b.initial for b in self.covariates]
            self.X0 = np.column_stack(cols) if self.n_subjects else np.empty((0, self.p + 1))
        else:
            self.X0 = None

    def state_at(self, times) -> np.ndarray:
        return self.states.at(times)

    def design_at(self, times) -> np.ndarray:
        """Covariates with intercept: ``n x (p+1)`` if constant, else ``K x n x (p+1)``."""
        if self.X0 is not None:
            return self.X0
        times = np.asarray(times, dtype=float)
        out = np.empty((times.size, self.n_subjects, self.p + 1))
        out[..., 0] = 1.0
        for c, bank in enumerate(self.covariates):
            out[..., c + 1] = bank.at(times)
        return out

    def indicators(self, h, times, rule: AtRiskRule = alive):
        """Return ``(y, s, r, X)`` at sorted ``times``.

        ``y``, ``s``, ``r`` are boolean ``K x n`` matrices; ``X`` is as in
        :meth:`design_at`.
        """
        times = np.asarray(times, dtype=float)
        st = self.state_at(times)
        y = st == h
        s = np.asarray(rule(st, h, self.absorbing), dtype=bool)
        r = times[:, None] <= self.censor[None, :]
        return y, s, r, self.design_at(times)

    def row_layout(self, mode: str):
        """Row weights, group index and group count for a weighting mode.

        ``tcm`` weights rows by ``1/M_i``, ``acm`` by 1, and ``iid`` makes every
        subject its own cluster.
        """
        if mode == "iid":
            return np.ones(self.n_subjects), np.arange(self.n_subjects), self.n_subjects
        if mode == "tcm":
            w = 1.0 / self.cluster_sizes[self.cluster_index]
        elif mode == "acm":
            w = np.ones(self.n_subjects)
        else:
            raise ValueError(f"unknown weight mode {mode!r}")
        return w, self.cluster_index, self.n_clusters

    def sweep_inputs(self, h, rule: AtRiskRule = alive) -> dict:
        """Event lists and lookup tables consumed by the compiled sweep."""
        labels = np.asarray(self.data.state_space)
        sorter = np.argsort(labels, kind="stable")
        bank = self.states

        def code(v):
            return sorter[np.searchsorted(labels, v, sorter=sorter)].astype(np.int64)

        codes = code(bank.values) if bank.values.size else np.empty(0, np.int64)
        local = np.arange(bank.bp.size) - _starts(bank)
        new = codes[bank.offsets[bank.owner] + local + 1] if bank.bp.size else codes[:0]
        order = np.argsort(bank.bp, kind="stable")
        cv_t, cv_s, cv_c, cv_v = [], [], [], []
        for c, cb in enumerate(self.covariates):
            if cb.bp.size:
                loc = np.arange(cb.bp.size) - _starts(cb)
                cv_t.append(cb.bp)
                cv_s.append(cb.owner)
                cv_c.append(np.full(cb.bp.size, c))
                cv_v.append(cb.values[cb.offsets[cb.owner] + loc + 1])
        if cv_t:
            cv = [np.concatenate(a) for a in (cv_t, cv_s, cv_c, cv_v)]
            cord = np.argsort(cv[0], kind="stable")
            cv = [a[cord] for a in cv]
        else:
            cv = [np.empty(0), np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0)]
        cov_init = np.column_stack([b.initial for b in self.covariates]) if self.p else \
            np.empty((self.n_subjects, 0))
        return dict(
            st_init=codes[bank.offsets] if self.n_subjects else np.empty(0, np.int64),
            ev_t=bank.bp[order].astype(float),
            ev_s=bank.owner[order].astype(np.int64),
            ev_v=new[order],
            cov_init=np.ascontiguousarray(cov_init, dtype=float),
            cv_t=cv[0].astype(float),
            cv_s=cv[1].astype(np.int64),
            cv_c=cv[2].astype(np.int64),
            cv_v=cv[3].astype(float),
            censor=self.censor,
            at_risk=np.asarray(rule(labels, h, self.absorbing), dtype=bool),
            resp=labels == h,
        )

    def transition_times(self) -> np.ndarray:
        return np.unique(self.states.bp)

    def covariate_times(self) -> np.ndarray:
        if not self.covariates:
            return np.empty(0)
        return np.unique(np.concatenate([b.bp for b in self.covariates]))

    def response_jumps(self, h) -> np.ndarray:
        """Pooled times where ``I[state == h]`` jumps while under observation."""
        bank = self.states
        if bank.bp.size == 0:
            return np.empty(0)
        idx = bank.offsets[bank.owner] + (np.arange(bank.bp.size) - _starts(bank))
        before = bank.values[idx] == h
        after = bank.values[idx + 1] == h
        keep = (before != after) & (bank.bp <= self.censor[bank.owner])
        return np.sort(bank.bp[keep])


def _starts(bank: _Bank) -> np.ndarray:
    """Position of each breakpoint's owner block within ``bank.bp``."""
    counts = np.bincount(bank.owner, minlength=bank.n)
    block_start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return block_start[bank.owner]


@dataclass(frozen=True, eq=False)
class IndicatorSlice:
    """Response, at-risk and observation indicators of every subject at ``t``.

    Arrays are aligned by row; rows are ordered by ``(cluster_id, subject_id)``
    and ``cluster`` holds each row's cluster position.
    """

    t: float
    cluster_ids: tuple
    subject_ids: tuple
    cluster: np.ndarray
    cluster_sizes: np.ndarray
    y: np.ndarray
    s: np.ndarray
    r: np.ndarray
    x: np.ndarray

    def __len__(self):
        return self.y.size

    def rows(self) -> Iterator[tuple]:
        """Yield ``(cluster_id, subject_id, y, s, r, x)`` per subject."""
        for k in range(len(self)):
            yield (
                self.cluster_ids[self.cluster[k]],
                self.subject_ids[k],
                int(self.y[k]),
                int(self.s[k]),
                int(self.r[k]),
                self.x[k],
            )

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    def layout(self, mode: str):
        """Row weights, group index and group count for ``mode``."""
        if mode == "iid":
            m = len(self)
            return np.ones(m), np.arange(m), m
        if mode == "tcm":
            w = 1.0 / self.cluster_sizes[self.cluster]
        elif mode == "acm":
            w = np.ones(len(self))
        else:
            raise ValueError(f"unknown weight mode {mode!r}")
        return w, self.cluster, self.n_clusters

    @classmethod
    def from_arrays(cls, y, x, cluster=None, s=None, r=None, t: float = 0.0):
        """Convenience constructor for hand-built slices (tests, examples).

        ``x`` must already contain the intercept column.
        """
        y = np.asarray(y, dtype=bool)
        m = y.size
        x = np.asarray(x, dtype=float).reshape(m, -1)
        cluster = np.zeros(m, dtype=np.int64) if cluster is None else np.asarray(cluster)
        labels, inv = np.unique(cluster, return_inverse=True)
        sizes = np.bincount(inv, minlength=labels.size)
        s = np.ones(m, bool) if s is None else np.asarray(s, dtype=bool)
        r = np.ones(m, bool) if r is None else np.asarray(r, dtype=bool)
        return cls(
            t=float(t),
            cluster_ids=tuple(labels.tolist()),
            subject_ids=tuple(range(m)),
            cluster=inv.astype(np.int64),
            cluster_sizes=sizes.astype(np.int64),
            y=y,
            s=s,
            r=r,
            x=x,
        )


def risk_indicator(subject: SubjectRecord, h, t: float, absorbing, rule: AtRiskRule = alive) -> int:
    """At-risk indicator for transient state ``h`` at ``t``.

    Raises
    ------
    InvalidStateError
        If ``h`` is absorbing.
    """
    absorbing = frozenset(absorbing)
    if h in absorbing:
        raise InvalidStateError(f"state {h!r} is absorbing")
    state = np.asarray([subject.state(t)])
    return int(bool(rule(state, h, absorbing)[0]))


def missingness_indicator(subject: SubjectRecord, t: float) -> int:
    """1 when ``t <= censor_time`` (the censoring instant counts as observed)."""
    return int(t <= subject.censor_time)


def slice_at(data: StudyData, h, t: float, rule: AtRiskRule = alive) -> IndicatorSlice:
    """Indicators of every subject at time ``t``."""
    data.check_transient(h)
    panel = data.panel
    y, s, r, X = panel.indicators(h, np.array([t], dtype=float), rule)
    x = X if X.ndim == 2 else X[0]
    return IndicatorSlice(
        t=float(t),
        cluster_ids=panel.cluster_ids,
        subject_ids=panel.subject_ids,
        cluster=panel.cluster_index,
        cluster_sizes=panel.cluster_sizes,
        y=y[0],
        s=s[0],
        r=r[0],
        x=np.array(x, dtype=float),
    )


def jump_grid(data: StudyData, h) -> np.ndarray:
    """Sorted distinct times at which any indicator or covariate can change.

    The union of transition times, censoring times and covariate breakpoints.
    """
    data.check_transient(h)
    panel = data.panel
    if panel.n_subjects == 0:
        return np.empty(0)
    times = np.concatenate(
        [panel.transition_times(), panel.censor, panel.covariate_times()]
    )
    return np.unique(times[times <= data.tau])


def response_jump_percentiles(data: StudyData, h, lo: float = 0.10, hi: float = 0.90):
    """Percentiles of the pooled observed jump times of ``I[state == h]``.

    Linear interpolation of the empirical distribution function is used
    (numpy's ``interpolated_inverted_cdf``).

    Raises
    ------
    DomainUndefinedError
        If no jump of the response process is observed.
    """
    if not 0.0 <= lo < hi <= 1.0:
        raise ValueError(f"need 0 <= lo < hi <= 1, got ({lo}, {hi})")
    data.check_transient(h)
    jumps = data.panel.response_jumps(h)
    return jump_percentiles(jumps, lo, hi)


def jump_percentiles(jumps, lo: float = 0.10, hi: float = 0.90):
    jumps = np.asarray(jumps, dtype=float)
    if jumps.size == 0:
        raise DomainUndefinedError("no observed response jumps; domain undefined")
    t1, t2 = np.percentile(jumps, [100 * lo, 100 * hi], method="interpolated_inverted_cdf")
    return float(t1), float(t2)

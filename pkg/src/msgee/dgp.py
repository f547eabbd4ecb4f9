"""Clustered three-state data with informative cluster size.

States are 1 (initial), 2 (response, transient) and 3 (death, absorbing).
Death times follow a shared positive-stable frailty Cox model, occupancy of
state 2 among the living follows a bridge random-intercept logistic model
evaluated on a fixed panel grid, and cluster sizes depend on both random
effects.  The marginal models remain Cox and logistic with coefficients
``alpha * beta'`` and ``phi * beta'``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Cluster, StepFunction, StudyData, SubjectRecord

__all__ = [
    "SimConfig",
    "SimTruth",
    "SIZE_REGIMES",
    "sample_positive_stable",
    "sample_bridge",
    "bridge_density",
    "sample_cluster_sizes",
    "simulate_study",
    "censoring_fraction",
]

#: (low, middle, high) discrete-uniform ranges, both ends inclusive.
SIZE_REGIMES = {
    "u20_60": ((20, 30), (30, 50), (50, 60)),
    "u5_105": ((5, 35), (35, 75), (75, 105)),
}


@dataclass(frozen=True)
class SimConfig:
    """Parameters of the data-generating process.

    ``beta_resp_cond`` are the conditional (random-intercept) slopes; the
    conditional intercept is ``log t``.  Use :meth:`with_marginal_effect` to
    specify marginal slopes instead.
    """

    n_clusters: int = 100
    alpha_stable: float = 0.5
    phi_bridge: float = 0.5
    beta_surv_cond: tuple = (-0.5, -0.5)
    beta_resp_cond: tuple = (-0.5, -0.5)
    censor_rate: float = 0.1
    tau: float = 2.0
    grid_points: int = 100
    size_regime: str = "u20_60"
    covariate_sd: tuple = (2.0, 3.0)
    rng_seed: int | None = None

    def __post_init__(self):
        for name in ("beta_surv_cond", "beta_resp_cond", "covariate_sd"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be at least 2")
        if not 0 < self.alpha_stable <= 1:
            raise ValueError("alpha_stable must lie in (0, 1]")
        if not 0 < self.phi_bridge <= 1:
            raise ValueError("phi_bridge must lie in (0, 1]")
        if self.size_regime not in SIZE_REGIMES:
            raise ValueError(f"size_regime must be one of {sorted(SIZE_REGIMES)}")
        if not (len(self.beta_surv_cond) == len(self.beta_resp_cond) == len(self.covariate_sd)):
            raise ValueError("coefficient and covariate lengths differ")
        if self.censor_rate <= 0 or self.tau <= 0 or self.grid_points < 1:
            raise ValueError("censor_rate, tau and grid_points must be positive")

    def with_marginal_effect(self, value: float) -> "SimConfig":
        """Set every response slope so that its marginal value is ``value``."""
        k = len(self.beta_resp_cond)
        return replace(self, beta_resp_cond=(value / self.phi_bridge,) * k)

    @property
    def panel_grid(self) -> np.ndarray:
        m = self.grid_points
        return np.arange(1, m + 1) * self.tau / m

    @property
    def truth(self) -> "SimTruth":
        return SimTruth(self)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SimConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SimTruth:
    """Marginal quantities implied by a :class:`SimConfig`."""

    config: SimConfig = field(repr=False)

    @property
    def slopes(self) -> np.ndarray:
        return self.config.phi_bridge * np.asarray(self.config.beta_resp_cond)

    def beta(self, t) -> np.ndarray:
        """Marginal coefficients ``(phi log t, phi beta'_1, ...)`` at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((t.size, 1 + self.slopes.size))
        with np.errstate(divide="ignore"):
            out[:, 0] = self.config.phi_bridge * np.log(t)
        out[:, 1:] = self.slopes
        return out

    def marginal_hazard(self, t, x) -> np.ndarray:
        """``alpha t^(alpha-1) exp(alpha beta'' x)`` (unit baseline hazard)."""
        a = self.config.alpha_stable
        lin = np.asarray(x, dtype=float) @ np.asarray(self.config.beta_surv_cond)
        return a * np.asarray(t, dtype=float) ** (a - 1.0) * np.exp(a * lin)


def sample_positive_stable(alpha: float, rng: np.random.Generator, size=None):
    """Positive stable draws with Laplace transform ``exp(-s**alpha)``.

    Chambers-Mallows-Stuck (Kanter) representation with ``theta ~ U(0, pi)``
    and ``W ~ Exp(1)``.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if alpha == 1:
        return 1.0 if size is None else np.ones(size)
    theta = rng.uniform(0.0, np.pi, size)
    w = rng.exponential(1.0, size)
    return (
        np.sin(alpha * theta) / np.sin(theta) ** (1.0 / alpha)
        * (np.sin((1.0 - alpha) * theta) / w) ** ((1.0 - alpha) / alpha)
    )


def sample_bridge(phi: float, rng: np.random.Generator, size=None, u=None):
    """Bridge(0, phi) draws by inversion: ``log(sin(phi pi u) / sin(phi pi (1-u))) / phi``.

    ``u`` may be supplied directly (for testing); otherwise it is drawn.
    """
    if not 0 < phi < 1:
        raise ValueError("phi must lie in (0, 1)")
    if u is None:
        u = rng.uniform(0.0, 1.0, size)
    u = np.asarray(u, dtype=float)
    out = (np.log(np.sin(phi * np.pi * u)) - np.log(np.sin(phi * np.pi * (1.0 - u)))) / phi
    return float(out) if out.ndim == 0 else out


def bridge_density(b, phi: float):
    """Density ``sin(phi pi) / (2 pi (cosh(phi b) + cos(phi pi)))``."""
    b = np.asarray(b, dtype=float)
    with np.errstate(over="ignore"):
        return np.sin(phi * np.pi) / (2.0 * np.pi * (np.cosh(phi * b) + np.cos(phi * np.pi)))


def sample_cluster_sizes(gamma, b, regime: str, rng: np.random.Generator) -> np.ndarray:
    """Cluster sizes from the median-split mixture of discrete uniforms.

    Both effects below their sample medians gives the low range, both at or
    above gives the high range, anything else the middle range.
    """
    gamma = np.asarray(gamma, dtype=float)
    b = np.asarray(b, dtype=float)
    if gamma.size < 2 or gamma.shape != b.shape:
        raise ValueError("need at least two clusters and matching gamma/b lengths")
    (l0, l1), (m0, m1), (h0, h1) = SIZE_REGIMES[regime]
    low = (gamma < np.median(gamma)) & (b < np.median(b))
    high = (gamma >= np.median(gamma)) & (b >= np.median(b))
    lo_draw = rng.integers(l0, l1 + 1, gamma.size)
    mid_draw = rng.integers(m0, m1 + 1, gamma.size)
    hi_draw = rng.integers(h0, h1 + 1, gamma.size)
    return np.where(low, lo_draw, np.where(high, hi_draw, mid_draw)).astype(np.int64)


def _rng(config: SimConfig, rng) -> np.random.Generator:
    if rng is not None:
        return rng
    return np.random.default_rng(config.rng_seed)


def simulate_study(config: SimConfig, rng: np.random.Generator | None = None):
    """Draw one study; returns ``(StudyData, SimTruth)``.

    Per subject: normal covariates, a death time ``-log(U) / (gamma e^{beta'x})``,
    an ``Exp(censor_rate)`` censoring time truncated at ``tau``, and state 2
    vs 1 drawn independently at every panel time up to ``min(T, C)``.
    """
    rng = _rng(config, rng)
    n = config.n_clusters
    phi = config.phi_bridge
    gamma = np.atleast_1d(sample_positive_stable(config.alpha_stable, rng, n))
    b = sample_bridge(phi, rng, n) if phi < 1 else np.zeros(n)
    sizes = sample_cluster_sizes(gamma, b, config.size_regime, rng)
    N = int(sizes.sum())
    cl = np.repeat(np.arange(n), sizes)

    p = len(config.covariate_sd)
    X = rng.normal(0.0, 1.0, (N, p)) * np.asarray(config.covariate_sd)
    lin_surv = X @ np.asarray(config.beta_surv_cond)
    death = -np.log(rng.uniform(0.0, 1.0, N)) / (gamma[cl] * np.exp(lin_surv))
    cens = rng.exponential(1.0 / config.censor_rate, N)
    censor_time = np.minimum(cens, config.tau)

    grid = config.panel_grid
    eta = b[cl, None] + np.log(grid)[None, :] + (X @ np.asarray(config.beta_resp_cond))[:, None]
    occ = rng.uniform(0.0, 1.0, (N, grid.size)) < 1.0 / (1.0 + np.exp(-eta))
    seen = grid[None, :] <= np.minimum(death, cens)[:, None]
    # state 1 at time 0; record a change wherever the drawn state flips
    prev = np.zeros_like(occ)
    prev[:, 1:] = occ[:, :-1]
    flips = (occ != prev) & seen
    died = death <= censor_time

    subj_ids = np.arange(1, N + 1)
    rows, cols = np.nonzero(flips)
    split = np.searchsorted(rows, np.arange(N + 1))
    members: list[list] = [[] for _ in range(n)]
    for i in range(N):
        c = cols[split[i]:split[i + 1]]
        times = grid[c]
        vals = np.where(occ[i, c], 2, 1)
        if died[i]:
            times = np.append(times, death[i])
            vals = np.append(vals, 3)
        path = StepFunction._trusted(times, np.concatenate(([1], vals)).astype(np.int64))
        covs = tuple(StepFunction._trusted(np.empty(0), X[i, k:k + 1]) for k in range(p))
        members[cl[i]].append(SubjectRecord(int(subj_ids[i]), path, censor_time[i], covs))
    clusters = tuple(Cluster(k + 1, tuple(m)) for k, m in enumerate(members))
    data = StudyData(clusters, config.tau, (1, 2, 3), frozenset({3}))
    return data, SimTruth(config)


def censoring_fraction(data: StudyData) -> float:
    """Share of subjects whose entry into an absorbing state is not observed."""
    panel = data.panel
    absorbed = np.zeros(panel.n_subjects, dtype=bool)
    bank = panel.states
    hit = np.isin(bank.values, list(data.absorbing))
    owners = np.searchsorted(bank.offsets, np.flatnonzero(hit), side="right") - 1
    absorbed[owners] = True
    return float(1.0 - absorbed.mean())

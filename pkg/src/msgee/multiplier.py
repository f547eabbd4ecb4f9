"""Wild-bootstrap multiplier process, simultaneous bands and sup tests.

Draw ``b`` uses standard normal multipliers from its own generator seeded
with ``(seed, b)``.  The same draws therefore serve every coefficient, and
bands and tests built with one seed agree: ``p < alpha`` exactly when the
``1 - alpha`` band excludes zero somewhere on the domain.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .data import StudyData, alive
from .exceptions import EmptyDomainError
from .gee import FitConfig, FitResult
from .inference import InfluencePath, fit_with_influence, q_weight

__all__ = [
    "MultiplierDraw",
    "BandResult",
    "TestResult",
    "multipliers",
    "draw_W",
    "domain_mask",
    "sup_draws",
    "critical_value",
    "confidence_band",
    "ks_test",
    "SupPath",
    "stream_sups",
]

# rows of the K x B product formed at once
_CHUNK = 512


@dataclass(frozen=True, eq=False)
class MultiplierDraw:
    xi: np.ndarray
    grid: np.ndarray
    W_path: np.ndarray


@dataclass(frozen=True, eq=False)
class BandResult:
    """Simultaneous band ``beta_hat(t) +/- c_alpha / (sqrt(n) q_hat(t))``."""

    l: int
    domain: tuple
    c_alpha: float
    grid: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    B: int
    alpha: float

    def covers(self, values) -> bool:
        """True when ``values`` (scalar or one per grid point) lie inside everywhere."""
        v = np.broadcast_to(np.asarray(values, dtype=float), self.grid.shape)
        return bool(np.all((self.lower <= v) & (v <= self.upper)))

    def excludes_zero(self) -> bool:
        return not self.covers(0.0)


@dataclass(frozen=True)
class TestResult:
    l: int
    K_stat: float
    p_value: float
    B: int
    domain: tuple

    __test__ = False  # not a pytest class


def multipliers(n: int, B: int, seed: int, start: int = 0) -> np.ndarray:
    """``n x B`` matrix of standard normals; column ``b`` is seeded by ``(seed, start + b)``."""
    out = np.empty((n, B))
    for b in range(B):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), start + b]))
        out[:, b] = rng.standard_normal(n)
    return out


def draw_W(infl: InfluencePath, l: int, rng_seed: int = 0, b: int = 0, xi=None) -> MultiplierDraw:
    """One realisation of ``W_l(t) = n^{-1/2} sum_i Phi_il(t) xi_i`` on the grid of ``infl``."""
    if xi is None:
        xi = multipliers(infl.n, 1, rng_seed, start=b)[:, 0]
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (infl.n,):
        raise ValueError(f"need {infl.n} multipliers, got shape {xi.shape}")
    with threadpool_limits(1):
        W = infl.phi[:, :, l] @ xi / math.sqrt(infl.n)
    return MultiplierDraw(xi=xi, grid=infl.grid, W_path=W)


def domain_mask(infl: InfluencePath, l: int, domain) -> np.ndarray:
    """Grid points of ``infl`` in ``[t1, t2]`` with a usable ``q_hat``.

    Invalid points inside the domain are dropped with a warning; an empty
    result raises :class:`EmptyDomainError`.
    """
    t1, t2 = domain
    inside = (infl.grid >= t1) & (infl.grid <= t2)
    q = q_weight(infl)[:, l]
    usable = inside & infl.valid & np.isfinite(q)
    dropped = int(inside.sum() - usable.sum())
    if dropped:
        warnings.warn(f"{dropped} points in [{t1:g}, {t2:g}] have undefined q and are excluded",
                      RuntimeWarning, stacklevel=2)
    if not usable.any():
        raise EmptyDomainError(f"no estimable points in [{t1:g}, {t2:g}]")
    return usable


def sup_draws(phi_l, q_l, xi) -> np.ndarray:
    """``max_t |q(t) W^(b)(t)|`` for each column of ``xi``.

    ``phi_l`` is ``K x n`` (influences of one coefficient), ``q_l`` has
    length ``K``.  Rows are processed in fixed-size blocks and the
    arithmetic runs single-threaded, so results do not depend on the thread
    count.
    """
    phi_l = np.asarray(phi_l, dtype=float)
    n = phi_l.shape[1]
    out = np.zeros(xi.shape[1])
    with threadpool_limits(1):
        for k0 in range(0, phi_l.shape[0], _CHUNK):
            blk = phi_l[k0:k0 + _CHUNK] @ xi
            blk *= (q_l[k0:k0 + _CHUNK] / math.sqrt(n))[:, None]
            np.maximum(out, np.abs(blk).max(axis=0), out=out)
    return out


def critical_value(sups, alpha: float) -> float:
    """The ``(floor((1 - alpha) B) + 1)``-th smallest of the sup draws.

    This is the usual ceiling index unless ``(1 - alpha) B`` is a whole
    number, where it takes the next draw up.  That choice makes
    ``K > c_alpha`` equivalent to ``p < alpha``.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    s = np.sort(np.asarray(sups, dtype=float))
    k = min(math.floor((1.0 - alpha) * s.size + 1e-9) + 1, s.size)
    return float(s[k - 1])


def _check_grid(fit: FitResult, infl: InfluencePath):
    if not np.all(np.isin(infl.grid, fit.grid)):
        raise ValueError("influences were computed on a different grid")


def confidence_band(fit: FitResult, infl: InfluencePath, l: int, alpha: float = 0.05,
                    B: int = 1000, domain=None, rng_seed: int = 0) -> BandResult:
    """Simultaneous ``1 - alpha`` band for coefficient ``l`` over ``domain``.

    ``domain`` defaults to the whole grid of ``infl``.
    """
    _check_grid(fit, infl)
    if B < 100:
        raise ValueError("B must be at least 100")
    if domain is None:
        domain = (float(infl.grid[0]), float(infl.grid[-1]))
    mask = domain_mask(infl, l, domain)
    q = q_weight(infl)[mask, l]
    xi = multipliers(infl.n, B, rng_seed)
    c = critical_value(sup_draws(infl.phi[mask, :, l], q, xi), alpha)
    est = infl.beta[mask, l]
    half = c / (math.sqrt(infl.n) * q)
    return BandResult(l=l, domain=tuple(domain), c_alpha=c, grid=infl.grid[mask], estimate=est,
                      lower=est - half, upper=est + half, B=B, alpha=alpha)


def ks_test(fit: FitResult, infl: InfluencePath, l: int, B: int = 1000, domain=None,
            rng_seed: int = 0) -> TestResult:
    """Sup test of ``beta_l = 0`` on ``domain``; ``p = #{sup_b >= K} / B``."""
    _check_grid(fit, infl)
    if domain is None:
        domain = (float(infl.grid[0]), float(infl.grid[-1]))
    mask = domain_mask(infl, l, domain)
    q = q_weight(infl)[mask, l]
    K = float(np.max(np.abs(math.sqrt(infl.n) * q * infl.beta[mask, l])))
    sups = sup_draws(infl.phi[mask, :, l], q, multipliers(infl.n, B, rng_seed))
    p = float(np.count_nonzero(sups >= K)) / B
    return TestResult(l=l, K_stat=K, p_value=p, B=B, domain=tuple(domain))


@dataclass(frozen=True, eq=False)
class SupPath:
    """Estimates, weights and sup draws gathered by :func:`stream_sups`.

    ``usable[k, l]`` marks grid points entering the sup for coefficient
    ``l``; ``sups[l]`` holds the ``B`` draws of ``max_t |q W|``.
    """

    grid: np.ndarray
    beta: np.ndarray
    q: np.ndarray
    usable: np.ndarray
    sups: dict
    n: int
    domain: tuple

    def band(self, l: int, alpha: float = 0.05) -> BandResult:
        m = self.usable[:, l]
        if not m.any():
            raise EmptyDomainError("no estimable points in the domain")
        c = critical_value(self.sups[l], alpha)
        est = self.beta[m, l]
        half = c / (math.sqrt(self.n) * self.q[m, l])
        return BandResult(l=l, domain=self.domain, c_alpha=c, grid=self.grid[m], estimate=est,
                          lower=est - half, upper=est + half, B=self.sups[l].size, alpha=alpha)

    def test(self, l: int) -> TestResult:
        m = self.usable[:, l]
        if not m.any():
            raise EmptyDomainError("no estimable points in the domain")
        K = float(np.max(np.abs(math.sqrt(self.n) * self.q[m, l] * self.beta[m, l])))
        B = self.sups[l].size
        return TestResult(l=l, K_stat=K, p_value=float(np.count_nonzero(self.sups[l] >= K)) / B,
                          B=B, domain=self.domain)


def stream_sups(data: StudyData, h, config: FitConfig, domain, coefficients, B: int = 1000,
                rng_seed: int = 0, rule=alive, chunk: int = 256) -> SupPath:
    """Fit, form influences and bootstrap over ``domain`` block by block.

    Equivalent to :func:`confidence_band` and :func:`ks_test` on a full
    influence path, but never holds more than ``chunk`` time points of
    influences, which matters in ``iid`` mode where there is one influence
    per subject.  Each block starts its solver cold, so the estimates match
    a warm-started path only up to the solver tolerance.
    """
    from .data import jump_grid

    t1, t2 = domain
    grid = jump_grid(data, h)
    grid = grid[(grid >= t1) & (grid <= t2)]
    if grid.size == 0:
        raise EmptyDomainError(f"no grid points in [{t1:g}, {t2:g}]")
    n = data.panel.row_layout(config.weight_mode)[2]
    xi = multipliers(n, B, rng_seed)
    P = data.n_covariates + 1
    beta = np.full((grid.size, P), np.nan)
    q = np.full((grid.size, P), np.nan)
    usable = np.zeros((grid.size, P), dtype=bool)
    sups = {int(l): np.zeros(B) for l in coefficients}
    for k0 in range(0, grid.size, chunk):
        fit, infl = fit_with_influence(data, h, config, times=grid[k0:k0 + chunk], rule=rule,
                                       warm_start=True)
        sl = slice(k0, k0 + fit.grid.size)
        beta[sl] = fit.beta
        with np.errstate(divide="ignore", invalid="ignore"):
            qb = 1.0 / np.sqrt(np.mean(infl.phi ** 2, axis=1))
        ok = infl.valid[:, None] & np.isfinite(qb)
        q[sl] = np.where(ok, qb, np.nan)
        usable[sl] = ok
        for l in sups:
            m = ok[:, l]
            if m.any():
                np.maximum(sups[l], sup_draws(infl.phi[m, :, l], qb[m, l], xi), out=sups[l])
    return SupPath(grid=grid, beta=beta, q=q, usable=usable, sups=sups, n=n,
                   domain=(float(t1), float(t2)))

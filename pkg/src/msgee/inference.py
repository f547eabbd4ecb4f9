"""Plug-in influence functions and sandwich covariance.

With ``beta_hat`` in place of the true coefficients and empirical means in
place of expectations::

    H(t)    = (1/n) sum_i w_i sum_j s r D' V D,      D = f'(eta) x
    psi_ij  = H(t)^{-1} A_ij(beta_hat, t)
    Phi_i   = w_i sum_j psi_ij
    Sigma(s, t) = (1/n) sum_i Phi_i(s) Phi_i(t)'

and ``se(t) = sqrt(diag Sigma(t, t) / n)``.  In ``iid`` mode ``n`` counts
subjects and every ``Phi_i`` belongs to a single subject.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import IndicatorSlice, StudyData, alive
from .exceptions import InsufficientClustersError, SingularDesignError
from .gee import (
    COND_LIMIT,
    FitConfig,
    FitResult,
    _information,
    _outer,
    _path_times,
    _row_scores,
    run_sweep,
)

__all__ = [
    "InfluencePath",
    "h_matrix",
    "influence",
    "influence_path",
    "fit_with_influence",
    "sandwich_cov",
    "pointwise_se",
    "q_weight",
]


@dataclass(frozen=True, eq=False)
class InfluencePath:
    """Aggregated influences ``Phi`` (``K x n x (p+1)``) and ``H`` along a grid.

    ``valid`` marks the points where ``H`` was safely invertible and the fit
    converged; other points hold NaN.
    """

    grid: np.ndarray
    phi: np.ndarray
    H: np.ndarray
    valid: np.ndarray
    beta: np.ndarray
    mode: str

    @property
    def n(self) -> int:
        return self.phi.shape[1]

    def covariance(self, k_s: int, k_t: int) -> np.ndarray:
        return sandwich_cov(self.phi[k_s], self.phi[k_t])

    def restrict(self, mask) -> "InfluencePath":
        mask = np.asarray(mask, dtype=bool)
        return InfluencePath(
            grid=self.grid[mask],
            phi=self.phi[mask],
            H=self.H[mask],
            valid=self.valid[mask],
            beta=self.beta[mask],
            mode=self.mode,
        )


def _group_sums(rows, groups, n):
    """Sum the columns of ``rows`` (``K x N``) within sorted groups."""
    K = rows.shape[0]
    if rows.shape[1] == 0:
        return np.zeros((K, n))
    uniq, starts = np.unique(groups, return_index=True)
    out = np.zeros((K, n))
    out[:, uniq] = np.add.reduceat(rows, starts, axis=1)
    return out


def h_matrix(slc: IndicatorSlice, beta_hat, config: FitConfig) -> np.ndarray:
    """``H(t)`` evaluated at ``beta_hat`` for one slice.

    Raises
    ------
    SingularDesignError
        If ``H`` is singular or badly conditioned.
    """
    w, groups, n = slc.layout(config.weight_mode)
    a = (slc.s & slc.r)[None, :]
    beta = np.asarray(beta_hat, dtype=float).reshape(1, -1)
    aw = a * w[None, :]
    _, dw = _row_scores(beta, slc.y[None, :].astype(float), aw, slc.x, config.family)
    H = _information(dw, slc.x, _outer(slc.x))[0] / n
    ev = np.linalg.eigvalsh(H)
    if not (ev[0] > 0 and ev[-1] / ev[0] < COND_LIMIT):
        raise SingularDesignError(f"H is not invertible at t={slc.t}")
    return H


def influence(slc: IndicatorSlice, beta_hat, H_hat, config: FitConfig) -> np.ndarray:
    """Aggregated influences ``Phi_i`` (``n x (p+1)``) at one slice."""
    w, groups, n = slc.layout(config.weight_mode)
    H_hat = np.asarray(H_hat, dtype=float)
    ev = np.linalg.eigvalsh(H_hat)
    if not (ev[0] > 0 and ev[-1] / ev[0] < COND_LIMIT):
        raise SingularDesignError(f"H is not invertible at t={slc.t}")
    a = (slc.s & slc.r)[None, :]
    beta = np.asarray(beta_hat, dtype=float).reshape(1, -1)
    resid, _ = _row_scores(beta, slc.y[None, :].astype(float), a * w[None, :], slc.x,
                           config.family)
    order = np.argsort(groups, kind="stable")
    G = np.column_stack([
        _group_sums((resid * slc.x[:, p][None, :])[:, order], groups[order], n)[0]
        for p in range(slc.x.shape[1])
    ])
    return np.linalg.solve(H_hat, G.T).T


def influence_path(data: StudyData, fit: FitResult, mask=None) -> InfluencePath:
    """Influences along the grid of ``fit``.

    ``mask`` limits the computation to some grid points (the result then
    covers only those).  Non-converged or ill-conditioned points are NaN and
    flagged invalid.
    """
    if fit.fingerprint != data.fingerprint:
        raise ValueError("fit was computed on different data")
    keep = np.ones(fit.grid.size, bool) if mask is None else np.asarray(mask, dtype=bool)
    _, _, _, _, H, phi, ok = run_sweep(
        data, fit.h, fit.config, fit.grid, fit.rule,
        beta=np.nan_to_num(fit.beta), status=fit.status, influence_mask=keep,
    )
    return InfluencePath(grid=fit.grid[keep], phi=phi, H=H, valid=ok, beta=fit.beta[keep],
                         mode=fit.config.weight_mode)


def fit_with_influence(data: StudyData, h, config: FitConfig | None = None, times=None,
                       rule=alive, warm_start: bool = True, mask=None):
    """Solve and form influences in a single pass over the data.

    Returns ``(FitResult, InfluencePath)``; ``mask`` selects the grid points
    that receive influences.
    """
    config = config or FitConfig()
    data.check_transient(h)
    grid = _path_times(data, h, times)
    keep = np.ones(grid.size, bool) if mask is None else np.asarray(mask, dtype=bool)
    beta, status, iters, n_eff, H, phi, ok = run_sweep(
        data, h, config, grid, rule, warm_start, influence_mask=keep
    )
    fit = FitResult(grid=grid, beta=beta, status=status, iterations=iters, n_eff=n_eff,
                    config=config, fingerprint=data.fingerprint, h=h, rule=rule)
    infl = InfluencePath(grid=grid[keep], phi=phi, H=H, valid=ok, beta=beta[keep],
                         mode=config.weight_mode)
    return fit, infl


def sandwich_cov(phi_s, phi_t) -> np.ndarray:
    """``Sigma(s, t) = (1/n) sum_i Phi_i(s) Phi_i(t)'``."""
    phi_s = np.asarray(phi_s, dtype=float)
    phi_t = np.asarray(phi_t, dtype=float)
    if phi_s.shape != phi_t.shape:
        raise ValueError("influences at s and t must share the cluster layout")
    n = phi_s.shape[0]
    if n < 2:
        raise InsufficientClustersError(f"need at least 2 clusters, got {n}")
    return phi_s.T @ phi_t / n


def _second_moment(infl: InfluencePath) -> np.ndarray:
    """``(1/n) sum_i Phi_il(t)^2`` as a ``K x P`` array."""
    if infl.n < 2:
        raise InsufficientClustersError(f"need at least 2 clusters, got {infl.n}")
    return np.mean(infl.phi ** 2, axis=1)


def pointwise_se(fit_or_infl, infl: InfluencePath | None = None) -> np.ndarray:
    """Standard errors ``sqrt(Sigma_ll(t, t) / n)``, ``K x P`` (NaN where invalid).

    Accepts ``pointwise_se(infl)`` or ``pointwise_se(fit, infl)``; the fit is
    only used to check that both cover the same data.
    """
    if infl is None:
        infl = fit_or_infl
    elif not np.all(np.isin(infl.grid, fit_or_infl.grid)):
        raise ValueError("influences were computed on a different grid")
    return np.sqrt(_second_moment(infl) / infl.n)


def q_weight(infl: InfluencePath) -> np.ndarray:
    """Band weights ``{(1/n) sum_i Phi_il(t)^2}^{-1/2}``.

    Points with zero variance (or invalid ``H``) are NaN and must be excluded
    by callers.
    """
    m2 = _second_moment(infl)
    with np.errstate(divide="ignore"):
        q = 1.0 / np.sqrt(m2)
    q[~np.isfinite(q)] = np.nan
    return q

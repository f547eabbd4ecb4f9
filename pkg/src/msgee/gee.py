"""Pointwise solution of the weighted functional estimating equation.

At a fixed time ``t`` the score is::

    U(beta, t) = sum_i w_i sum_j s_ij r_ij f'(eta_ij) V(mu_ij) (y_ij - mu_ij) x_ij

with ``w_i = 1/M_i`` (``tcm``), ``1`` (``acm``) or, in ``iid`` mode, every
subject treated as a cluster of its own.  The root is found by Fisher
scoring, which for the logit link with the canonical weight is IRLS.

Single slices are solved by :func:`solve_batch` (vectorised numpy over a
batch of slices).  Whole paths go through the compiled sweep in
``_kernels``, which walks the grid once and never materialises the
``K x N`` indicator matrices.  Both use the same Newton iteration and
stopping rule.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import IndicatorSlice, StudyData, alive, jump_grid
from .exceptions import ConvergenceWarning, SeparationError, SingularDesignError
from . import _kernels
from .links import LinkFamily, get_family

__all__ = [
    "FitConfig",
    "PointFit",
    "FitResult",
    "Status",
    "estimating_function",
    "solve_at_time",
    "solve_batch",
    "fit_path",
]

WEIGHT_MODES = ("tcm", "acm", "iid")
SEPARATION_BOUND = 30.0
COND_LIMIT = 1e10
MAX_HALVINGS = 30


class Status:
    """Per-point solver outcome codes."""

    CONVERGED = 0
    MAX_ITER = 1
    SINGULAR = 2
    SEPARATION = 3
    EMPTY = 4

    names = {0: "converged", 1: "max_iter", 2: "singular", 3: "separation", 4: "empty"}


@dataclass(frozen=True)
class FitConfig:
    """Solver settings.

    ``variance`` selects the working weight: ``"canonical"`` uses
    ``1/(mu(1-mu))``, ``"constant"`` uses 1.  ``ridge`` adds a penalty
    ``ridge * sum(w) * |slopes|^2 / 2`` (the intercept is not penalised);
    it is 0 by default and changes the estimator when used.
    """

    family: LinkFamily | str = "logit"
    weight_mode: str = "tcm"
    max_iter: int = 50
    tol: float = 1e-8
    ridge: float = 0.0
    variance: str = "canonical"

    def __post_init__(self):
        fam = get_family(self.family)
        if self.variance == "constant":
            fam = fam.unweighted()
        elif self.variance != "canonical":
            raise ValueError(f"variance must be 'canonical' or 'constant', got {self.variance!r}")
        object.__setattr__(self, "family", fam)
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "link": self.family.name,
            "weight_mode": self.weight_mode,
            "max_iter": self.max_iter,
            "tol": self.tol,
            "ridge": self.ridge,
            "variance": self.variance,
        }


@dataclass(frozen=True)
class PointFit:
    t: float
    beta: np.ndarray
    converged: bool
    n_eff: int
    status: str = "converged"
    iterations: int = 0


@dataclass(frozen=True, eq=False)
class FitResult:
    """Piecewise-constant coefficient path on the jump grid."""

    grid: np.ndarray
    beta: np.ndarray
    status: np.ndarray
    iterations: np.ndarray
    n_eff: np.ndarray
    config: FitConfig
    fingerprint: str
    h: object = None
    rule: object = field(default=alive, repr=False)

    @property
    def converged(self) -> np.ndarray:
        return self.status == Status.CONVERGED

    @property
    def estimable(self) -> np.ndarray:
        return self.converged

    @property
    def points(self) -> list[PointFit]:
        return [
            PointFit(
                t=float(t),
                beta=self.beta[k],
                converged=bool(self.status[k] == Status.CONVERGED),
                n_eff=int(self.n_eff[k]),
                status=Status.names[int(self.status[k])],
                iterations=int(self.iterations[k]),
            )
            for k, t in enumerate(self.grid)
        ]

    def at(self, times) -> np.ndarray:
        """Coefficients at arbitrary times: value at the last grid point ``<= t``.

        Times before the first grid point, or landing on a non-converged
        point, give NaN rows.
        """
        times = np.atleast_1d(np.asarray(times, dtype=float))
        idx = np.searchsorted(self.grid, times, side="right") - 1
        out = np.full((times.size, self.beta.shape[1]), np.nan)
        ok = idx >= 0
        out[ok] = self.beta[idx[ok]]
        bad = ok.copy()
        bad[ok] = self.status[idx[ok]] != Status.CONVERGED
        out[bad] = np.nan
        return out


# ----------------------------------------------------------------------------
# batch kernels


def _linear_predictor(beta, X):
    if X.ndim == 2:
        return beta @ X.T
    return np.einsum("knp,kp->kn", X, beta)


def _pieces(beta, X, fam: LinkFamily):
    """Mean, score multiplier ``f' V`` and information weight ``f'^2 V``."""
    eta = _linear_predictor(beta, X)
    mu = fam.mu(eta)
    if fam.canonical:
        c = None
        d = mu * (1.0 - mu)
    else:
        fp = fam.f_prime(eta)
        v = fam.v_weight(mu)
        c = fp * v
        d = fp * c
    return mu, c, d


def _row_scores(beta, y, aw, X, fam):
    """Per-row score multipliers ``a w f' V (y - mu)`` and info weights ``a w f'^2 V``."""
    mu, c, d = _pieces(beta, X, fam)
    resid = aw * (y - mu)
    if c is not None:
        resid *= c
    return resid, aw * d


def _contract(rows, X):
    """``sum_n rows[k, n] x[n]`` for shared or per-time designs."""
    if X.ndim == 2:
        return rows @ X
    return np.einsum("kn,knp->kp", rows, X)


def _information(dw, X, XX):
    P = X.shape[-1]
    if X.ndim == 2:
        return (dw @ XX).reshape(-1, P, P)
    return np.einsum("kn,knp,knq->kpq", dw, X, X)


def _outer(X):
    if X.ndim != 2:
        return None
    return (X[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)


def _penalty(beta, scale, ridge):
    pen = np.zeros_like(beta)
    if ridge > 0:
        pen[:, 1:] = ridge * scale[:, None] * beta[:, 1:]
    return pen


def _score(beta, y, aw, X, fam, ridge, scale):
    resid, _ = _row_scores(beta, y, aw, X, fam)
    return _contract(resid, X) - _penalty(beta, scale, ridge)


def _take(X, idx):
    return X if X.ndim == 2 else X[idx]


def initial_beta(y, aw, P, fam) -> np.ndarray:
    """Intercept at ``g`` of the weighted mean response, slopes at zero."""
    tot = aw.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ybar = (aw * y).sum(axis=1) / tot
    ybar = np.clip(np.nan_to_num(ybar, nan=0.5), 1e-6, 1 - 1e-6)
    beta = np.zeros((y.shape[0], P))
    beta[:, 0] = fam.g(ybar)
    return beta


def solve_batch(y, a, X, w, config: FitConfig, init=None):
    """Solve the estimating equation at ``K`` time points simultaneously.

    Parameters
    ----------
    y, a : (K, N) bool arrays
        Responses and the product ``s * r`` of the indicators.
    X : (N, P) or (K, N, P) array
        Design including the intercept column.
    w : (N,) array
        Row weights (``1/M_i`` for ``tcm``).
    init : (K, P) array, optional
        Starting values; defaults to :func:`initial_beta`.

    Returns
    -------
    beta, status, iterations, n_eff
    """
    fam = config.family
    y = np.asarray(y, dtype=bool)
    a = np.asarray(a, dtype=bool)
    K, N = y.shape
    P = X.shape[-1]
    aw_full = a * w[None, :]
    yf = y.astype(float)
    n_eff = a.sum(axis=1)
    scale = aw_full.sum(axis=1)
    beta = initial_beta(yf, aw_full, P, fam) if init is None else np.array(init, dtype=float)
    beta = np.broadcast_to(beta, (K, P)).copy()
    status = np.full(K, Status.MAX_ITER, dtype=np.int8)
    iters = np.zeros(K, dtype=np.int32)

    status[n_eff == 0] = Status.EMPTY
    # a constant response has no finite intercept root
    act_y = (yf * a).sum(axis=1)
    flat = (n_eff > 0) & ((act_y == 0) | (act_y == n_eff))
    status[flat] = Status.SEPARATION

    todo = np.flatnonzero(status == Status.MAX_ITER)
    last_step = np.full(K, np.inf)
    XX = _outer(X)
    while todo.size:
        yk, awk, Xk = yf[todo], aw_full[todo], _take(X, todo)
        bk = beta[todo]
        resid, dw = _row_scores(bk, yk, awk, Xk, fam)
        U = _contract(resid, Xk) - _penalty(bk, scale[todo], config.ridge)
        J = _information(dw, Xk, XX)
        if config.ridge > 0:
            idx = np.arange(1, P)
            J[:, idx, idx] += config.ridge * scale[todo, None]
        unorm = np.abs(U).max(axis=1)
        done = (unorm < config.tol * scale[todo]) & (last_step[todo] < config.tol)
        status[todo[done]] = Status.CONVERGED

        ev = np.linalg.eigvalsh(J)
        with np.errstate(divide="ignore", invalid="ignore"):
            cond = ev[:, -1] / ev[:, 0]
        singular = ~done & ((ev[:, 0] <= 0) | ~(cond < COND_LIMIT))
        diverged = ~done & (np.abs(bk).max(axis=1) > SEPARATION_BOUND)
        status[todo[diverged]] = Status.SEPARATION
        singular &= ~diverged
        status[todo[singular]] = Status.SINGULAR
        exhausted = ~done & ~diverged & ~singular & (iters[todo] >= config.max_iter)
        go = ~(done | diverged | singular | exhausted)
        if not go.any():
            break
        sel = todo[go]
        step = np.linalg.solve(J[go], U[go][..., None])[..., 0]
        base = unorm[go]
        lam = np.ones(sel.size)
        cand = beta[sel] + step
        pending = np.arange(sel.size)
        for _ in range(MAX_HALVINGS):
            rows = sel[pending]
            Un = _score(cand[pending], yf[rows], aw_full[rows], _take(X, rows), fam,
                        config.ridge, scale[rows])
            worse = np.abs(Un).max(axis=1) > base[pending]
            if not worse.any():
                break
            pending = pending[worse]
            lam[pending] *= 0.5
            cand[pending] = beta[sel[pending]] + lam[pending, None] * step[pending]
        moved = cand - beta[sel]
        beta[sel] = cand
        last_step[sel] = np.abs(moved).max(axis=1)
        iters[sel] += 1
        todo = sel
    return beta, status, iters, n_eff


# ----------------------------------------------------------------------------
# single-slice API


def _slice_arrays(slc: IndicatorSlice, config: FitConfig):
    w, _, _ = slc.layout(config.weight_mode)
    a = (slc.s & slc.r)[None, :]
    return slc.y[None, :], a, np.asarray(slc.x, dtype=float), w


def estimating_function(slc: IndicatorSlice, beta, config: FitConfig) -> np.ndarray:
    """Value of the weighted score ``U(beta, t)`` for one slice."""
    y, a, X, w = _slice_arrays(slc, config)
    beta = np.asarray(beta, dtype=float).reshape(1, -1)
    if beta.shape[1] != X.shape[1]:
        raise ValueError(f"beta has {beta.shape[1]} entries, design has {X.shape[1]} columns")
    aw = a * w[None, :]
    return _score(beta, y.astype(float), aw, X, config.family, config.ridge, aw.sum(axis=1))[0]


def solve_at_time(slc: IndicatorSlice, config: FitConfig, init=None) -> PointFit:
    """Root of the estimating equation at a single time.

    Raises
    ------
    SingularDesignError
        If no row is active or the weighted design is rank deficient.
    SeparationError
        If the iterates diverge (no finite root).

    A run that stops at ``max_iter`` warns and returns the last iterate with
    ``converged=False``.
    """
    y, a, X, w = _slice_arrays(slc, config)
    if init is not None:
        init = np.asarray(init, dtype=float).reshape(1, -1)
    beta, status, iters, n_eff = solve_batch(y, a, X, w, config, init)
    code = int(status[0])
    if code == Status.EMPTY:
        raise SingularDesignError(f"no observed at-risk rows at t={slc.t}")
    if code == Status.SINGULAR:
        raise SingularDesignError(f"weighted design is rank deficient at t={slc.t}")
    if code == Status.SEPARATION:
        raise SeparationError(f"no finite root at t={slc.t} (separation)")
    if code == Status.MAX_ITER:
        warnings.warn(f"no convergence in {config.max_iter} iterations at t={slc.t}",
                      ConvergenceWarning, stacklevel=2)
    return PointFit(
        t=slc.t,
        beta=beta[0],
        converged=code == Status.CONVERGED,
        n_eff=int(n_eff[0]),
        status=Status.names[code],
        iterations=int(iters[0]),
    )


# ----------------------------------------------------------------------------
# path


def run_sweep(
    data: StudyData,
    h,
    config: FitConfig,
    times,
    rule=alive,
    warm_start: bool = True,
    beta=None,
    status=None,
    influence_mask=None,
):
    """Drive the compiled sweep; solves unless ``beta`` is given.

    Returns ``(beta, status, iterations, n_eff, H, phi, ok)`` where the last
    three cover the times selected by ``influence_mask`` (in order).
    """
    panel = data.panel
    times = np.ascontiguousarray(times, dtype=float)
    K = times.size
    P = panel.p + 1
    w, groups, n = panel.row_layout(config.weight_mode)
    inputs = panel.sweep_inputs(h, rule)
    slot = np.full(K, -1, dtype=np.int64)
    if influence_mask is not None:
        sel = np.flatnonzero(np.asarray(influence_mask, dtype=bool))
        slot[sel] = np.arange(sel.size)
    n_slots = int((slot >= 0).sum())
    solve = beta is None
    beta_in = np.zeros((K, P)) if solve else np.ascontiguousarray(beta, dtype=float)
    status_in = np.zeros(K, np.int8) if status is None else np.asarray(status, np.int8)
    return _kernels.sweep(
        times,
        inputs["st_init"], inputs["ev_t"], inputs["ev_s"], inputs["ev_v"],
        inputs["cov_init"], inputs["cv_t"], inputs["cv_s"], inputs["cv_c"], inputs["cv_v"],
        inputs["censor"], inputs["at_risk"], inputs["resp"],
        np.ascontiguousarray(w, dtype=float), np.ascontiguousarray(groups, dtype=np.int64), n,
        _kernels.family_code(config.family), config.tol, config.max_iter, config.ridge,
        SEPARATION_BOUND, COND_LIMIT, MAX_HALVINGS,
        solve, warm_start, beta_in, status_in,
        slot, n_slots,
    )


def _path_times(data, h, times):
    grid = jump_grid(data, h) if times is None else np.asarray(times, dtype=float).reshape(-1)
    if grid.size and np.any(np.diff(grid) <= 0):
        raise ValueError("times must be strictly increasing")
    return grid


def fit_path(
    data: StudyData,
    h,
    config: FitConfig | None = None,
    times=None,
    rule=alive,
    warm_start: bool = True,
) -> FitResult:
    """Solve the estimating equation at every jump-grid time.

    With ``warm_start`` each time starts from the last converged solution;
    otherwise from its own pooled-mean value, so every time is solved
    independently (both iterate to the same tolerance).  Failed points are
    flagged in ``status``; the path is never aborted.

    ``times`` restricts the solve to the given increasing times, which need
    not be grid points: the slice at ``t`` equals the slice at the last grid
    point ``<= t``.
    """
    config = config or FitConfig()
    data.check_transient(h)
    grid = _path_times(data, h, times)
    beta, status, iters, n_eff, _, _, _ = run_sweep(data, h, config, grid, rule, warm_start)
    n_bad = int(np.sum(status == Status.MAX_ITER))
    if n_bad:
        warnings.warn(f"{n_bad} time points did not converge", ConvergenceWarning, stacklevel=2)
    return FitResult(
        grid=grid,
        beta=beta,
        status=status,
        iterations=iters,
        n_eff=n_eff,
        config=config,
        fingerprint=data.fingerprint,
        h=h,
        rule=rule,
    )


def with_mode(config: FitConfig, mode: str) -> FitConfig:
    return replace(config, family=config.family.name, weight_mode=mode)

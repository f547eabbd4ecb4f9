"""Compiled sweep over a sorted time grid.

The sweep applies state and covariate change events in time order, gathers
the rows with ``s * r = 1`` at each time, and either solves the estimating
equation there (Fisher scoring with step halving) or evaluates it at given
coefficients.  Optionally it accumulates ``H`` and the per-cluster
influences at the same time.
"""

from __future__ import annotations

import numpy as np
from numba import njit

EPS = 1e-12

# family codes
LOGIT, LOGIT_FLAT, CLOGLOG, CLOGLOG_FLAT = 0, 1, 2, 3

# status codes, mirrored in gee.Status
CONVERGED, MAX_ITER, SINGULAR, SEPARATION, EMPTY = 0, 1, 2, 3, 4


def family_code(family) -> int:
    base = {"logit": LOGIT, "cloglog": CLOGLOG}[family.name]
    return base if family.weighted else base + 1


@njit(cache=True)
def _pieces(fam, eta):
    """Return ``(mu, f' V, f'^2 V)`` for one linear predictor."""
    if fam <= LOGIT_FLAT:
        if eta >= 0.0:
            e = np.exp(-eta)
            m = 1.0 / (1.0 + e)
        else:
            e = np.exp(eta)
            m = e / (1.0 + e)
        mu = min(max(m, EPS), 1.0 - EPS)
        if fam == LOGIT:
            return mu, 1.0, mu * (1.0 - mu)
        fp = m * (1.0 - m)
        return mu, fp, fp * fp
    ee = np.exp(eta)
    mu = min(max(-np.expm1(-ee), EPS), 1.0 - EPS)
    fp = np.exp(eta - ee)
    if fam == CLOGLOG:
        c = fp / (mu * (1.0 - mu))
    else:
        c = fp
    return mu, c, fp * c


@njit(cache=True)
def _g(fam, p):
    if fam <= LOGIT_FLAT:
        return np.log(p) - np.log1p(-p)
    return np.log(-np.log1p(-p))


@njit(cache=True)
def _accumulate(fam, beta, m, xb, yb, wb, ridge, scale, U, J):
    P = beta.size
    for a in range(P):
        U[a] = 0.0
        for b in range(P):
            J[a, b] = 0.0
    for r in range(m):
        eta = 0.0
        for a in range(P):
            eta += xb[r, a] * beta[a]
        mu, c, d = _pieces(fam, eta)
        res = wb[r] * c * (yb[r] - mu)
        dw = wb[r] * d
        for a in range(P):
            U[a] += res * xb[r, a]
            xa = dw * xb[r, a]
            for b in range(a + 1):
                J[a, b] += xa * xb[r, b]
    for a in range(P):
        for b in range(a):
            J[b, a] = J[a, b]
    if ridge > 0.0:
        for a in range(1, P):
            U[a] -= ridge * scale * beta[a]
            J[a, a] += ridge * scale


@njit(cache=True)
def _well_conditioned(J, cond_limit):
    ev = np.linalg.eigvalsh(J)
    return ev[0] > 0.0 and ev[-1] / ev[0] < cond_limit


@njit(cache=True)
def _newton(fam, beta, m, xb, yb, wb, scale, tol, max_iter, ridge, bound, cond_limit,
            max_halvings):
    """Solve in place; returns ``(status, iterations)``."""
    P = beta.size
    U = np.empty(P)
    J = np.empty((P, P))
    old = np.empty(P)
    step = np.zeros(P)
    old_norm = np.inf
    have_old = False
    lam = 1.0
    halvings = 0
    iters = 0
    while True:
        _accumulate(fam, beta, m, xb, yb, wb, ridge, scale, U, J)
        unorm = 0.0
        for a in range(P):
            unorm = max(unorm, abs(U[a]))
        if have_old and unorm > old_norm and halvings < max_halvings:
            lam *= 0.5
            halvings += 1
            for a in range(P):
                beta[a] = old[a] + lam * step[a]
            continue
        bmax = 0.0
        for a in range(P):
            bmax = max(bmax, abs(beta[a]))
        if bmax > bound:
            return SEPARATION, iters
        if not _well_conditioned(J, cond_limit):
            return SINGULAR, iters
        step = np.linalg.solve(J, U)
        smax = 0.0
        for a in range(P):
            smax = max(smax, abs(step[a]))
        if unorm < tol * scale and smax < tol:
            return CONVERGED, iters
        if iters >= max_iter:
            return MAX_ITER, iters
        for a in range(P):
            old[a] = beta[a]
            beta[a] = beta[a] + step[a]
        old_norm = unorm
        have_old = True
        lam = 1.0
        halvings = 0
        iters += 1


@njit(cache=True)
def sweep(
    times,
    st_init, ev_t, ev_s, ev_v,
    cov_init, cv_t, cv_s, cv_c, cv_v,
    censor, at_risk, resp, w, groups, n_groups,
    fam, tol, max_iter, ridge, bound, cond_limit, max_halvings,
    solve, warm, beta_in, status_in,
    infl_slot, n_slots,
):
    """Solve (``solve=True``) or evaluate along ``times``.

    ``infl_slot[k] >= 0`` requests ``H`` and influences at time ``k`` stored
    in that slot; influences are only formed at converged points with a
    well-conditioned ``H``.
    """
    K = times.size
    N = censor.size
    p = cov_init.shape[1]
    P = p + 1
    state = st_init.copy()
    cov = cov_init.copy()
    beta_out = np.full((K, P), np.nan)
    status = np.full(K, EMPTY, dtype=np.int8)
    iters = np.zeros(K, dtype=np.int32)
    n_eff = np.zeros(K, dtype=np.int64)
    H_out = np.full((n_slots, P, P), np.nan)
    phi_out = np.full((n_slots, n_groups, P), np.nan)
    ok_out = np.zeros(n_slots, dtype=np.bool_)

    xb = np.empty((N, P))
    yb = np.empty(N)
    wb = np.empty(N)
    gb = np.empty(N, dtype=np.int64)
    beta = np.zeros(P)
    prev = np.zeros(P)
    have_prev = False
    U = np.empty(P)
    J = np.empty((P, P))
    G = np.zeros((n_groups, P))
    e = 0
    ce = 0
    for k in range(K):
        t = times[k]
        while e < ev_t.size and ev_t[e] <= t:
            state[ev_s[e]] = ev_v[e]
            e += 1
        while ce < cv_t.size and cv_t[ce] <= t:
            cov[cv_s[ce], cv_c[ce]] = cv_v[ce]
            ce += 1
        m = 0
        scale = 0.0
        wy = 0.0
        ny = 0
        for i in range(N):
            if at_risk[state[i]] and t <= censor[i]:
                xb[m, 0] = 1.0
                for c in range(p):
                    xb[m, c + 1] = cov[i, c]
                yv = 1.0 if resp[state[i]] else 0.0
                yb[m] = yv
                wb[m] = w[i]
                gb[m] = groups[i]
                scale += w[i]
                wy += w[i] * yv
                if resp[state[i]]:
                    ny += 1
                m += 1
        n_eff[k] = m
        if m == 0:
            status[k] = EMPTY
            continue
        if solve:
            if ny == 0 or ny == m:
                status[k] = SEPARATION
                continue
            if warm and have_prev:
                for a in range(P):
                    beta[a] = prev[a]
            else:
                ybar = min(max(wy / scale, 1e-6), 1.0 - 1e-6)
                beta[0] = _g(fam, ybar)
                for a in range(1, P):
                    beta[a] = 0.0
            st, it = _newton(fam, beta, m, xb, yb, wb, scale, tol, max_iter, ridge,
                             bound, cond_limit, max_halvings)
            status[k] = st
            iters[k] = it
            for a in range(P):
                beta_out[k, a] = beta[a]
            if st == CONVERGED:
                for a in range(P):
                    prev[a] = beta[a]
                have_prev = True
        else:
            status[k] = status_in[k]
            for a in range(P):
                beta[a] = beta_in[k, a]
                beta_out[k, a] = beta[a]
        slot = infl_slot[k]
        if slot < 0 or status[k] != CONVERGED:
            continue
        for g in range(n_groups):
            for a in range(P):
                G[g, a] = 0.0
        for a in range(P):
            for b in range(P):
                J[a, b] = 0.0
        for r in range(m):
            eta = 0.0
            for a in range(P):
                eta += xb[r, a] * beta[a]
            mu, c, d = _pieces(fam, eta)
            res = wb[r] * c * (yb[r] - mu)
            dw = wb[r] * d
            g = gb[r]
            for a in range(P):
                G[g, a] += res * xb[r, a]
                xa = dw * xb[r, a]
                for b in range(a + 1):
                    J[a, b] += xa * xb[r, b]
        for a in range(P):
            for b in range(a):
                J[b, a] = J[a, b]
        for a in range(P):
            for b in range(P):
                H_out[slot, a, b] = J[a, b] / n_groups
        if not _well_conditioned(H_out[slot], cond_limit):
            continue
        Hinv = np.linalg.inv(H_out[slot])
        ok_out[slot] = True
        for g in range(n_groups):
            for a in range(P):
                acc = 0.0
                for b in range(P):
                    acc += Hinv[a, b] * G[g, b]
                phi_out[slot, g, a] = acc
    return beta_out, status, iters, n_eff, H_out, phi_out, ok_out

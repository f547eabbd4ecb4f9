import warnings

import numpy as np
import pytest
from scipy.optimize import brentq, minimize

from msgee import (
    FitConfig,
    SeparationError,
    SingularDesignError,
    estimating_function,
    fit_path,
    jump_grid,
    slice_at,
    solve_at_time,
)
from msgee.gee import Status, solve_batch
from msgee.links import get_family

from conftest import study, subject


@pytest.fixture
def hand():
    """Cluster 1: one subject with y=1; cluster 2: two subjects with y=0."""
    return study([
        (1, [subject(1, [(0.5, 2)], 2.0, x=())]),
        (2, [subject(2, [], 2.0, x=()), subject(3, [], 2.0, x=())]),
    ])


class TestHandExamples:
    def test_score_at_zero(self, hand):
        s = slice_at(hand, 2, 1.0)
        assert estimating_function(s, [0.0], FitConfig(weight_mode="tcm"))[0] == pytest.approx(0.0, abs=1e-15)
        assert estimating_function(s, [0.0], FitConfig(weight_mode="iid"))[0] == pytest.approx(-0.5)
        assert estimating_function(s, [0.0], FitConfig(weight_mode="acm"))[0] == pytest.approx(-0.5)

    def test_roots(self, hand):
        s = slice_at(hand, 2, 1.0)
        assert solve_at_time(s, FitConfig(weight_mode="tcm")).beta[0] == pytest.approx(0.0, abs=1e-12)
        # one success in three independent rows
        assert solve_at_time(s, FitConfig(weight_mode="iid")).beta[0] == pytest.approx(-np.log(2))

    def test_separation(self, hand):
        s = slice_at(hand, 2, 0.2)  # nobody in state 2 yet
        with pytest.raises(SeparationError):
            solve_at_time(s, FitConfig())

    def test_empty_slice(self):
        d = study([(1, [subject(1, [], 0.5, x=())])])
        with pytest.raises(SingularDesignError):
            solve_at_time(slice_at(d, 2, 1.0), FitConfig())

    def test_beta_length_checked(self, hand):
        with pytest.raises(ValueError):
            estimating_function(slice_at(hand, 2, 1.0), [0.0, 1.0], FitConfig())


def _random_instance(rng):
    m = int(rng.integers(6, 21))
    p = int(rng.integers(0, 3))
    X = np.column_stack([np.ones(m), rng.normal(0, 1, (m, p))])
    eta = X @ rng.normal(0, 0.7, p + 1)
    y = rng.uniform(size=m) < 1 / (1 + np.exp(-eta))
    a = rng.uniform(size=m) < 0.85
    w = 1.0 / rng.integers(1, 4, m)
    return y, a, X, w


def _oracle(y, a, X, w, fam):
    """Maximise the weighted Bernoulli log-likelihood directly."""
    def negll(b):
        mu = np.clip(fam.f(X @ b), 1e-300, 1 - 1e-16)
        return -np.sum(w * a * (y * np.log(mu) + (1 - y) * np.log1p(-mu)))
    res = minimize(negll, np.zeros(X.shape[1]), method="Nelder-Mead",
                   options=dict(xatol=1e-11, fatol=1e-14, maxiter=40000, maxfev=40000))
    res = minimize(negll, res.x, method="BFGS", options=dict(gtol=1e-11))
    return res.x


@pytest.mark.parametrize("link", ["logit", "cloglog"])
def test_matches_likelihood_oracle(link):
    """With canonical variance weights the root maximises a weighted likelihood."""
    rng = np.random.default_rng(2024)
    fam = get_family(link)
    cfg = FitConfig(family=link)
    checked = 0
    for _ in range(100):
        y, a, X, w = _random_instance(rng)
        beta, status, _, _ = solve_batch(y[None], a[None], X, w, cfg)
        if status[0] != Status.CONVERGED:
            continue
        ref = _oracle(y.astype(float), a, X, w, fam)
        np.testing.assert_allclose(beta[0], ref, atol=1e-6)
        checked += 1
    assert checked >= 70


def test_constant_variance_root_finding():
    """Intercept-only with V=1: compare to a bracketed scalar root."""
    rng = np.random.default_rng(5)
    cfg = FitConfig(family="cloglog", variance="constant")
    fam = cfg.family
    for _ in range(20):
        m = int(rng.integers(5, 15))
        y = rng.uniform(size=m) < 0.4
        if y.all() or not y.any():
            continue
        a = np.ones(m, bool)
        w = 1.0 / rng.integers(1, 3, m)
        X = np.ones((m, 1))
        beta, status, _, _ = solve_batch(y[None], a[None], X, w, cfg)
        ref = brentq(lambda b: np.sum(w * fam.f_prime(b) * (y - fam.f(b))), -20, 5, xtol=1e-14)
        assert status[0] == Status.CONVERGED
        assert beta[0, 0] == pytest.approx(ref, abs=1e-8)


def test_score_zero_at_solution(sim_small):
    data, _ = sim_small
    cfg = FitConfig()
    fit = fit_path(data, 2, cfg)
    rng = np.random.default_rng(0)
    for k in rng.choice(np.flatnonzero(fit.converged), 20, replace=False):
        u = estimating_function(slice_at(data, 2, fit.grid[k]), fit.beta[k], cfg)
        assert np.abs(u).max() < 1e-6


def test_equal_cluster_sizes_tcm_equals_acm():
    rng = np.random.default_rng(3)
    clusters = []
    for c in range(25):
        members = []
        for j in range(3):
            t = float(rng.uniform(0.1, 1.5))
            members.append(subject(10 * c + j, [(t, 2)] if rng.uniform() < 0.6 else [],
                                   float(rng.uniform(1.0, 2.0)), x=(float(rng.normal()),)))
        clusters.append((c, members))
    d = study(clusters)
    tcm = fit_path(d, 2, FitConfig(weight_mode="tcm"))
    acm = fit_path(d, 2, FitConfig(weight_mode="acm"))
    ok = tcm.converged & acm.converged
    assert ok.sum() > 10
    np.testing.assert_allclose(tcm.beta[ok], acm.beta[ok], atol=1e-10)


def test_permutation_invariance(sim_small):
    data, _ = sim_small
    cl = list(data.clusters)
    rng = np.random.default_rng(1)
    perm = [cl[i] for i in rng.permutation(len(cl))]
    from msgee import StudyData
    shuffled = StudyData(tuple(perm), data.tau, data.state_space, data.absorbing)
    t = np.array([0.3, 1.0, 1.7])
    a = fit_path(data, 2, times=t)
    b = fit_path(shuffled, 2, times=t)
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-12)


def test_path_matches_single_slice(sim_small):
    data, _ = sim_small
    for mode in ("tcm", "iid"):
        cfg = FitConfig(weight_mode=mode)
        fit = fit_path(data, 2, cfg)
        for k in np.linspace(0, fit.grid.size - 1, 12).astype(int):
            if not fit.converged[k]:
                continue
            pf = solve_at_time(slice_at(data, 2, fit.grid[k]), cfg)
            np.testing.assert_allclose(fit.beta[k], pf.beta, atol=1e-8)


def test_cold_and_warm_start_agree(sim_small):
    data, _ = sim_small
    a = fit_path(data, 2, warm_start=True)
    b = fit_path(data, 2, warm_start=False)
    ok = a.converged & b.converged
    np.testing.assert_allclose(a.beta[ok], b.beta[ok], atol=1e-8)


def test_stationary_data_constant_path():
    """Data that never change after 0.1 give one estimate for all later t."""
    subs = [subject(k, [(0.1, 2)] if k % 3 else [], 2.0, x=(float(k % 4),)) for k in range(24)]
    d = study([(k // 2, subs[k:k + 2]) for k in range(0, 24, 2)])
    fit = fit_path(d, 2, times=[0.5, 1.0, 1.9])
    np.testing.assert_array_equal(fit.beta[0], fit.beta[1])
    np.testing.assert_array_equal(fit.beta[0], fit.beta[2])


def test_grid_and_lookup(sim_small):
    data, _ = sim_small
    fit = fit_path(data, 2)
    np.testing.assert_array_equal(fit.grid, jump_grid(data, 2))
    k = fit.grid.size // 2
    mid = 0.5 * (fit.grid[k] + fit.grid[k + 1])
    if fit.converged[k]:
        np.testing.assert_array_equal(fit.at(mid)[0], fit.beta[k])
    assert np.isnan(fit.at(fit.grid[0] / 2)).all()


def test_max_iter_warns(sim_small):
    data, _ = sim_small
    with pytest.warns(Warning):
        fit_path(data, 2, FitConfig(max_iter=1), times=[1.0])


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(weight_mode="gee")
    with pytest.raises(ValueError):
        FitConfig(tol=0)
    with pytest.raises(ValueError):
        FitConfig(variance="poisson")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        FitConfig(family="cloglog", ridge=0.1)

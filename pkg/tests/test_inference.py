import numpy as np
import pytest

from msgee import (
    FitConfig,
    InsufficientClustersError,
    SingularDesignError,
    estimating_function,
    fit_path,
    fit_with_influence,
    h_matrix,
    influence,
    influence_path,
    pointwise_se,
    q_weight,
    sandwich_cov,
    slice_at,
)

from conftest import study, subject


@pytest.fixture
def hand():
    return study([
        (1, [subject(1, [(0.5, 2)], 2.0, x=())]),
        (2, [subject(2, [], 2.0, x=()), subject(3, [], 2.0, x=())]),
    ])


def test_hand_values(hand):
    s = slice_at(hand, 2, 1.0)
    cfg = FitConfig()
    H = h_matrix(s, [0.0], cfg)
    assert H[0, 0] == pytest.approx(0.25)
    np.testing.assert_allclose(influence(s, [0.0], H, cfg)[:, 0], [2.0, -2.0])


def test_h_matches_finite_difference(sim_small):
    """Logit is canonical, so H is the exact Jacobian of -U/n."""
    data, _ = sim_small
    cfg = FitConfig(family="logit")
    fit = fit_path(data, 2, cfg)
    n = len(data.clusters)
    rng = np.random.default_rng(4)
    for k in rng.choice(np.flatnonzero(fit.converged), 8, replace=False):
        s = slice_at(data, 2, fit.grid[k])
        b = fit.beta[k]
        H = h_matrix(s, b, cfg)
        d = 1e-6
        fd = np.column_stack([
            -(estimating_function(s, b + d * e, cfg) - estimating_function(s, b - d * e, cfg))
            / (2 * d * n)
            for e in np.eye(b.size)
        ])
        np.testing.assert_allclose(H, fd, atol=1e-4)


def test_influences_sum_to_zero_and_psd(sim_small):
    data, _ = sim_small
    fit, infl = fit_with_influence(data, 2)
    v = infl.valid
    assert v.sum() > 50
    sums = infl.phi[v].sum(axis=1)
    assert np.abs(sums).max() < 1e-6
    for k in np.flatnonzero(v)[::20]:
        ev = np.linalg.eigvalsh(infl.covariance(k, k))
        assert ev.min() > -1e-12


def test_q_se_identity(sim_small):
    data, _ = sim_small
    fit, infl = fit_with_influence(data, 2)
    se = pointwise_se(infl)
    q = q_weight(infl)
    prod = (q * np.sqrt(infl.n) * se)[infl.valid]
    np.testing.assert_allclose(prod, 1.0, rtol=1e-12)
    np.testing.assert_array_equal(pointwise_se(fit, infl), se)


@pytest.mark.parametrize("mode", ["tcm", "acm", "iid"])
def test_path_influence_matches_single_slice(sim_small, mode):
    data, _ = sim_small
    cfg = FitConfig(weight_mode=mode)
    fit = fit_path(data, 2, cfg)
    infl = influence_path(data, fit)
    for k in np.flatnonzero(infl.valid)[::25]:
        s = slice_at(data, 2, fit.grid[k])
        H = h_matrix(s, fit.beta[k], cfg)
        np.testing.assert_allclose(infl.H[k], H, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(infl.phi[k], influence(s, fit.beta[k], H, cfg),
                                   rtol=1e-8, atol=1e-10)


def test_two_pass_equals_one_pass(sim_small):
    data, _ = sim_small
    fit, infl = fit_with_influence(data, 2)
    again = influence_path(data, fit_path(data, 2))
    np.testing.assert_allclose(infl.phi[infl.valid], again.phi[infl.valid], atol=1e-10)


def test_mask_restricts(sim_small):
    data, _ = sim_small
    fit = fit_path(data, 2)
    mask = np.zeros(fit.grid.size, bool)
    mask[::7] = True
    part = influence_path(data, fit, mask)
    full = influence_path(data, fit)
    assert part.grid.size == mask.sum()
    np.testing.assert_allclose(np.nan_to_num(part.phi), np.nan_to_num(full.phi[mask]))


def test_sandwich_cov():
    rng = np.random.default_rng(0)
    phi = rng.normal(size=(40, 3))
    np.testing.assert_allclose(sandwich_cov(phi, phi), phi.T @ phi / 40)
    with pytest.raises(InsufficientClustersError):
        sandwich_cov(phi[:1], phi[:1])
    with pytest.raises(ValueError):
        sandwich_cov(phi, phi[:, :2])


def test_singular_h(hand):
    s = slice_at(hand, 2, 1.0)
    with pytest.raises(SingularDesignError):
        influence(s, [0.0], np.zeros((1, 1)), FitConfig())


def test_fit_from_other_data_rejected(sim_small, hand):
    data, _ = sim_small
    with pytest.raises(ValueError):
        influence_path(hand, fit_path(data, 2, times=[1.0]))


def test_tcm_se_exceeds_iid_on_average(sim_medium):
    """Positive within-cluster correlation inflates the cluster-robust SE."""
    data, _ = sim_medium
    t = np.array([0.5, 1.0, 1.5])
    _, a = fit_with_influence(data, 2, FitConfig(weight_mode="tcm"), times=t)
    _, b = fit_with_influence(data, 2, FitConfig(weight_mode="iid"), times=t)
    assert np.nanmean(pointwise_se(a)[:, 1:]) > np.nanmean(pointwise_se(b)[:, 1:])

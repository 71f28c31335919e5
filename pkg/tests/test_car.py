import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from stvae import car
from oracles import beta_moments_quadrature

PAIR = np.array([[0.0, 1.0], [1.0, 0.0]])


def test_adjacency_full_grid():
    w = car.build_adjacency(np.ones((3, 3), dtype=bool))
    assert w.sum(axis=1)[4] == 8
    assert w.sum(axis=1)[0] == 3
    np.testing.assert_array_equal(w, w.T)
    np.testing.assert_array_equal(car.build_adjacency(np.ones((1, 2), dtype=bool)), PAIR)


def test_adjacency_rejects_disconnected_mask():
    m = np.zeros((4, 4), dtype=bool)
    m[0, 0] = m[3, 3] = True
    with pytest.raises(car.CarError, match="disconnected"):
        car.build_adjacency(m)


def test_default_mask_graph(mask):
    g = car.SpatialGraph.from_mask(mask)
    assert g.m == 52
    assert g.eigenvalues[0] == 0.0
    assert np.all(g.eigenvalues[1:] > 1e-9)


def test_leroux_hand_values():
    w = car.build_adjacency(np.ones((3, 3), dtype=bool))
    np.testing.assert_array_equal(car.leroux_precision(w, 0.0), np.eye(9))
    np.testing.assert_allclose(car.leroux_precision(PAIR, 0.5), [[1, -0.5], [-0.5, 1]])
    q = car.leroux_precision(w, 0.3)
    np.testing.assert_allclose(q @ np.ones(9), 0.7 * np.ones(9), atol=1e-14)
    assert car.log_det_precision([0.0, 2.0], 0.5) == pytest.approx(math.log(0.75), abs=1e-6)
    with pytest.raises(car.CarError):
        car.leroux_precision(PAIR, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.99), st.integers(0, 2**31 - 1))
def test_leroux_positive_definite_and_log_det(rho, seed):
    rng = np.random.default_rng(seed)
    g = rng.random((6, 6)) < 0.5
    w = np.triu(g, 1)
    w = (w | w.T).astype(float)
    # ring edges keep the graph connected
    for i in range(6):
        w[i, (i + 1) % 6] = w[(i + 1) % 6, i] = 1.0
    q = car.leroux_precision(w, rho)
    assert np.linalg.eigvalsh(q).min() > 0
    graph = car.SpatialGraph.from_adjacency(w)
    assert car.log_det_precision(graph.eigenvalues, rho) == pytest.approx(np.linalg.slogdet(q)[1], abs=1e-9)


def test_simulator_deterministic_and_degenerate(mask):
    g = car.SpatialGraph.from_mask(mask)
    p = car.CarParams(beta=1.5, tau2=0.7, eta2=0.2, rho=0.9, psi=0.6)
    a, b = car.simulate_car_st(p, g, 5, seed=9), car.simulate_car_st(p, g, 5, seed=9)
    assert np.array_equal(a.x, b.x)
    assert not np.array_equal(a.x, car.simulate_car_st(p, g, 5, seed=10).x)
    tiny = car.CarParams(beta=-2.0, tau2=1e-300, eta2=1e-300, rho=0.5, psi=0.5)
    np.testing.assert_allclose(car.simulate_car_st(tiny, g, 3, seed=1).x, -2.0, atol=1e-140)


def test_params_validation():
    with pytest.raises(car.CarError):
        car.CarParams(beta=0, tau2=0, eta2=1, rho=0.5, psi=0.5)
    with pytest.raises(car.CarError):
        car.CarParams(beta=0, tau2=1, eta2=1, rho=1.0, psi=0.5)


@pytest.mark.parametrize("mu,sd", [(0.5, 0.2), (-3.0, 0.5), (4.0, 0.3), (0.9, 10.0)])
def test_truncated_normal_matches_scipy(mu, sd):
    rng = np.random.default_rng(0)
    draws = np.array([car.truncated_normal(rng, mu, sd, 0.0, 1.0) for _ in range(4000)])
    assert np.all((draws >= 0) & (draws <= 1))
    ref = stats.truncnorm((0 - mu) / sd, (1 - mu) / sd, loc=mu, scale=sd)
    assert stats.kstest(draws, ref.cdf).pvalue > 1e-3


def test_gibbs_reproducible_and_shapes(mask):
    g = car.SpatialGraph.from_mask(mask)
    x = car.simulate_car_st(car.CarParams(0.5, 1.0, 0.3, 0.8, 0.5), g, 4, seed=2).x
    cfg = car.McmcConfig(iterations=300, burn_in=100, thin=2, seed=3)
    a, b = car.gibbs_fit(x, g, cfg), car.gibbs_fit(x, g, cfg)
    assert a.to_csv() == b.to_csv()
    assert len(a) == 100 and a.phi.shape == (100, 4, 52)
    assert np.all((a.rho > 0) & (a.rho < 1) & (a.psi > 0) & (a.psi < 1))
    assert np.all((a.tau2 > 0) & (a.eta2 > 0))


def test_gibbs_rejects_bad_input(mask):
    g = car.SpatialGraph.from_mask(mask)
    with pytest.raises(car.CarError):
        car.gibbs_fit(np.zeros((1, 52)), g)
    with pytest.raises(car.CarError):
        car.gibbs_fit(np.zeros((3, 51)), g)
    bad = np.zeros((3, 52))
    bad[1, 1] = np.nan
    with pytest.raises(car.CarError):
        car.gibbs_fit(bad, g)


def test_rho_acceptance_is_tuned(mask):
    g = car.SpatialGraph.from_mask(mask)
    x = car.simulate_car_st(car.CarParams(0.0, 1.0, 0.2, 0.9, 0.5), g, 6, seed=4).x
    post = car.gibbs_fit(x, g, car.McmcConfig(iterations=3000, burn_in=1000, seed=5))
    assert 0.1 < post.rho_acceptance < 0.7


def test_beta_posterior_matches_quadrature():
    x = np.array([[3.1, 2.4], [3.9, 2.8]])
    mean, second = beta_moments_quadrature(x)
    post = car.gibbs_fit(x, PAIR, car.McmcConfig(iterations=40_000, burn_in=2000, seed=1))
    assert abs(post.beta.mean() - mean) / abs(mean) < 0.02
    assert abs((post.beta**2).mean() - second) / second < 0.02


def test_beta_near_grand_mean_when_noise_dominates(mask):
    g = car.SpatialGraph.from_mask(mask)
    x = car.simulate_car_st(car.CarParams(2.0, 1e-4, 4.0, 0.5, 0.3), g, 8, seed=6).x
    post = car.gibbs_fit(x, g, car.McmcConfig(iterations=2000, burn_in=500, seed=7))
    # posterior sd of beta is about sqrt(eta2 / (T m)) ~ 0.1
    assert abs(post.beta.mean() - x.mean()) < 0.1


def _posterior(graph, psi, n=400, n_t=3, seed=0):
    rng = np.random.default_rng(seed)
    m = graph.m
    return car.CarPosterior(
        beta=np.full(n, 1.0),
        tau2=np.full(n, 0.5),
        eta2=np.full(n, 0.1),
        rho=np.full(n, 0.7),
        psi=np.full(n, psi),
        # same latent path in every sample so band width reflects only the recursion
        phi=np.broadcast_to(rng.normal(size=(n_t, m)), (n, n_t, m)).copy(),
        iterations=np.arange(n),
        graph=graph,
    )


def test_forecast_properties(mask):
    g = car.SpatialGraph.from_mask(mask)
    post = _posterior(g, 0.6)
    f = car.forecast_st(post, [0, 1, 2, 4], seed=1)
    np.testing.assert_allclose(f.mean[0], 1.0 + post.phi[:, -1].mean(axis=0))
    np.testing.assert_allclose(f.mean[2], 1.0 + 0.36 * post.phi[:, -1].mean(axis=0))
    widths = (f.upper - f.lower).mean(axis=1)
    assert np.all(np.diff(widths[1:]) > 0)
    zero = car.forecast_st(_posterior(g, 0.0), [1, 3], seed=1)
    np.testing.assert_allclose(zero.mean, 1.0)
    assert np.array_equal(car.forecast_st(post, [2], seed=4).lower, car.forecast_st(post, [2], seed=4).lower)
    with pytest.raises(car.CarError):
        car.forecast_st(post, [-1])


def test_posterior_csv_and_intervals(mask):
    post = _posterior(car.SpatialGraph.from_mask(mask), 0.5, n=5)
    lines = post.to_csv().splitlines()
    assert lines[0] == "iteration,beta,tau2,eta2,rho,psi" and len(lines) == 6
    assert post.interval("psi") == (0.5, 0.5)

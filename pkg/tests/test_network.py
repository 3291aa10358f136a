import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from rlrds.errors import ConfigError
from rlrds.network import (
    A1,
    A2,
    A3,
    DISTANCE_SQUARED_ON_A2,
    NetworkParams,
    Population,
    edge_prob,
    neighbor_selection_probs,
    sample_population,
)


def test_edge_prob_matches_logistic_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        xi, xj = rng.normal(size=3), rng.normal(size=3)
        rho0, rho1 = rng.normal(), rng.uniform(0, 3)
        d = np.linalg.norm(xi - xj)
        assert edge_prob(xi, xj, rho0, rho1) == pytest.approx(
            expit(rho0 - rho1 * d), abs=1e-12)


def test_edge_prob_symmetric_and_decreasing_in_distance():
    x = np.zeros(2)
    p_near = edge_prob(x, [0.1, 0.0], 1.0, 2.0)
    p_far = edge_prob(x, [3.0, 0.0], 1.0, 2.0)
    assert p_near > p_far
    assert edge_prob([1, 2], [3, 4], 0.5, 1.0) == edge_prob([3, 4], [1, 2], 0.5, 1.0)


def test_edge_prob_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        edge_prob([0.0], [np.inf], 1.0, 1.0)
    with pytest.raises(ConfigError):
        edge_prob([0.0], [1.0], 1.0, -0.5)


@given(rho0=st.floats(-5, 5), rho1=st.floats(0, 5),
       x=st.lists(st.floats(-10, 10), min_size=2, max_size=2),
       y=st.lists(st.floats(-10, 10), min_size=2, max_size=2))
@settings(max_examples=50, deadline=None)
def test_edge_prob_is_a_probability(rho0, rho1, x, y):
    p = edge_prob(x, y, rho0, rho1)
    assert 0.0 < p < 1.0


def test_network_params_validation():
    with pytest.raises(ConfigError):
        NetworkParams(rho0=0.0, rho1=-1.0, mu=[0.0], sigma=[[1.0]], beta_y=[0.0])
    with pytest.raises(ConfigError):
        NetworkParams(rho0=0.0, rho1=1.0, mu=[0.0, 0.0],
                      sigma=[[1.0, 2.0], [0.0, 1.0]], beta_y=[0.0])
    with pytest.raises(ConfigError):
        NetworkParams(rho0=0.0, rho1=1.0, mu=[0.0], sigma=[[1.0]],
                      beta_y=[0.0], t_min=2.0, t_max=1.0)


def test_network_params_dict_round_trip(net):
    back = NetworkParams.from_dict(net.to_dict())
    assert back.rho0 == net.rho0
    assert np.array_equal(back.mu, net.mu)
    assert np.array_equal(back.sigma, net.sigma)
    assert back.neighbor_rule == net.neighbor_rule


def test_sample_population_deterministic(small_net):
    a = sample_population(small_net, 200, np.random.default_rng(3))
    b = sample_population(small_net, 200, np.random.default_rng(3))
    assert np.array_equal(a.covariates, b.covariates)
    assert all(np.array_equal(x, y) for x, y in zip(a.neighbors, b.neighbors))


def test_sample_population_adjacency_is_symmetric(small_net):
    pop = sample_population(small_net, 150, np.random.default_rng(5))
    for i, nbrs in enumerate(pop.neighbors):
        assert i not in nbrs
        for j in nbrs:
            assert i in pop.neighbors[j]


def test_mean_degree_matches_monte_carlo_oracle():
    # E[degree] = (N-1) * E[expit(rho0 - rho1 * ||X - X'||)] with X, X' iid
    params = NetworkParams(rho0=1.0, rho1=2.0, mu=np.ones(3),
                           sigma=10 * np.eye(3), beta_y=np.zeros(10))
    rng = np.random.default_rng(11)
    chol = np.linalg.cholesky(params.sigma)
    x = params.mu + rng.standard_normal((200_000, 3)) @ chol.T
    y = params.mu + rng.standard_normal((200_000, 3)) @ chol.T
    p_link = expit(params.rho0 - params.rho1 * np.linalg.norm(x - y, axis=1))
    N = 1000
    expected = (N - 1) * p_link.mean()
    se = (N - 1) * p_link.std() / np.sqrt(p_link.size)
    degrees = [sample_population(params, N, np.random.default_rng(s)).mean_degree()
               for s in range(3)]
    observed = np.mean(degrees)
    # population draws add their own noise on top of the oracle's MC error
    assert abs(observed - expected) < 6 * se + 0.05 * expected


def test_population_save_load_round_trip(small_net, tmp_path):
    pop = sample_population(small_net, 80, np.random.default_rng(9))
    path = tmp_path / "pop.json"
    pop.save(path)
    back = Population.load(path)
    assert np.allclose(back.covariates, pop.covariates)
    assert all(np.array_equal(x, y) for x, y in zip(back.neighbors, pop.neighbors))


def test_neighbor_selection_uniform_for_a1_a3():
    cands = np.arange(10, dtype=float).reshape(5, 2)
    for a in (A1, A3):
        probs = neighbor_selection_probs(np.zeros(2), cands, a)
        assert np.allclose(probs, 0.2)


def test_neighbor_selection_distance_squared_on_a2():
    # two candidates at distances 1 and 2: weights 1 and 4
    cands = np.array([[1.0, 0.0], [2.0, 0.0]])
    probs = neighbor_selection_probs(np.zeros(2), cands, A2,
                                     DISTANCE_SQUARED_ON_A2)
    assert np.allclose(probs, [1 / 5, 4 / 5])


def test_neighbor_selection_zero_distances_fall_back_to_uniform():
    cands = np.zeros((4, 3))
    probs = neighbor_selection_probs(np.zeros(3), cands, A2)
    assert np.allclose(probs, 0.25)


def test_neighbor_selection_rejects_empty_candidates():
    with pytest.raises(ConfigError):
        neighbor_selection_probs(np.zeros(2), np.empty((0, 2)), A1)

import numpy as np
import pytest

from rlrds import inference as inf
from rlrds.errors import ConfigError, NumericalError
from rlrds.harness import default_network
from rlrds.network import sample_population
from rlrds.policies import RandomPolicy
from rlrds.rds import run_study


@pytest.fixture(scope="module")
def pairs():
    net = default_network(rho1=1.0)
    rng = np.random.default_rng(77)
    return inf.simulate_study_pairs(net, 500, 120, rng)


@pytest.fixture(scope="module")
def tiny_grid():
    net = default_network(rho1=1.0)
    return inf.ThetaGrid.mu_lattice(net, [[0, 1, 2], [0, 1, 2], [0, 1, 2]])


def cached(grid, rng=None):
    inf.ensure_cache(grid, kappa=120, N=500, B=50, K=500,
                     rng=rng or np.random.default_rng(5), N_ref=1500)
    return grid


# ---------------------------------------------------------------------------
# covariate pairs and MLE


def test_pairs_built_from_study_records(pairs):
    assert pairs.n > 0 and pairs.p == 3
    assert np.all(pairs.weights > 0)
    assert set(np.unique(pairs.alloc)) <= {0, 1, 2}


def test_pairs_shift_translates_both_sides(pairs):
    delta = np.array([1.0, -2.0, 0.5])
    shifted = pairs.shifted(delta)
    assert np.allclose(shifted.parent_x, pairs.parent_x + delta)
    assert np.allclose(shifted.child_x, pairs.child_x + delta)
    assert np.array_equal(shifted.family, pairs.family)


def test_covariate_mle_matches_lstsq_oracle(pairs):
    model = inf.covariate_mle(pairs)
    for a in np.unique(pairs.alloc):
        sel = pairs.alloc == a
        U = np.hstack([np.ones((sel.sum(), 1)), pairs.parent_x[sel]])
        w = np.sqrt(pairs.weights[sel])
        coef, *_ = np.linalg.lstsq(w[:, None] * U,
                                   w[:, None] * pairs.child_x[sel], rcond=None)
        assert np.allclose(model.phi[a], coef[0], atol=1e-8)
        assert np.allclose(model.G[a], coef[1:].T, atol=1e-8)


def test_covariate_mle_maximizes_loglik(pairs, rng):
    model = inf.covariate_mle(pairs)
    best = inf.covariate_loglik(model, pairs)
    for _ in range(5):
        other = inf.CovariateModel(
            {a: v + 0.1 * rng.normal(size=v.shape) for a, v in model.phi.items()},
            model.G, model.sigma_diag)
        assert inf.covariate_loglik(other, pairs) <= best


def test_model_shift_equivariance_is_exact(pairs):
    # fitting translated data must equal translating the fitted model
    delta = np.array([0.7, -1.1, 2.0])
    direct = inf.covariate_mle(pairs.shifted(delta))
    moved = inf.covariate_mle(pairs).shifted(delta)
    assert np.allclose(direct.vector(), moved.vector(), atol=1e-8)


def test_model_vector_round_trip(pairs):
    model = inf.covariate_mle(pairs)
    back = inf.CovariateModel.from_dict(model.to_dict())
    assert np.allclose(back.vector(), model.vector())


def test_llr_stat_zero_at_the_mle_and_nonnegative(pairs, rng):
    hat = inf.covariate_mle(pairs)
    assert inf.llr_stat(pairs, hat, hat) == pytest.approx(0.0, abs=1e-9)
    for _ in range(5):
        other = inf.CovariateModel(
            {a: v + 0.2 * rng.normal(size=v.shape) for a, v in hat.phi.items()},
            hat.G, hat.sigma_diag)
        assert inf.llr_stat(pairs, other, hat) >= -1e-9


# ---------------------------------------------------------------------------
# grid and cache


def test_mu_lattice_enumerates_the_product(tiny_grid):
    assert len(tiny_grid.params) == 27
    assert tiny_grid.truth_index is not None
    truth = tiny_grid.params[tiny_grid.truth_index]
    assert np.array_equal(truth.mu, np.ones(3))


def test_mu_lattice_without_truth_on_grid():
    net = default_network().replace(mu=np.array([9.0, 9.0, 9.0]))
    grid = inf.ThetaGrid.mu_lattice(net, [[0, 1], [0, 1], [0, 1]])
    assert grid.truth_index is None


def test_lattice_with_rho_axes_groups_by_shift():
    net = default_network()
    grid = inf.ThetaGrid.lattice(net, [[0, 1], [0, 1], [0, 1]],
                                 rho1_values=[1.0, 2.0])
    assert len(grid.params) == 16
    groups = grid.shift_groups()
    assert len(groups) == 2
    assert sorted(len(g) for g in groups) == [8, 8]


def test_ensure_cache_is_idempotent(tiny_grid):
    cached(tiny_grid)
    stats_before = tiny_grid.sim_stats.copy()
    # a second call with matching settings must not redraw anything
    inf.ensure_cache(tiny_grid, kappa=120, N=500, B=50, K=500,
                     rng=np.random.default_rng(999), N_ref=1500)
    assert np.array_equal(tiny_grid.sim_stats, stats_before)


def test_cache_statistics_are_sorted(tiny_grid):
    cached(tiny_grid)
    assert np.all(np.diff(tiny_grid.sim_stats, axis=1) >= 0)


def test_finite_b_quantile_oracle():
    stats = np.arange(19, dtype=float)
    # B = 19, alpha = 0.05: k = ceil(0.95 * 20) = 19 -> largest order stat
    assert inf._finite_b_quantile(stats, 0.05) == 18.0
    # B = 99, alpha = 0.05: k = ceil(0.95 * 100) = 95 -> 95th order stat
    assert inf._finite_b_quantile(np.arange(99.0), 0.05) == 94.0
    # alpha = 0 pushes k past B: quantile is +inf, the test never rejects
    assert np.isinf(inf._finite_b_quantile(stats, 0.0))


# ---------------------------------------------------------------------------
# regions


def test_sbi_alpha_zero_accepts_every_candidate(pairs, tiny_grid):
    cached(tiny_grid)
    rng = np.random.default_rng(8)
    region = inf.sbi_region(pairs, tiny_grid, 0.0, 50, 500, rng,
                            kappa=120, N=500, N_ref=1500)
    assert len(region.accepted) == len(tiny_grid.params)
    assert region.covers_truth()


def test_sbi_regions_nest_in_alpha(pairs, tiny_grid):
    cached(tiny_grid)
    accept = {}
    for alpha in (0.02, 0.2, 0.6):
        rng = np.random.default_rng(8)
        region = inf.sbi_region(pairs, tiny_grid, alpha, 50, 500, rng,
                                kappa=120, N=500, N_ref=1500)
        accept[alpha] = set(region.accepted.tolist())
    assert accept[0.6] <= accept[0.2] <= accept[0.02]


def test_sbi_region_deterministic(pairs, tiny_grid):
    cached(tiny_grid)
    r1 = inf.sbi_region(pairs, tiny_grid, 0.1, 50, 500,
                        np.random.default_rng(8), kappa=120, N=500, N_ref=1500)
    r2 = inf.sbi_region(pairs, tiny_grid, 0.1, 50, 500,
                        np.random.default_rng(8), kappa=120, N=500, N_ref=1500)
    assert np.array_equal(r1.accepted, r2.accepted)
    assert np.allclose(r1.observed, r2.observed)


def test_abc_votes_land_on_the_grid(pairs, tiny_grid):
    cached(tiny_grid)
    region = inf.abc_region(pairs, tiny_grid, 50, 500,
                            np.random.default_rng(9), kappa=120, N=500,
                            N_ref=1500)
    assert len(region.accepted) >= 1
    assert np.all(region.accepted >= 0)
    assert np.all(region.accepted < len(tiny_grid.params))


def test_bootstrap_mles_recruiter_level_multipliers(pairs):
    draws, resampled = inf.bootstrap_mles(pairs, 5, np.random.default_rng(10))
    assert len(draws) == 5 and len(resampled) == 5
    rew = resampled[0]
    # all pairs of one recruiter share a multiplier
    ratio = rew.weights / pairs.weights
    for fam in np.unique(rew.family):
        assert np.allclose(ratio[rew.family == fam],
                           ratio[rew.family == fam][0])


def test_bootstrap_llr_region_contains_the_mle_neighborhood(pairs, tiny_grid):
    cached(tiny_grid)
    rng = np.random.default_rng(11)
    draws, resampled = inf.bootstrap_mles(pairs, 50, rng)
    region = inf.bootstrap_region(pairs, tiny_grid, 0.05, 50, 500, inf.BS_LLR,
                                  rng, draws=draws, resampled=resampled,
                                  kappa=120, N=500, N_ref=1500)
    assert region.method == inf.BS_LLR
    assert np.all(np.isfinite(region.observed))


def test_wald_region_mahalanobis_observed_stats(pairs, tiny_grid):
    cached(tiny_grid)
    rng = np.random.default_rng(12)
    draws, resampled = inf.bootstrap_mles(pairs, 50, rng)
    region = inf.bootstrap_region(pairs, tiny_grid, 0.05, 50, 500, inf.BS_WI,
                                  rng, draws=draws, resampled=resampled,
                                  kappa=120, N=500, N_ref=1500)
    assert np.all(region.observed >= 0)


def test_bootstrap_region_rejects_unknown_variant(pairs, tiny_grid):
    cached(tiny_grid)
    with pytest.raises(ConfigError):
        inf.bootstrap_region(pairs, tiny_grid, 0.05, 50, 500, "nope",
                             np.random.default_rng(1), kappa=120, N=500,
                             N_ref=1500)


# ---------------------------------------------------------------------------
# projections


def test_project_singleton_and_range(tiny_grid):
    region = inf.ConfidenceRegion(inf.SBI, tiny_grid, np.array([4]),
                                  np.zeros(27), np.zeros(27), 0.05)
    lo, hi = inf.project(region, lambda th: th.mu[0])
    assert lo == hi == tiny_grid.params[4].mu[0]
    region3 = inf.ConfidenceRegion(inf.SBI, tiny_grid, np.array([0, 13, 26]),
                                   np.zeros(27), np.zeros(27), 0.05)
    lo, hi = inf.project(region3, lambda th: th.mu[2])
    assert (lo, hi) == (0.0, 2.0)


def test_project_empty_region_returns_sentinel(tiny_grid):
    region = inf.ConfidenceRegion(inf.SBI, tiny_grid, np.array([], dtype=int),
                                  np.zeros(27), np.zeros(27), 0.05)
    assert np.isnan(inf.project(region, lambda th: th.mu[0])).all()


# ---------------------------------------------------------------------------
# pseudo-true parameter


def test_approx_beta_bar_deterministic():
    net = default_network(rho1=1.0)
    a = inf.approx_beta_bar(net, 300, np.random.default_rng(3), N=1000)
    b = inf.approx_beta_bar(net, 300, np.random.default_rng(3), N=1000)
    assert np.allclose(a.vector(), b.vector())


def test_approx_beta_bar_concentrates_with_k():
    net = default_network(rho1=1.0)
    refs = [inf.approx_beta_bar(net, K, np.random.default_rng(s), N=4000).vector()
            for K in (250, 2000) for s in (1, 2, 3, 4)]
    spread_small = np.std(refs[:4], axis=0).mean()
    spread_large = np.std(refs[4:], axis=0).mean()
    assert spread_large < spread_small


def test_simulate_study_pairs_reaches_kappa():
    net = default_network(rho1=1.0)
    pairs = inf.simulate_study_pairs(net, 500, 100, np.random.default_rng(4))
    # kappa participants minus seeds and orphans bound the pair count
    assert 0 < pairs.n < 100

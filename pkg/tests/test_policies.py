import numpy as np
import pytest

from rlrds import branching as br
from rlrds.errors import ConfigError
from rlrds.policies import (
    ActionSpaceSpec,
    FixedPolicy,
    PolicyParams,
    RandomPolicy,
    clip_bounds,
    default_alpha_grid,
    estimate_value,
    make_policy,
    policy_search,
    score_to_action,
    thompson_policy_search,
    thompson_select,
)


def degenerate_model(template, p_reward: float, lam: float = 2.0):
    """Type model with no covariate drift and a constant reward probability."""
    logit = np.log(p_reward / (1 - p_reward))
    beta_y = np.zeros(template.beta_y.shape)
    beta_y[0] = logit
    return template.replace(beta_y=beta_y, lam=lam)


def test_clip_bounds_oracle():
    lo, hi = clip_bounds(0.1, 3)
    assert lo == pytest.approx(1 / 27)
    assert hi == pytest.approx(9 / 11)


def test_clip_bounds_shrink_with_epsilon():
    lo1, hi1 = clip_bounds(0.01, 3)
    lo2, hi2 = clip_bounds(0.2, 3)
    assert lo1 < lo2 and hi2 < hi1


def test_score_to_action_thresholds():
    spec = ActionSpaceSpec()
    # alpha0 alone sets the score: sigmoid(2) > 0.66, sigmoid(0) = 0.5,
    # sigmoid(-2) < 0.33
    x = np.zeros(3)
    assert score_to_action(spec, x, PolicyParams(2.0, np.zeros(3))) == 0
    assert score_to_action(spec, x, PolicyParams(0.0, np.zeros(3))) == 1
    assert score_to_action(spec, x, PolicyParams(-2.0, np.zeros(3))) == 2


def test_score_to_action_vectorized_matches_scalar():
    spec = ActionSpaceSpec()
    alpha = PolicyParams(0.3, np.array([1.0, -0.5, 0.2]))
    X = np.random.default_rng(1).normal(size=(20, 3))
    batch = score_to_action(spec, X, alpha)
    singles = [score_to_action(spec, x, alpha) for x in X]
    assert np.array_equal(batch, singles)


def test_default_alpha_grid_size():
    grid = default_alpha_grid(3)
    assert len(grid) == 3 ** 4
    assert all(isinstance(g, PolicyParams) for g in grid)


def test_thompson_probs_within_clip_bounds(rng):
    spec = ActionSpaceSpec()
    draws = [PolicyParams(2.0, np.zeros(3))] * 7 + [PolicyParams(-2.0, np.zeros(3))]
    dec = thompson_select(np.zeros(3), draws, spec, 0.1, rng)
    lo, hi = clip_bounds(0.1, 3)
    assert np.all(dec.probs >= lo - 1e-12)
    assert np.all(dec.probs <= hi + 1e-12)
    assert dec.probs.sum() == pytest.approx(1.0)


def test_thompson_unanimous_draws_hit_the_upper_bound(rng):
    spec = ActionSpaceSpec()
    draws = [PolicyParams(2.0, np.zeros(3))] * 5
    dec = thompson_select(np.zeros(3), draws, spec, 0.1, rng)
    _, hi = clip_bounds(0.1, 3)
    assert dec.probs[0] == pytest.approx(hi)


def test_thompson_select_validates_epsilon(rng):
    with pytest.raises(ConfigError):
        thompson_select(np.zeros(3), [PolicyParams(0.0, np.zeros(3))],
                        ActionSpaceSpec(), 1.5, rng)


def test_estimate_value_deterministic_given_rng(template):
    start = [(np.ones(3), None, 5, 0.0)]
    alpha = PolicyParams(0.0, np.zeros(3))
    beta = degenerate_model(template, 0.5)
    v1 = estimate_value(start, alpha, beta, 16, 40,
                        np.random.default_rng(5), ActionSpaceSpec())
    v2 = estimate_value(start, alpha, beta, 16, 40,
                        np.random.default_rng(5), ActionSpaceSpec())
    assert v1 == v2


def test_estimate_value_zero_budget_or_empty_start(template):
    alpha = PolicyParams(0.0, np.zeros(3))
    beta = degenerate_model(template, 0.5)
    rng = np.random.default_rng(0)
    assert estimate_value([], alpha, beta, 8, 10, rng, ActionSpaceSpec()) == 0.0
    start = [(np.ones(3), None, 5, 0.0)]
    assert estimate_value(start, alpha, beta, 8, 0, rng, ActionSpaceSpec()) == 0.0


def test_estimate_value_matches_branching_mean_oracle(template):
    # reward prob 1/2, mean family size mbar: one generation from a single
    # root has expected reward mbar/2; with a generous budget the rollout
    # value approaches sum_g mbar^g / 2 over the horizon's generations
    lam, L = 0.4, 5
    beta = degenerate_model(template, 0.5, lam=lam)
    mbar, _ = br.family_moments(lam, L)
    # subcritical chain: expected total recruits = mbar / (1 - mbar)
    expected = 0.5 * mbar / (1 - mbar)
    start = [(np.ones(3), None, L, 0.0)]
    vals = [estimate_value(start, PolicyParams(0.0, np.zeros(3)), beta, 400,
                           10_000, np.random.default_rng(s), ActionSpaceSpec())
            for s in range(4)]
    assert np.mean(vals) == pytest.approx(expected, rel=0.15)


def test_estimate_value_monotone_in_reward_probability(template):
    start = [(np.ones(3), None, 5, 0.0)]
    alpha = PolicyParams(0.0, np.zeros(3))
    lo = estimate_value(start, alpha, degenerate_model(template, 0.2), 32, 40,
                        np.random.default_rng(3), ActionSpaceSpec())
    hi = estimate_value(start, alpha, degenerate_model(template, 0.8), 32, 40,
                        np.random.default_rng(3), ActionSpaceSpec())
    assert hi > lo


def test_policy_search_ties_resolve_to_lowest_index(template):
    # indifferent model: every candidate has the same value, so the first
    # grid entry wins
    beta = degenerate_model(template, 0.5)
    grid = [PolicyParams(0.0, np.zeros(3)), PolicyParams(0.0, np.zeros(3))]
    start = [(np.ones(3), None, 5, 0.0)]
    best = policy_search(start, beta, 8, grid, 30,
                         np.random.default_rng(2), ActionSpaceSpec())
    assert best is grid[0]


def test_policy_search_rejects_empty_grid(template):
    with pytest.raises(ConfigError):
        policy_search([(np.ones(3), None, 5, 0.0)],
                      degenerate_model(template, 0.5), 8, [], 30,
                      np.random.default_rng(2), ActionSpaceSpec())


def test_thompson_policy_search_one_choice_per_draw(template):
    betas = [degenerate_model(template, 0.3), degenerate_model(template, 0.6)]
    grid = default_alpha_grid(3, n=2)
    start = [(np.ones(3), None, 5, 0.0)]
    picks = thompson_policy_search(start, betas, 8, grid, 30,
                                   np.random.default_rng(4), ActionSpaceSpec())
    assert len(picks) == len(betas)
    assert all(p in grid for p in picks)


def test_make_policy_roster(template):
    assert isinstance(make_policy("random"), RandomPolicy)
    fixed = make_policy("fixed_a2")
    assert isinstance(fixed, FixedPolicy) and fixed.allocation == 1
    assert make_policy("rl_rds", template).template is template
    with pytest.raises(ConfigError):
        make_policy("rl_rds")
    with pytest.raises(ConfigError):
        make_policy("nope")


def test_fixed_policy_infeasible_allocation_falls_back(template, rng):
    policy = FixedPolicy(99)
    a, coupons, prob, n = policy.assign(None, np.zeros(3), rng)
    assert a in ActionSpaceSpec().actions()
    assert prob == pytest.approx(1 / 3)

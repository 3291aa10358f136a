"""End-to-end acceptance tests for the artifact.

The coverage and policy-comparison experiments are expensive, so they run
once in session-scoped fixtures and several tests read off the same tables.
"""

import hashlib
import json
import os
import time
import warnings

import numpy as np
import pytest

from rlrds import branching as br
from rlrds.branching import TYPE_MODEL, VALUE_MODEL
from rlrds.cli import main as cli_main
from rlrds.harness import (
    ExperimentConfig,
    coverage_summary,
    default_network,
    model_template,
    policy_summary,
    run_coverage_study,
    run_policy_comparison,
)
from rlrds.network import sample_population
from rlrds.policies import RLRDSPolicy, RandomPolicy, clip_bounds
from rlrds.rds import SEED, run_study

DATA = os.path.join(os.path.dirname(__file__), "data")

DENSITY_ORDER = ("low", "medium", "high")


# ---------------------------------------------------------------------------
# shared experiment runs


@pytest.fixture(scope="session")
def coverage_run():
    cfg = ExperimentConfig.desk_default(seed=0)
    cfg.replicates = 200
    start = time.time()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = run_coverage_study(cfg)
    return table, time.time() - start, cfg


@pytest.fixture(scope="session")
def policy_run():
    cfg = ExperimentConfig.desk_default(seed=0)
    cfg.replicates = 50
    cfg.budgets = (300,)
    cfg.densities = {"low": 2.0, "medium": 1.0}
    cfg.policies = ("fixed_a1", "fixed_a2", "fixed_a3", "random", "rl_rds")
    start = time.time()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = run_policy_comparison(cfg)
    return table, time.time() - start


def summary_by(entries, *keys):
    return {tuple(e[k] for k in keys): e for e in entries}


# ---------------------------------------------------------------------------
# 1. derivative oracles


def random_instance(family, rng, p=2):
    if family == TYPE_MODEL:
        params = br.type_model_params(
            beta_y=rng.normal(scale=0.4, size=1 + 3 * p),
            zeta=float(rng.uniform(0.5, 2.0)), lam=float(rng.uniform(0.5, 4.0)),
            phi={a: rng.normal(size=p) for a in (0, 1, 2)},
            G={a: 0.3 * rng.normal(size=(p, p)) for a in (0, 1, 2)},
            sigma_diag={a: rng.uniform(0.5, 2.0, size=p) for a in (0, 1, 2)},
            t_min=0.1, t_max=2.0)
    else:
        params = br.value_model_params(
            beta_y=rng.normal(scale=0.4, size=2 + 2 * p),
            zeta0=float(rng.uniform(0.8, 2.0)),
            zeta1=float(rng.uniform(-0.2, 0.2)),
            lam=float(rng.uniform(0.5, 4.0)),
            phi0=rng.normal(size=p), phi1=float(rng.normal(scale=0.3)),
            omega0=rng.uniform(0.8, 2.0, size=p),
            omega1=rng.uniform(-0.2, 0.2, size=p), t_min=0.1, t_max=2.0)
    alloc = ((lambda r, x: int(r.integers(0, 3)))
             if family == TYPE_MODEL else
             (lambda r, x: float(r.choice([0.2, 0.5, 0.8]))))
    sample = br.simulate_branching_data(params, 40, rng, coupons=4,
                                        alloc_sampler=alloc)
    sample = sample.reweighted(rng.uniform(0.5, 1.5, size=len(sample)))
    probe = params.from_vector(params.to_vector()
                               + 0.05 * rng.normal(size=params.to_vector().size))
    return probe, sample


def test_criterion_1_score_and_hessian_match_finite_differences():
    start = time.time()
    worst = 0.0
    for family in (TYPE_MODEL, VALUE_MODEL):
        rng = np.random.default_rng(101 if family == TYPE_MODEL else 202)
        for _ in range(20):
            params, sample = random_instance(family, rng)
            v0 = params.to_vector()
            g = br.score(params, sample)
            H = br.hessian(params, sample)
            scale = np.maximum(1.0, np.abs(g).max())
            hscale = np.maximum(1.0, np.abs(H).max())
            for i in range(v0.size):
                h = 1e-5 * (1.0 + abs(v0[i]))
                e = np.zeros(v0.size)
                e[i] = h
                fd_g = (br.loglik(params.from_vector(v0 + e), sample)
                        - br.loglik(params.from_vector(v0 - e), sample)) / (2 * h)
                worst = max(worst, abs(fd_g - g[i]) / scale)
                fd_h = (br.score(params.from_vector(v0 + e), sample)
                        - br.score(params.from_vector(v0 - e), sample)) / (2 * h)
                worst = max(worst, np.abs(fd_h - H[i]).max() / hscale)
    assert worst < 1e-6
    assert time.time() - start < 60


# ---------------------------------------------------------------------------
# 2. Thompson clipping


def test_criterion_2_thompson_probabilities_respect_clip_bounds():
    net = default_network(rho1=2.0)
    rng = np.random.default_rng(7)
    pop = sample_population(net, 1000, rng)
    policy = RLRDSPolicy(model_template(3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run_study(pop, net, policy, 300, rng)
    lo, hi = clip_bounds(policy.epsilon, policy.n_actions)
    assert policy.thompson_log, "study never reached the Thompson phase"
    for _, prob, probs in policy.thompson_log:
        assert lo <= prob <= hi
        assert np.all(probs >= lo) and np.all(probs <= hi)


# ---------------------------------------------------------------------------
# 3. estimator rate


def test_criterion_3_estimator_rmse_improves_with_sample_size():
    start = time.time()
    rng = np.random.default_rng(33)
    truth = br.type_model_params(
        beta_y=rng.normal(scale=0.4, size=7),
        zeta=1.0, lam=2.0,
        phi={a: rng.normal(size=2) for a in (0, 1, 2)},
        G={a: 0.3 * rng.normal(size=(2, 2)) for a in (0, 1, 2)},
        sigma_diag={a: np.full(2, 1.5) for a in (0, 1, 2)},
        t_min=0.0, t_max=3.0)
    v_true = truth.to_vector()
    rmse = {}
    for kappa in (200, 800):
        errs = []
        for _ in range(100):
            sample = br.simulate_branching_data(truth, kappa, rng, coupons=5)
            fit, _ = br.fit_wmle(sample, truth, tol=1e-6)
            errs.append(np.sum((fit.to_vector() - v_true) ** 2))
        rmse[kappa] = float(np.sqrt(np.mean(errs)))
    assert rmse[800] < 0.75 * rmse[200]
    assert time.time() - start < 600


# ---------------------------------------------------------------------------
# 4-6. coverage experiments


def test_criterion_4_sbi_coverage_at_desk_scale(coverage_run):
    table, elapsed, _ = coverage_run
    assert elapsed < 3600
    for density in DENSITY_ORDER:
        covers = table.values(arm="SBI", setting=density, metric="covers")
        assert covers.size == 200
        assert covers.mean() >= 0.90, f"SBI coverage at {density}"


def test_criterion_5_abc_coverage_decays_with_density(coverage_run):
    table, _, _ = coverage_run
    sbi = {d: table.values(arm="SBI", setting=d, metric="covers").mean()
           for d in DENSITY_ORDER}
    abc = {d: table.values(arm="ABC", setting=d, metric="covers").mean()
           for d in DENSITY_ORDER}
    assert all(v >= 0.90 for v in sbi.values())
    assert abc["low"] > abc["medium"] > abc["high"], (
        f"ABC coverage not monotone decreasing across densities: {abc}")


def test_criterion_6_sbi_projection_intervals_beat_abc(coverage_run):
    table, _, cfg = coverage_run
    p = cfg.network.p
    for d in range(p):
        for density in DENSITY_ORDER:
            covers = table.values(arm="SBI", setting=density,
                                  metric=f"mu{d}_covers")
            assert covers.mean() >= 0.90, f"SBI mu{d} coverage at {density}"
        sbi_len = np.mean([table.values(arm="SBI", setting=s,
                                        metric=f"mu{d}_len").mean()
                           for s in DENSITY_ORDER])
        abc_len = np.mean([table.values(arm="ABC", setting=s,
                                        metric=f"mu{d}_len").mean()
                           for s in DENSITY_ORDER])
        assert sbi_len < abc_len, f"mu{d}: SBI {sbi_len} vs ABC {abc_len}"


# ---------------------------------------------------------------------------
# 7. policy value


def test_criterion_7_rl_rds_beats_random_and_fixed(policy_run):
    table, elapsed = policy_run
    assert elapsed < 1800
    cells = summary_by(policy_summary(table), "setting", "policy")
    for density in ("low", "medium"):
        setting = f"{density}:300"
        rl = cells[(setting, "rl_rds")]
        assert rl["n"] == 50 and rl["failures"] == 0
        assert rl["mean"] > cells[(setting, "random")]["hi90"], setting
        for fixed in ("fixed_a1", "fixed_a2", "fixed_a3"):
            assert rl["mean"] > cells[(setting, fixed)]["mean"], (
                f"{setting}: rl_rds {rl['mean']} vs {fixed} "
                f"{cells[(setting, fixed)]['mean']}")


# ---------------------------------------------------------------------------
# 8. simulator invariants


def test_criterion_8_recruitment_event_invariants():
    net = default_network(rho1=1.0).replace(seed_count=10)
    events = 0
    study_seed = 0
    while events < 100_000:
        rng = np.random.default_rng(1000 + study_seed)
        study_seed += 1
        pop = sample_population(net, 2000, rng)
        state = run_study(pop, net, RandomPolicy(), 1e18, rng,
                          max_participants=2000)
        ids = [r.id for r in state.records]
        assert len(ids) == len(set(ids)), "duplicate recruitment"
        by_id = {r.id: r for r in state.records}
        for r in state.records:
            if r.recruiter == SEED:
                continue
            dt = r.arrival_time - by_id[r.recruiter].arrival_time
            assert net.t_min <= dt <= net.t_max
            events += 1


def test_criterion_8_family_pmf_normalization():
    rng = np.random.default_rng(88)
    for _ in range(100):
        lam = float(rng.uniform(0.01, 20.0))
        L = int(rng.integers(1, 12))
        total = sum(np.exp(br.family_logpmf(m, lam, L)) for m in range(L + 1))
        assert abs(total - 1.0) < 1e-12


def test_criterion_8_truncexp_mean_matches_quadrature():
    from scipy.integrate import quad

    zeta, lo, hi = 1.0, 0.0, 3.0
    density = lambda u: np.exp(br.truncexp_logpdf(u, zeta, lo, hi))
    mean, _ = quad(lambda u: u * density(u), lo, hi)
    var, _ = quad(lambda u: (u - mean) ** 2 * density(u), lo, hi)
    draws = br.truncexp_sample(np.random.default_rng(9), zeta, lo, hi,
                               size=1_000_000)
    se = np.sqrt(var / draws.size)
    assert abs(draws.mean() - mean) < 3 * se


# ---------------------------------------------------------------------------
# 9. CLI determinism


def _digest(root):
    h = hashlib.sha256()
    for name in sorted(os.listdir(root)):
        h.update(name.encode())
        with open(os.path.join(root, name), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def test_criterion_9_cli_outputs_bit_identical(tmp_path):
    net = default_network().to_dict()
    experiment = {"network": net, "densities": {"low": 2.0},
                  "policies": ["fixed_a1", "random"], "budgets": [60],
                  "replicates": 2, "population_size": 300, "B": 50, "K": 300,
                  "ref_population_size": 1000, "kappa": 60,
                  "mu_axes": [[0, 1, 2], [0, 1, 2], [0, 1, 2]], "seed": 11}
    cfgs = {
        "gen-network": {"network": net, "N": 200},
        "run-study": {"network": net, "N": 300, "policy": "random",
                      "budget": 60},
        "fit": {"trajectory": os.path.join(DATA, "golden_trajectory.csv"),
                "ridge": 0.01},
        "infer": {"experiment": experiment,
                  "trajectory": os.path.join(DATA, "golden_trajectory.csv"),
                  "methods": ["SBI", "ABC"]},
        "compare-policies": experiment,
        "coverage": experiment,
    }
    for command, cfg in cfgs.items():
        cfg_path = tmp_path / f"{command}.json"
        with open(cfg_path, "w") as fh:
            json.dump(cfg, fh)
        digests = set()
        for run, threads in (("a", "1"), ("b", "1"), ("c", "8")):
            out = tmp_path / f"{command}-{run}"
            code = cli_main([command, "--config", str(cfg_path), "--seed", "5",
                             "--threads", threads, "--out", str(out)])
            assert code == 0, command
            digests.add(_digest(out))
        assert len(digests) == 1, f"{command} output varies across runs/threads"

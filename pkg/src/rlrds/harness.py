"""Experiment orchestration and result emission.

Runs Monte-Carlo policy comparisons (mean cumulative reward with 90% MC
intervals per density and budget) and coverage studies (per-method region
coverage of the generative truth plus projection intervals for each mean
component). Every replicate derives its generator from the master seed and
its position in the experiment layout, so results are bit-identical across
runs and thread counts.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .network import TYPE_ALLOCATIONS, NetworkParams, sample_population
from .branching import TYPE_MODEL, VALUE_MODEL, type_model_params, value_model_params
from .policies import ActionSpaceSpec, make_policy
from .rds import run_study
from .inference import (
    ABC,
    BS_LLR,
    BS_WI,
    SBI,
    ThetaGrid,
    abc_region,
    bootstrap_mles,
    bootstrap_region,
    ensure_cache,
    project,
    sbi_region,
    simulate_study_pairs,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# Density labels: a stronger distance penalty rho1 yields a sparser graph,
# so "low" density pairs with the largest rho1.
DENSITY_RHO1 = {"low": 2.0, "medium": 1.0, "high": 0.5}

POLICY_KINDS = ("fixed_a1", "fixed_a2", "fixed_a3", "random",
                "train_and_implement", "rl_rds")

INFERENCE_METHODS = (SBI, ABC, BS_LLR, BS_WI)


def default_network(rho1: float = 2.0, p: int = 3) -> NetworkParams:
    """Benchmark generative truth: unit mean, spherical covariance 10*I,
    and reward coefficients (-1, 3k, -3k, -6k) with k = (1, -1, -1, ...)."""
    k = np.array([1.0] + [-1.0] * (p - 1))
    beta_y = np.concatenate([[-1.0], 3 * k, -3 * k, -6 * k])
    return NetworkParams(rho0=1.0, rho1=rho1, mu=np.ones(p),
                         sigma=10 * np.eye(p), beta_y=beta_y)


def model_template(p: int = 3, model_family: str = TYPE_MODEL,
                   t_min: float = 0.0, t_max: float = 3.0):
    """Neutral working-model parameters used to initialize online fits."""
    if model_family == TYPE_MODEL:
        return type_model_params(
            beta_y=np.zeros(1 + 3 * p), zeta=1.0, lam=2.0,
            phi={a: np.zeros(p) for a in TYPE_ALLOCATIONS},
            G={a: np.zeros((p, p)) for a in TYPE_ALLOCATIONS},
            sigma_diag={a: np.ones(p) for a in TYPE_ALLOCATIONS},
            t_min=t_min, t_max=t_max)
    if model_family == VALUE_MODEL:
        return value_model_params(
            beta_y=np.zeros(2 + 2 * p), zeta0=1.0, zeta1=0.0, lam=2.0,
            phi0=np.zeros(p), phi1=np.zeros(p), omega0=np.ones(p),
            omega1=np.zeros(p), t_min=t_min, t_max=t_max)
    raise ConfigError(f"unknown model family {model_family!r}")


@dataclass
class ExperimentConfig:
    """Declarative description of one experiment run.

    `densities` maps labels to the distance penalty rho1; its insertion
    order is the reporting order. All counts are desk-scale by default.
    """

    network: NetworkParams
    densities: dict = field(default_factory=lambda: dict(DENSITY_RHO1))
    policies: tuple = POLICY_KINDS
    budgets: tuple = (150, 300)
    replicates: int = 100
    population_size: int = 1000
    alpha: float = 0.05
    B: int = 100
    K: int = 32000
    ref_population_size: int = 10000
    kappa: int = 200
    mu_axes: tuple = ((-1, 0, 1, 2, 3), (-1, 0, 1, 2, 3), (0, 1, 2, 3))
    model_family: str = TYPE_MODEL
    action_variant: str = ActionSpaceSpec().variant
    seed: int = 0
    name: str = "experiment"
    policy_kwargs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.policies = tuple(self.policies)
        self.budgets = tuple(int(b) for b in self.budgets)
        self.mu_axes = tuple(tuple(float(v) for v in ax) for ax in self.mu_axes)
        if not self.densities:
            raise ConfigError("need at least one density setting")
        for kind in self.policies:
            if kind not in POLICY_KINDS:
                raise ConfigError(f"unknown policy kind {kind!r}")
        if self.replicates < 1 or self.population_size < 1:
            raise ConfigError("replicates and population_size must be >= 1")
        if any(b < 1 for b in self.budgets):
            raise ConfigError("budgets must be positive")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("alpha must lie in [0, 1)")
        if min(self.B, self.K, self.kappa, self.ref_population_size) < 1:
            raise ConfigError("B, K, kappa, ref_population_size must be >= 1")
        if self.model_family not in (TYPE_MODEL, VALUE_MODEL):
            raise ConfigError(f"unknown model family {self.model_family!r}")
        if len(self.mu_axes) != self.network.p:
            raise ConfigError("mu_axes must give one axis per mean component")
        # validates the variant name
        ActionSpaceSpec(variant=self.action_variant)

    @classmethod
    def desk_default(cls, seed: int = 0) -> "ExperimentConfig":
        return cls(network=default_network(), seed=seed)

    def action_spec(self) -> ActionSpaceSpec:
        return ActionSpaceSpec(variant=self.action_variant)

    def template(self):
        return model_template(self.network.p, self.model_family,
                              self.network.t_min, self.network.t_max)

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "densities": {k: float(v) for k, v in self.densities.items()},
            "policies": list(self.policies),
            "budgets": list(self.budgets),
            "replicates": self.replicates,
            "population_size": self.population_size,
            "alpha": self.alpha,
            "B": self.B,
            "K": self.K,
            "ref_population_size": self.ref_population_size,
            "kappa": self.kappa,
            "mu_axes": [list(ax) for ax in self.mu_axes],
            "model_family": self.model_family,
            "action_variant": self.action_variant,
            "seed": self.seed,
            "name": self.name,
            "policy_kwargs": dict(self.policy_kwargs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            d["network"] = NetworkParams.from_dict(d["network"])
        except KeyError as exc:
            raise ConfigError("config is missing the network block") from exc
        except TypeError as exc:
            raise ConfigError(f"bad network block: {exc}") from exc
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)


# ---------------------------------------------------------------------------
# result table


@dataclass
class ResultTable:
    """Append-only long-format results: one (metric, value) per row."""

    rows: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    COLUMNS = ("experiment", "replicate", "arm", "setting", "metric", "value")

    def append(self, experiment, replicate, arm, setting, metric, value):
        self.rows.append({"experiment": experiment, "replicate": int(replicate),
                          "arm": arm, "setting": setting, "metric": metric,
                          "value": float(value)})

    def extend(self, other: "ResultTable"):
        self.rows.extend(other.rows)

    def values(self, **filters) -> np.ndarray:
        """Metric values matching all given column filters, in row order."""
        out = [r["value"] for r in self.rows
               if all(r[k] == v for k, v in filters.items())]
        return np.array(out)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "value": repr(r["value"])})

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"schema_version": self.schema_version, "rows": self.rows},
                      fh, sort_keys=True)

    def write(self, path, fmt: str = "csv") -> None:
        if fmt == "csv":
            self.write_csv(path)
        elif fmt == "json":
            self.write_json(path)
        else:
            raise ConfigError(f"unknown output format {fmt!r}")

    @classmethod
    def read_csv(cls, path) -> "ResultTable":
        t = cls()
        with open(path) as fh:
            for r in csv.DictReader(fh):
                t.append(r["experiment"], int(r["replicate"]), r["arm"],
                         r["setting"], r["metric"], float(r["value"]))
        return t


def _rng(master_seed: int, *path) -> np.random.Generator:
    """Deterministic per-task generator keyed by position in the layout."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed)]
                                                        + [int(v) for v in path]))


def _run_tasks(tasks, fn, threads: int):
    """Evaluate fn over tasks, preserving task order in the output."""
    if threads <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, tasks))


# ---------------------------------------------------------------------------
# policy comparison


def run_policy_comparison(config: ExperimentConfig, threads: int = 1) -> ResultTable:
    """M replicates of run_study per (density, budget, policy).

    Policies within one (density, budget, replicate) cell share a population
    draw, so comparisons are paired. A replicate that fails numerically is
    logged and recorded with a `failure` row instead of a reward.
    """
    spec = config.action_spec()
    template = config.template()
    densities = list(config.densities.items())
    tasks = [(di, bi, pi, rep)
             for di in range(len(densities))
             for bi in range(len(config.budgets))
             for pi in range(len(config.policies))
             for rep in range(config.replicates)]

    def one(task):
        di, bi, pi, rep = task
        label, rho1 = densities[di]
        budget = config.budgets[bi]
        kind = config.policies[pi]
        net = config.network.replace(rho1=float(rho1))
        pop = sample_population(net, config.population_size,
                                _rng(config.seed, 1, di, bi, rep))
        policy = make_policy(kind, template, spec,
                             **config.policy_kwargs.get(kind, {}))
        setting = f"{label}:{budget}"
        rows = ResultTable()
        try:
            state = run_study(pop, net, policy, budget,
                              _rng(config.seed, 2, di, bi, pi, rep))
        except NumericalError as exc:
            log.warning("replicate %d (%s, %s) failed: %s", rep, setting, kind, exc)
            rows.append(config.name, rep, kind, setting, "failure", 1.0)
            return rows
        total = float(sum(r.reward for r in state.records))
        rows.append(config.name, rep, kind, setting, "cumulative_reward", total)
        rows.append(config.name, rep, kind, setting, "sample_size",
                    float(len(state.records)))
        return rows

    table = ResultTable()
    for part in _run_tasks(tasks, one, threads):
        table.extend(part)
    return table


def policy_summary(table: ResultTable) -> list:
    """Per (setting, policy): mean cumulative reward with a 90% MC interval."""
    cells = {}
    for r in table.rows:
        if r["metric"] == "cumulative_reward":
            cells.setdefault((r["setting"], r["arm"]), []).append(r["value"])
    failures = {}
    for r in table.rows:
        if r["metric"] == "failure":
            key = (r["setting"], r["arm"])
            failures[key] = failures.get(key, 0) + 1
    out = []
    for (setting, arm), vals in sorted(cells.items()):
        v = np.array(vals)
        half = 1.645 * v.std(ddof=1) / np.sqrt(v.size) if v.size > 1 else 0.0
        out.append({"setting": setting, "policy": arm, "n": int(v.size),
                    "mean": float(v.mean()), "lo90": float(v.mean() - half),
                    "hi90": float(v.mean() + half),
                    "failures": failures.get((setting, arm), 0)})
    return out


# ---------------------------------------------------------------------------
# coverage study


def coverage_grid(config: ExperimentConfig, rho1: float) -> ThetaGrid:
    base = config.network.replace(rho1=float(rho1))
    return ThetaGrid.mu_lattice(base, [list(ax) for ax in config.mu_axes])


def run_coverage_study(config: ExperimentConfig, threads: int = 1) -> ResultTable:
    """Per density: one candidate-grid cache, then M replicates of
    (simulate study, build all four regions, record truth membership and
    per-component projection intervals)."""
    table = ResultTable()
    densities = list(config.densities.items())
    for di, (label, rho1) in enumerate(densities):
        base = config.network.replace(rho1=float(rho1))
        grid = coverage_grid(config, rho1)
        if grid.truth_index is None:
            raise ConfigError("mu_axes must contain the generative mean")
        ensure_cache(grid, kappa=config.kappa, N=config.population_size,
                     B=config.B, K=config.K, rng=_rng(config.seed, 3, di),
                     N_ref=config.ref_population_size)
        truth_mu = config.network.mu

        def one(rep, base=base, grid=grid, di=di, label=label, truth_mu=truth_mu):
            rng = _rng(config.seed, 4, di, rep)
            rows = ResultTable()
            try:
                pairs = simulate_study_pairs(base, config.population_size,
                                             config.kappa, rng)
                N_ref = config.ref_population_size
                regions = {SBI: sbi_region(pairs, grid, config.alpha, config.B,
                                           config.K, rng, kappa=config.kappa,
                                           N=config.population_size, N_ref=N_ref)}
                draws, resampled = bootstrap_mles(pairs, config.B, rng)
                regions[ABC] = abc_region(pairs, grid, config.B, config.K, rng,
                                          draws=draws, kappa=config.kappa,
                                          N=config.population_size, N_ref=N_ref)
                for variant in (BS_LLR, BS_WI):
                    regions[variant] = bootstrap_region(
                        pairs, grid, config.alpha, config.B, config.K, variant,
                        rng, draws=draws, resampled=resampled, kappa=config.kappa,
                        N=config.population_size, N_ref=N_ref)
            except NumericalError as exc:
                log.warning("coverage replicate %d (%s) failed: %s", rep, label, exc)
                rows.append(config.name, rep, "all", label, "failure", 1.0)
                return rows
            for method, region in regions.items():
                rows.append(config.name, rep, method, label, "covers",
                            float(region.covers_truth()))
                for d in range(len(truth_mu)):
                    lo, hi = project(region, lambda th, d=d: th.mu[d])
                    rows.append(config.name, rep, method, label, f"mu{d}_lo", lo)
                    rows.append(config.name, rep, method, label, f"mu{d}_hi", hi)
                    empty = np.isnan(lo)
                    rows.append(config.name, rep, method, label, f"mu{d}_len",
                                0.0 if empty else hi - lo)
                    rows.append(config.name, rep, method, label, f"mu{d}_covers",
                                0.0 if empty else float(lo <= truth_mu[d] <= hi))
            return rows

        for part in _run_tasks(range(config.replicates), one, threads):
            table.extend(part)
    return table


def coverage_summary(table: ResultTable, p: int = 3) -> list:
    """Per (setting, method): coverage rate and mean projection lengths."""
    settings = sorted({r["setting"] for r in table.rows if r["arm"] != "all"})
    out = []
    for setting in settings:
        for method in INFERENCE_METHODS:
            sel = dict(setting=setting, arm=method)
            covers = table.values(metric="covers", **sel)
            if covers.size == 0:
                continue
            entry = {"setting": setting, "method": method,
                     "n": int(covers.size), "coverage": float(covers.mean())}
            for d in range(p):
                entry[f"mu{d}_coverage"] = float(
                    table.values(metric=f"mu{d}_covers", **sel).mean())
                entry[f"mu{d}_mean_length"] = float(
                    table.values(metric=f"mu{d}_len", **sel).mean())
            out.append(entry)
    return out

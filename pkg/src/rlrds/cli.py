"""Command-line entry points.

Subcommands cover the full pipeline: population generation, a single study
run, working-model fitting, grid-inversion inference, and the two
Monte-Carlo experiments. Outputs land in the --out directory; everything is
bit-identical for a fixed seed regardless of thread count.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .errors import ConfigError, NumericalError
from .network import NetworkParams, Population, sample_population
from .rds import build_weighted_sample, load_trajectory, run_study, save_trajectory
from .branching import fit_wmle
from .policies import ActionSpaceSpec, make_policy
from .inference import (
    ABC,
    BS_LLR,
    BS_WI,
    SBI,
    CovariatePairs,
    abc_region,
    bootstrap_mles,
    bootstrap_region,
    ensure_cache,
    project,
    sbi_region,
)
from .harness import (
    ExperimentConfig,
    INFERENCE_METHODS,
    _rng,
    coverage_grid,
    coverage_summary,
    model_template,
    policy_summary,
    run_coverage_study,
    run_policy_comparison,
)


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _dump_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, default=_jsonable)


def _write_records(path, records: list, fmt: str) -> None:
    """Emit a list of flat dicts as CSV (shared header) or JSON."""
    if fmt == "json":
        _dump_json(path, records)
        return
    fields = []
    for rec in records:
        for k in rec:
            if k not in fields:
                fields.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for rec in records:
            w.writerow({k: repr(v) if isinstance(v, float) else v
                        for k, v in rec.items()})


def _out_path(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _seed(args, cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", 0))


def _network(cfg: dict) -> NetworkParams:
    try:
        return NetworkParams.from_dict(cfg["network"])
    except KeyError as exc:
        raise ConfigError("config is missing the network block") from exc
    except TypeError as exc:
        raise ConfigError(f"bad network block: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_network(args) -> int:
    cfg = _load_json(args.config)
    net = _network(cfg)
    N = int(cfg.get("N", 1000))
    seed = _seed(args, cfg)
    pop = sample_population(net, N, np.random.default_rng(seed))
    pop.save(_out_path(args, "population.json"))
    _dump_json(_out_path(args, "network_summary.json"),
               {"N": N, "seed": seed, "mean_degree": pop.mean_degree()})
    return 0


def _study_from_config(cfg: dict, seed: int):
    net = _network(cfg)
    if "population" in cfg:
        pop = Population.load(cfg["population"])
    else:
        pop = sample_population(net, int(cfg.get("N", 1000)),
                                _rng(seed, 1))
    spec = ActionSpaceSpec(variant=cfg.get("action_variant",
                                           ActionSpaceSpec().variant))
    template = model_template(net.p, cfg.get("model_family", "type_model"),
                              net.t_min, net.t_max)
    try:
        policy = make_policy(cfg.get("policy", "random"), template, spec,
                             **cfg.get("policy_kwargs", {}))
        budget = float(cfg.get("budget", 300))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad policy settings: {exc}") from exc
    kappa = cfg.get("kappa")
    state = run_study(pop, net, policy, budget, _rng(seed, 2),
                      max_participants=int(kappa) if kappa else None)
    return net, state


def cmd_run_study(args) -> int:
    cfg = _load_json(args.config)
    seed = _seed(args, cfg)
    net, state = _study_from_config(cfg, seed)
    save_trajectory(state.records, _out_path(args, "trajectory.csv"))
    _dump_json(_out_path(args, "study_summary.json"),
               {"seed": seed, "participants": len(state.records),
                "cumulative_reward": float(sum(r.reward for r in state.records)),
                "spent": state.spent,
                "last_arrival": state.records[-1].arrival_time
                if state.records else 0.0})
    return 0


def cmd_fit(args) -> int:
    cfg = _load_json(args.config)
    try:
        records = load_trajectory(cfg["trajectory"])
    except KeyError as exc:
        raise ConfigError("fit config needs a trajectory path") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read trajectory: {exc}") from exc
    p = len(records[0].covariates) if records else 0
    if not records:
        raise ConfigError("empty trajectory")
    template = model_template(p, cfg.get("model_family", "type_model"),
                              float(cfg.get("t_min", 0.0)),
                              float(cfg.get("t_max", 3.0)))
    if cfg.get("scope", "all") == "complete":
        sample = build_weighted_sample(records, template.t_max)
    else:
        sample = build_weighted_sample(records, np.inf,
                                       include_ids=[r.id for r in records])
    if len(sample) == 0:
        raise NumericalError("no usable recruiter data in trajectory")
    params, report = fit_wmle(sample, template,
                              ridge=float(cfg.get("ridge", 0.0)))
    _dump_json(_out_path(args, "fit.json"),
               {"params": params.to_dict(), "beta": params.to_vector().tolist(),
                "report": report.to_dict()})
    return 0


def cmd_infer(args) -> int:
    cfg = _load_json(args.config)
    exp = ExperimentConfig.from_dict(cfg.get("experiment", {})) \
        if "experiment" in cfg else ExperimentConfig.desk_default()
    if args.seed is not None:
        exp.seed = args.seed
    try:
        records = load_trajectory(cfg["trajectory"])
    except KeyError as exc:
        raise ConfigError("infer config needs a trajectory path") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read trajectory: {exc}") from exc
    pairs = CovariatePairs.from_records(records)
    methods = tuple(cfg.get("methods", INFERENCE_METHODS))
    for m in methods:
        if m not in INFERENCE_METHODS:
            raise ConfigError(f"unknown inference method {m!r}")
    rho1 = float(cfg.get("rho1", exp.network.rho1))
    grid = coverage_grid(exp, rho1)
    ensure_cache(grid, kappa=exp.kappa, N=exp.population_size, B=exp.B,
                 K=exp.K, rng=_rng(exp.seed, 3, 0),
                 N_ref=exp.ref_population_size)
    rng = _rng(exp.seed, 5)
    common = dict(kappa=exp.kappa, N=exp.population_size,
                  N_ref=exp.ref_population_size)
    regions = {}
    draws = resampled = None
    for m in methods:
        if m == SBI:
            regions[m] = sbi_region(pairs, grid, exp.alpha, exp.B, exp.K,
                                    rng, **common)
            continue
        if draws is None:
            draws, resampled = bootstrap_mles(pairs, exp.B, rng)
        if m == ABC:
            regions[m] = abc_region(pairs, grid, exp.B, exp.K, rng,
                                    draws=draws, **common)
        else:
            regions[m] = bootstrap_region(pairs, grid, exp.alpha, exp.B,
                                          exp.K, m, rng, draws=draws,
                                          resampled=resampled, **common)
    fmt = args.format
    for m, region in regions.items():
        accepted = set(region.accepted.tolist())
        rows = []
        for i, th in enumerate(grid.params):
            row = {"theta_index": i, "rho0": th.rho0, "rho1": th.rho1}
            row.update({f"mu{d}": float(v) for d, v in enumerate(th.mu)})
            rows.append({**row, "observed": float(region.observed[i]),
                         "gamma": float(region.gamma[i]),
                         "accepted": int(i in accepted)})
        _write_records(_out_path(args, f"region_{m}.{fmt}"), rows, fmt)
        proj = []
        for d in range(exp.network.p):
            lo, hi = project(region, lambda th, d=d: th.mu[d])
            proj.append({"functional": f"mu{d}", "lo": float(lo), "hi": float(hi)})
        _write_records(_out_path(args, f"projection_{m}.{fmt}"), proj, fmt)
    return 0


def _experiment(args) -> ExperimentConfig:
    exp = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        exp.seed = args.seed
    return exp


def cmd_compare_policies(args) -> int:
    exp = _experiment(args)
    table = run_policy_comparison(exp, threads=args.threads)
    table.write(_out_path(args, f"policy_results.{args.format}"), args.format)
    _write_records(_out_path(args, f"policy_summary.{args.format}"),
                   policy_summary(table), args.format)
    return 0


def cmd_coverage(args) -> int:
    exp = _experiment(args)
    table = run_coverage_study(exp, threads=args.threads)
    table.write(_out_path(args, f"coverage_results.{args.format}"), args.format)
    _write_records(_out_path(args, f"coverage_summary.{args.format}"),
                   coverage_summary(table, exp.network.p), args.format)
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlrds",
        description="Respondent-driven sampling simulation, adaptive coupon "
                    "allocation, and grid-inversion inference.")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-network": (cmd_gen_network, "sample a population and save it"),
        "run-study": (cmd_run_study, "run one study and save the trajectory"),
        "fit": (cmd_fit, "fit the working model to a saved trajectory"),
        "infer": (cmd_infer, "build confidence regions for a trajectory"),
        "compare-policies": (cmd_compare_policies,
                             "Monte-Carlo policy comparison"),
        "coverage": (cmd_coverage, "Monte-Carlo coverage study"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (overrides the config)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads (results are thread-count invariant)")
        p.add_argument("--format", choices=("csv", "json"), default="csv",
                       help="table output format")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

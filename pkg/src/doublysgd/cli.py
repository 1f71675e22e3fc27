"""Configuration-driven entry point.

``doublysgd run config.yaml`` builds the problem instance, runs one
experiment, and writes ``<prefix>_results.csv`` plus
``<prefix>_manifest.json``.  The config is a single YAML document with
nested sections (grammar documented in the README); a manifest can be
replayed in place of its config and reproduces the CSV byte for byte.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
import yaml

from . import __version__
from . import rng as streams
from .optimizer import RESHUFFLE, RunConfig, sgd_rr_run, sgd_run
from .problems import (
    KINDS,
    SHARINGS,
    ProblemSpec,
    global_optimum,
    make_quadratic_problem,
    make_reparam_problem,
    make_smoothing_erm_problem,
    problem_to_dict,
)
from .sampling import STRATEGIES, WITHOUT_REPLACEMENT
from .variance import (
    budget_factorizations,
    budget_sweep,
    constants_report,
    gradient_norm_bound_audit,
)

EXPERIMENTS = ("variance_sweep", "sgd_trace", "sgd_rr_trace", "bound_audit", "constants")

_EXPERIMENT_HELP = {
    "variance_sweep": "gradient variance at the optimum over budget factorizations b*m",
    "sgd_trace": "projected SGD trajectory with per-step subsampling",
    "sgd_rr_trace": "doubly stochastic SGD trajectory with random reshuffling",
    "bound_audit": "empirical E||g(x)||^2 against its closed-form bound at audit points",
    "constants": "closed-form problem/estimator constants as a flat table",
}


class ConfigError(ValueError):
    """Schema violation in an experiment config."""


# ---------------------------------------------------------------------------
# Strict YAML loading (duplicate keys rejected, line-anchored errors)
# ---------------------------------------------------------------------------

class _StrictLoader(yaml.SafeLoader):
    pass


def _construct_mapping_no_duplicates(loader, node, deep=False):
    mapping = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in mapping:
            raise yaml.constructor.ConstructorError(
                None, None, f"duplicate key {key!r}", key_node.start_mark)
        mapping[key] = loader.construct_object(value_node, deep=deep)
    return mapping


_StrictLoader.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping_no_duplicates)


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    master_seed: int
    problem: dict
    run: dict
    output: Optional[str] = None

    def to_dict(self) -> dict:
        out = {"experiment": self.experiment, "master_seed": self.master_seed,
               "problem": dict(self.problem), "run": dict(self.run)}
        if self.output is not None:
            out["output"] = self.output
        return out


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return section[key]


def _reject_unknown(section: dict, allowed, where: str):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


def _as_int(value, key: str, minimum: int = None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{key} must be >= {minimum}, got {value}")
    return value


def _as_number(value, key: str, positive: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number, got {value!r}")
    if positive and value <= 0:
        raise ConfigError(f"{key} must be positive, got {value}")
    return float(value)


def _as_choice(value, key: str, choices):
    if value not in choices:
        raise ConfigError(f"{key} must be one of {list(choices)}, got {value!r}")
    return value


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a YAML config document; fail fast on bad inputs."""
    try:
        data = yaml.load(text, Loader=_StrictLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    return config_from_dict(data)


def config_from_dict(data: dict) -> ExperimentConfig:
    _reject_unknown(data, ("experiment", "master_seed", "output", "problem", "run"),
                    "the top level")
    experiment = _as_choice(_require(data, "experiment", "the top level"),
                            "experiment", EXPERIMENTS)
    master_seed = _as_int(_require(data, "master_seed", "the top level"),
                          "master_seed", minimum=0)
    problem = _require(data, "problem", "the top level")
    run = _require(data, "run", "the top level")
    if not isinstance(problem, dict) or not isinstance(run, dict):
        raise ConfigError("'problem' and 'run' must be mappings")
    output = data.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError("output must be a string path prefix")

    cfg = ExperimentConfig(experiment=experiment, master_seed=master_seed,
                           problem=dict(problem), run=dict(run), output=output)
    _validate_problem(cfg)
    _validate_run(cfg)
    return cfg


def _validate_problem(cfg: ExperimentConfig):
    pr = cfg.problem
    kind = _as_choice(_require(pr, "kind", "problem"), "problem.kind", KINDS)
    _as_int(_require(pr, "seed", "problem"), "problem.seed", minimum=0)
    _as_int(_require(pr, "n", "problem"), "problem.n", minimum=1)
    if kind == "quadratic":
        _reject_unknown(pr, ("kind", "n", "d", "s", "seed"), "problem")
        _as_int(_require(pr, "d", "problem"), "problem.d", minimum=1)
        s = _require(pr, "s", "problem")
        values = s if isinstance(s, list) else [s]
        if not values:
            raise ConfigError("problem.s must not be empty")
        for v in values:
            _as_number(v, "problem.s", positive=True)
        if cfg.experiment != "variance_sweep" and isinstance(s, list):
            raise ConfigError("problem.s must be a scalar outside variance_sweep")
    elif kind == "smoothing_erm":
        _reject_unknown(pr, ("kind", "n", "d", "perturbation_scale", "seed"), "problem")
        _as_int(_require(pr, "d", "problem"), "problem.d", minimum=1)
        _as_number(_require(pr, "perturbation_scale", "problem"),
                   "problem.perturbation_scale", positive=True)
    else:
        _reject_unknown(pr, ("kind", "n", "d_z", "target_scale", "seed"), "problem")
        _as_int(_require(pr, "d_z", "problem"), "problem.d_z", minimum=1)
        if "target_scale" in pr:
            _as_number(pr["target_scale"], "problem.target_scale", positive=True)
    if cfg.experiment in ("variance_sweep", "bound_audit", "constants") and kind != "quadratic":
        raise ConfigError(f"experiment {cfg.experiment!r} needs the quadratic family")


def _build_problem(pr: dict, s_override=None) -> ProblemSpec:
    kind = pr["kind"]
    if kind == "quadratic":
        s = s_override if s_override is not None else pr["s"]
        return make_quadratic_problem(pr["n"], pr["d"], float(s), pr["seed"])
    if kind == "smoothing_erm":
        return make_smoothing_erm_problem(pr["n"], pr["d"], pr["perturbation_scale"], pr["seed"])
    return make_reparam_problem(pr["n"], pr["d_z"], pr["seed"],
                                target_scale=pr.get("target_scale", 1.0))


def _validate_run(cfg: ExperimentConfig):
    run, pr = cfg.run, cfg.problem
    n = pr["n"]
    exp = cfg.experiment

    def check_batch(b, strategy):
        if strategy == WITHOUT_REPLACEMENT and b > n:
            raise ConfigError(f"run.b={b} exceeds n={n} for sampling without replacement")

    if exp == "variance_sweep":
        _reject_unknown(run, ("budgets", "sharing", "strategy", "reps"), "run")
        budgets = _require(run, "budgets", "run")
        if not isinstance(budgets, list) or not budgets:
            raise ConfigError("run.budgets must be a non-empty list")
        for budget in budgets:
            _as_int(budget, "run.budgets entry", minimum=1)
            if not budget_factorizations(budget, n):
                raise ConfigError(f"budget {budget} admits no batch size b <= n={n}")
        _as_choice(_require(run, "sharing", "run"), "run.sharing", SHARINGS)
        _as_choice(_require(run, "strategy", "run"), "run.strategy", STRATEGIES)
        reps = run.get("reps", 0)
        if _as_int(reps, "run.reps", minimum=0) == 1:
            raise ConfigError("run.reps must be 0 (oracle only) or >= 2")
    elif exp == "sgd_trace":
        _reject_unknown(run, ("b", "m", "sharing", "strategy", "gamma", "steps",
                              "record_every"), "run")
        strategy = _as_choice(_require(run, "strategy", "run"), "run.strategy", STRATEGIES)
        b = _as_int(_require(run, "b", "run"), "run.b", minimum=1)
        check_batch(b, strategy)
        _as_int(_require(run, "m", "run"), "run.m", minimum=1)
        _as_choice(_require(run, "sharing", "run"), "run.sharing", SHARINGS)
        _as_number(_require(run, "gamma", "run"), "run.gamma", positive=True)
        _as_int(_require(run, "steps", "run"), "run.steps", minimum=0)
        _as_int(run.get("record_every", 1), "run.record_every", minimum=1)
    elif exp == "sgd_rr_trace":
        _reject_unknown(run, ("b", "m", "sharing", "gamma", "epochs", "record_every",
                              "exact_gradients"), "run")
        b = _as_int(_require(run, "b", "run"), "run.b", minimum=1)
        if n % b != 0:
            raise ConfigError(f"run.b={b} does not divide n={n} (required for reshuffling)")
        _as_int(_require(run, "m", "run"), "run.m", minimum=1)
        _as_choice(_require(run, "sharing", "run"), "run.sharing", SHARINGS)
        _as_number(_require(run, "gamma", "run"), "run.gamma", positive=True)
        _as_int(_require(run, "epochs", "run"), "run.epochs", minimum=0)
        _as_int(run.get("record_every", 1), "run.record_every", minimum=1)
        if not isinstance(run.get("exact_gradients", False), bool):
            raise ConfigError("run.exact_gradients must be a boolean")
    elif exp == "bound_audit":
        _reject_unknown(run, ("b", "m", "sharing", "strategy", "reps", "points",
                              "point_scale"), "run")
        strategy = _as_choice(_require(run, "strategy", "run"), "run.strategy", STRATEGIES)
        b = _as_int(_require(run, "b", "run"), "run.b", minimum=1)
        check_batch(b, strategy)
        _as_int(_require(run, "m", "run"), "run.m", minimum=1)
        _as_choice(_require(run, "sharing", "run"), "run.sharing", SHARINGS)
        _as_int(run.get("reps", 10000), "run.reps", minimum=2)
        _as_int(run.get("points", 5), "run.points", minimum=1)
        _as_number(run.get("point_scale", 1.0), "run.point_scale", positive=True)
    else:  # constants
        _reject_unknown(run, ("b", "m", "sharing", "strategy"), "run")
        strategy = _as_choice(_require(run, "strategy", "run"), "run.strategy", STRATEGIES)
        b = _as_int(_require(run, "b", "run"), "run.b", minimum=1)
        check_batch(b, strategy)
        _as_int(_require(run, "m", "run"), "run.m", minimum=1)
        _as_choice(_require(run, "sharing", "run"), "run.sharing", SHARINGS)


# ---------------------------------------------------------------------------
# Deterministic CSV output
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    # 17 significant digits round-trips every float64 bit pattern
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    return str(value)


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# Experiment drivers
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out_prefix: Optional[str] = None,
                   threads: int = 1, seed_override: Optional[int] = None) -> dict:
    """Execute one experiment; returns the written file paths."""
    started = time.monotonic()
    if seed_override is not None:
        cfg = ExperimentConfig(experiment=cfg.experiment, master_seed=seed_override,
                               problem=cfg.problem, run=cfg.run, output=cfg.output)
    prefix = out_prefix or cfg.output
    if not prefix:
        raise ConfigError("no output prefix: set 'output' in the config or pass --out")
    directory = os.path.dirname(prefix)
    if directory:
        os.makedirs(directory, exist_ok=True)

    driver = {
        "variance_sweep": _run_variance_sweep,
        "sgd_trace": _run_sgd_trace,
        "sgd_rr_trace": _run_sgd_rr_trace,
        "bound_audit": _run_bound_audit,
        "constants": _run_constants,
    }[cfg.experiment]
    header, rows, instances = driver(cfg, threads)

    results_path = f"{prefix}_results.csv"
    manifest_path = f"{prefix}_manifest.json"
    _write_csv(results_path, header, rows)
    manifest = {
        "tool": "doublysgd",
        "version": __version__,
        "config": cfg.to_dict(),
        "problem_instances": instances,
        "results_csv": os.path.basename(results_path),
        "wall_time_s": time.monotonic() - started,
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return {"results": results_path, "manifest": manifest_path}


def _run_variance_sweep(cfg: ExperimentConfig, threads: int):
    pr, run = cfg.problem, cfg.run
    s_values = pr["s"] if isinstance(pr["s"], list) else [pr["s"]]
    rows = budget_sweep(pr["n"], pr["d"], [float(s) for s in s_values],
                        run["budgets"], run["sharing"], run["strategy"],
                        instance_seed=pr["seed"], reps=run.get("reps", 0),
                        master_seed=cfg.master_seed, threads=threads)
    header = ("s", "budget", "b", "m", "sharing", "strategy", "empirical",
              "std_error", "oracle", "v_com", "v_cor", "v_sub", "bound_total")
    table = [(r.s, r.budget, r.b, r.m, r.sharing, r.strategy, r.empirical,
              r.std_error, r.oracle, r.v_com, r.v_cor, r.v_sub, r.bound_total)
             for r in rows]
    instances = {str(s): problem_to_dict(_build_problem(pr, s_override=s))
                 for s in s_values}
    return header, table, instances


def _trace_table(trace, run, strategy_name, seed):
    gamma = run["gamma"]
    rows = []
    for rec in trace:
        rows.append((rec.epoch, rec.step,
                     float("nan") if rec.dist_sq_to_opt is None else rec.dist_sq_to_opt,
                     float("nan") if rec.grad_norm_sq is None else rec.grad_norm_sq,
                     gamma, run["b"], run["m"], run["sharing"], strategy_name, seed))
    header = ("epoch", "step", "dist_sq", "grad_norm_sq", "gamma", "b", "m",
              "sharing", "strategy", "seed")
    return header, rows


def _run_sgd_trace(cfg: ExperimentConfig, threads: int):
    p = _build_problem(cfg.problem)
    run = cfg.run
    rc = RunConfig(strategy=run["strategy"], b=run["b"], m=run["m"],
                   sharing=run["sharing"], gamma=run["gamma"],
                   steps_or_epochs=run["steps"], master_seed=cfg.master_seed,
                   record_every=run.get("record_every", 1))
    trace = sgd_run(p, rc)
    header, rows = _trace_table(trace, run, run["strategy"], cfg.master_seed)
    return header, rows, {"problem": problem_to_dict(p)}


def _run_sgd_rr_trace(cfg: ExperimentConfig, threads: int):
    p = _build_problem(cfg.problem)
    run = cfg.run
    rc = RunConfig(strategy=RESHUFFLE, b=run["b"], m=run["m"],
                   sharing=run["sharing"], gamma=run["gamma"],
                   steps_or_epochs=run["epochs"], master_seed=cfg.master_seed,
                   record_every=run.get("record_every", 1),
                   exact_gradients=run.get("exact_gradients", False))
    trace = sgd_rr_run(p, rc)
    header, rows = _trace_table(trace, run, RESHUFFLE, cfg.master_seed)
    return header, rows, {"problem": problem_to_dict(p)}


def _run_bound_audit(cfg: ExperimentConfig, threads: int):
    p = _build_problem(cfg.problem)
    run = cfg.run
    report = constants_report(p, run["b"], run["m"], run["sharing"], run["strategy"])
    xstar = global_optimum(p)
    point_rng = streams.substream(cfg.master_seed, streams.STREAM_CELL, 0)
    scale = run.get("point_scale", 1.0)
    points = [xstar + scale * point_rng.standard_normal(p.d)
              for _ in range(run.get("points", 5))]
    audit_rng = streams.substream(cfg.master_seed, streams.STREAM_CELL, 1)
    rows = gradient_norm_bound_audit(p, points, report, run.get("reps", 10000), audit_rng)
    header = ("point_index", "empirical", "std_error", "rhs", "passed")
    table = [(r.point_index, r.empirical, r.std_error, r.rhs, r.passed) for r in rows]
    return header, table, {"problem": problem_to_dict(p)}


def _run_constants(cfg: ExperimentConfig, threads: int):
    p = _build_problem(cfg.problem)
    run = cfg.run
    rep = constants_report(p, run["b"], run["m"], run["sharing"], run["strategy"])
    rows = []
    for name, vec in (("L_i", rep.L_i), ("sigma_i_sq", rep.sigma_i_sq),
                      ("script_L_i", rep.script_L_i)):
        rows.extend((name, i, float(v)) for i, v in enumerate(vec))
    for name, value in (("L_max", rep.L_max), ("mu", rep.mu), ("tau_sq", rep.tau_sq),
                        ("bv_sigma_sq", rep.bv_sigma_sq),
                        ("script_L_sub", rep.script_L_sub),
                        ("script_L_A", rep.script_L_A), ("script_L_B", rep.script_L_B),
                        ("kappa", rep.kappa), ("kappa_sigma", rep.kappa_sigma),
                        ("kappa_tau", rep.kappa_tau)):
        rows.append((name, "", float(value)))
    header = ("quantity", "index", "value")
    return header, rows, {"problem": problem_to_dict(p)}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _load_config_file(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith(".json"):
        data = json.loads(text)
        if "config" in data:  # manifest replay
            return config_from_dict(data["config"])
        return config_from_dict(data)
    return parse_config(text)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="doublysgd",
        description="Run doubly stochastic gradient experiments from a config file.")
    parser.add_argument("--list-experiments", action="store_true",
                        help="print the available experiment names and exit")
    sub = parser.add_subparsers(dest="command")
    runp = sub.add_parser(
        "run", help="run an experiment",
        description="Run the experiment described by a YAML config (or replay "
                    "a JSON manifest). Writes <prefix>_results.csv and "
                    "<prefix>_manifest.json. Defaults: run.record_every=1, "
                    "run.reps=0 for variance_sweep (oracle only) and 10000 for "
                    "bound_audit, run.points=5, run.point_scale=1.0, "
                    "run.exact_gradients=false.")
    runp.add_argument("config_path", help="path to a YAML config or JSON manifest")
    runp.add_argument("--out", help="output path prefix (overrides config 'output')")
    runp.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                      help="parallel sweep cells (default: available cores)")
    runp.add_argument("--seed", type=int, default=None,
                      help="override the config master_seed")

    args = parser.parse_args(argv)
    if args.list_experiments:
        for name in EXPERIMENTS:
            print(f"{name}: {_EXPERIMENT_HELP[name]}")
        return 0
    if args.command != "run":
        parser.print_help()
        return 2
    try:
        cfg = _load_config_file(args.config_path)
        paths = run_experiment(cfg, out_prefix=args.out, threads=max(1, args.threads),
                               seed_override=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1
    print(paths["results"])
    print(paths["manifest"])
    return 0


if __name__ == "__main__":
    sys.exit(main())

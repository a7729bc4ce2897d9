"""Experiment runners: convergence studies over method size, with CSV output.

A run sweeps one method over a size grid (branching factors for trees,
scenario counts for particles), replicates each grid point R times with
independent seed-plan streams, decomposes the strategy MSE against the
closed-form optimum, and fits per-stage log-log convergence rates of the
variance.  Everything is deterministic given the master seed; re-running a
config reproduces the CSV byte for byte.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import partial
from typing import Optional, Sequence

from .benchmarks import LqBenchmark, lq_optimal_policy, lq_problem
from .core import SeedPlan, sample_scenarios
from .evaluation import (EvalPointSet, MseReport, RateFit, fit_rate,
                         gen_eval_points, mse_evaluate, write_mse_csv)
from .particle import ParticleSolveConfig, particle_solve
from .regression import FeedbackPolicy, fit_nearest_neighbor
from .tree import (DEFAULT_NODE_BUDGET, TreeBudgetError, build_tree,
                   solve_tree_gradient, solve_tree_lq_analytic, tree_policy_pairs)


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved settings for one experiment run."""

    method: str                      # "tree" | "particle"
    grid: tuple                      # branching factors or scenario counts
    horizon: int = 4
    epsilon: float = 1.0
    dim: int = 1
    replications: int = 1000
    points: int = 1000
    rho: Optional[float] = None      # None: 0.1 / (1 + epsilon)
    tol: float = 1e-4
    max_iter: int = 2000
    tree_solver: str = "analytic"    # "analytic" | "gradient"
    eval_mode: str = "qmc"           # "qmc" | "pseudo"
    master_seed: int = 20260809
    node_budget: int = DEFAULT_NODE_BUDGET
    jobs: int = 1
    out: Optional[str] = None

    def __post_init__(self):
        if self.method not in ("tree", "particle"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.tree_solver not in ("analytic", "gradient"):
            raise ValueError(f"unknown tree solver {self.tree_solver!r}")
        if self.eval_mode not in ("qmc", "pseudo"):
            raise ValueError(f"unknown eval mode {self.eval_mode!r}")
        if not self.grid:
            raise ValueError("empty size grid")
        if self.method == "particle" and any(n < 1 for n in self.grid):
            raise ValueError("particle scenario counts must be >= 1")
        if self.method == "tree" and self.tree_solver == "analytic" and self.dim != 1:
            raise ValueError("the analytic tree solver is one-dimensional")

    @property
    def benchmark(self) -> LqBenchmark:
        return LqBenchmark(horizon=self.horizon, epsilon=self.epsilon, dim=self.dim)

    @property
    def step_size(self) -> float:
        return self.rho if self.rho is not None else 0.1 / (1.0 + self.epsilon)

    def echo(self) -> dict:
        values = dataclasses.asdict(self)
        values["grid"] = ",".join(str(v) for v in self.grid)
        values["rho"] = f"{self.step_size:g}"
        values.pop("out", None)
        return values


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list            # MseReport per completed grid point
    variance_rates: list     # RateFit per stage: variance vs. size
    skipped: list            # (size, reason) for grid points not run


def _tree_policy_replica(bench: LqBenchmark, tree_solver: str, step_size: float,
                         tol: float, max_iter: int, node_budget: int, branching: int,
                         plan: SeedPlan, replication: int) -> Optional[FeedbackPolicy]:
    problem = lq_problem(bench)
    stream = plan.stream(f"tree-build:nb={branching}", replication)
    tree = build_tree(problem, branching, stream, node_budget=node_budget)
    if tree_solver == "analytic":
        solution = solve_tree_lq_analytic(tree, bench.epsilon)
    else:
        solution = solve_tree_gradient(problem, tree, step=step_size,
                                       tol=tol, max_iter=max_iter)
        if not solution.converged:
            return None
    return fit_nearest_neighbor(tree_policy_pairs(solution))


def _particle_policy_replica(bench: LqBenchmark, step_size: float, tol: float,
                             max_iter: int, n_scenarios: int, plan: SeedPlan,
                             replication: int) -> Optional[FeedbackPolicy]:
    problem = lq_problem(bench)
    stream = plan.stream(f"particle-scenarios:N={n_scenarios}", replication)
    batch = sample_scenarios(problem, n_scenarios, stream)
    solve_config = ParticleSolveConfig(step_size=step_size, tol=tol, max_iter=max_iter)
    system, policy = particle_solve(problem, batch, solve_config)
    return policy if system.converged else None


def _shared_eval_points(config: ExperimentConfig, plan: SeedPlan) -> EvalPointSet:
    problem = lq_problem(config.benchmark)
    optimal = lq_optimal_policy(config.benchmark)
    return gen_eval_points(problem, optimal, config.points, config.eval_mode,
                           plan.stream("eval-points"))


def _variance_rates(reports: Sequence[MseReport], horizon: int) -> list:
    if len(reports) < 3:
        return []
    sizes = [r.param_value for r in reports]
    return [fit_rate(sizes, [r.variance[t] for r in reports]) for t in range(horizon)]


def run_tree_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Replicated tree builds and solves over a branching-factor grid.

    Grid points whose trees would exceed the node budget are skipped with a
    reason instead of failing the run.
    """
    if config.method != "tree":
        raise ValueError("config.method must be 'tree'")
    bench = config.benchmark
    plan = SeedPlan(config.master_seed)
    optimal = lq_optimal_policy(bench)
    points = _shared_eval_points(config, plan)

    reports, skipped = [], []
    for branching in config.grid:
        n_nodes = sum(branching ** (t + 1) for t in range(config.horizon + 1))
        if n_nodes > config.node_budget:
            skipped.append((branching, f"{n_nodes} nodes exceed budget {config.node_budget}"))
            continue
        make = partial(_tree_policy_replica, bench, config.tree_solver,
                       config.step_size, config.tol, config.max_iter,
                       config.node_budget, branching, plan)
        reports.append(mse_evaluate(
            make, optimal, points, config.replications, method="tree",
            param_name="n_b", param_value=branching,
            master_seed=config.master_seed, n_jobs=config.jobs))

    result = ExperimentResult(config=config, reports=reports,
                              variance_rates=_variance_rates(reports, config.horizon),
                              skipped=skipped)
    if config.out:
        write_mse_csv(reports, config.out, config.echo())
    return result


def run_particle_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Replicated particle solves over a scenario-count grid."""
    if config.method != "particle":
        raise ValueError("config.method must be 'particle'")
    bench = config.benchmark
    plan = SeedPlan(config.master_seed)
    optimal = lq_optimal_policy(bench)
    points = _shared_eval_points(config, plan)

    reports = []
    for n_scenarios in config.grid:
        make = partial(_particle_policy_replica, bench, config.step_size,
                       config.tol, config.max_iter, n_scenarios, plan)
        reports.append(mse_evaluate(
            make, optimal, points, config.replications, method="particle",
            param_name="N", param_value=n_scenarios,
            master_seed=config.master_seed, n_jobs=config.jobs))

    result = ExperimentResult(config=config, reports=reports,
                              variance_rates=_variance_rates(reports, config.horizon),
                              skipped=[])
    if config.out:
        write_mse_csv(reports, config.out, config.echo())
    return result


@dataclass
class CompareResult:
    tree: ExperimentResult
    particle: ExperimentResult
    merged_reports: list   # tree reports re-keyed by total scenario count, then particle


def scenario_count_for_branching(branching: int, horizon: int) -> int:
    """Total scenarios a tree consumes: branching**(horizon+1)."""
    return branching ** (horizon + 1)


def run_compare(tree_config: ExperimentConfig,
                particle_config: ExperimentConfig,
                out: Optional[str] = None) -> CompareResult:
    """Run both methods on a shared benchmark and merge onto one size axis.

    Tree rows are re-keyed by the total scenario count N = n_b**(T+1) so both
    methods share the x-axis of the merged CSV.
    """
    same_bench = (tree_config.horizon == particle_config.horizon
                  and tree_config.epsilon == particle_config.epsilon
                  and tree_config.dim == particle_config.dim)
    if not same_bench:
        raise ValueError("compare requires both configs to share the benchmark")
    tree_result = run_tree_experiment(tree_config)
    particle_result = run_particle_experiment(particle_config)

    merged = []
    for report in tree_result.reports:
        n_key = scenario_count_for_branching(report.param_value, tree_config.horizon)
        merged.append(dataclasses.replace(report, param_name="N", param_value=n_key))
    merged.extend(particle_result.reports)

    if out:
        echo = {f"tree.{k}": v for k, v in tree_config.echo().items()}
        echo.update({f"particle.{k}": v for k, v in particle_config.echo().items()})
        write_mse_csv(merged, out, echo)
    return CompareResult(tree=tree_result, particle=particle_result, merged_reports=merged)


# --- flat key=value config files -------------------------------------------

_INT_KEYS = {"horizon", "dim", "replications", "points", "max_iter",
             "master_seed", "node_budget", "jobs"}
_FLOAT_KEYS = {"epsilon", "rho", "tol"}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment, blank lines ignored."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key == "grid":
            values[key] = tuple(int(v) for v in val.split(",") if v.strip())
        elif key in _INT_KEYS:
            values[key] = int(val)
        elif key in _FLOAT_KEYS:
            values[key] = float(val)
        else:
            values[key] = val
    return values


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Build an ExperimentConfig from a flat config file plus overrides."""
    with open(path) as fh:
        values = parse_config_text(fh.read())
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def matched_particle_grid(tree_grid: Sequence[int], horizon: int) -> tuple:
    """Scenario counts matching each tree branching factor."""
    return tuple(scenario_count_for_branching(b, horizon) for b in tree_grid)

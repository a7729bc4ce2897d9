"""Command-line experiment runner.

Subcommands:
  tree      convergence study over branching factors
  particle  convergence study over scenario counts
  compare   both methods, merged onto the total-scenario-count axis
  validate  fast oracle suite (closed forms, solvers, regression, evaluation)

Settings come from an optional flat ``key = value`` config file, overridden
by command-line flags.  Results go to stdout plus a CSV when --out is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import __version__
from .benchmarks import LqBenchmark, lq_grid_dp, lq_optimal_policy, lq_problem
from .core import SeedPlan, check_derivatives, sample_scenarios
from .evaluation import gen_eval_points, mse_evaluate, simulation_indicator
from .experiments import (ExperimentConfig, ExperimentResult, load_config,
                          matched_particle_grid, run_compare,
                          run_particle_experiment, run_tree_experiment)
from .regression import NearestNeighborRegressor, nearest_center_indices_exhaustive
from .tree import build_tree, solve_tree_gradient, solve_tree_lq_analytic


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int, dest="master_seed", help="master seed")
    parser.add_argument("--out", help="CSV output path")
    parser.add_argument("--replications", type=int, help="replications per grid point")
    parser.add_argument("--points", type=int, help="evaluation points per stage")
    parser.add_argument("--grid", type=_int_list, help="comma-separated size grid")
    parser.add_argument("--dim", type=int, choices=(1, 2), help="state dimension")
    parser.add_argument("--epsilon", type=float, help="control cost weight")
    parser.add_argument("--horizon", type=int, help="number of decision stages")
    parser.add_argument("--solver", choices=("analytic", "gradient"),
                        dest="tree_solver", help="tree node solver")
    parser.add_argument("--rho", type=float, help="gradient step size")
    parser.add_argument("--tol", type=float, help="stationarity tolerance")
    parser.add_argument("--max-iter", type=int, dest="max_iter", help="gradient iteration cap")
    parser.add_argument("--mode", choices=("qmc", "pseudo"), dest="eval_mode",
                        help="evaluation point generation mode")
    parser.add_argument("--jobs", type=int, help="parallel replication workers")


def _int_list(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _build_config(args: argparse.Namespace, method: str, grid_override=None) -> ExperimentConfig:
    overrides = {key: getattr(args, key, None) for key in (
        "master_seed", "out", "replications", "points", "grid", "dim",
        "epsilon", "horizon", "tree_solver", "rho", "tol", "max_iter",
        "eval_mode", "jobs")}
    if grid_override is not None:
        overrides["grid"] = grid_override
    overrides["method"] = method
    if args.config:
        return load_config(args.config, overrides)
    values = {k: v for k, v in overrides.items() if v is not None}
    if "grid" not in values:
        raise SystemExit("--grid is required without a config file")
    return ExperimentConfig(**values)


def _print_result(result: ExperimentResult) -> None:
    config = result.config
    print(f"method={config.method} T={config.horizon} eps={config.epsilon} "
          f"d={config.dim} R={config.replications} P={config.points} "
          f"seed={config.master_seed}")
    for size, reason in result.skipped:
        print(f"  skipped {config.method} size {size}: {reason}")
    for report in result.reports:
        total_bias = float(np.sum(report.squared_bias))
        total_var = float(np.sum(report.variance))
        print(f"  {report.param_name}={report.param_value}: "
              f"bias_sq={total_bias:.6g} variance={total_var:.6g} "
              f"mse={total_bias + total_var:.6g} excluded={report.excluded}")
    for t, rate in enumerate(result.variance_rates):
        print(f"  stage {t}: variance slope {rate.slope:+.3f} "
              f"(residual {rate.residual:.3f})")
    if config.out:
        print(f"  csv written to {config.out}")


def _cmd_tree(args) -> int:
    result = run_tree_experiment(_build_config(args, "tree"))
    _print_result(result)
    return 0


def _cmd_particle(args) -> int:
    result = run_particle_experiment(_build_config(args, "particle"))
    _print_result(result)
    return 0


def _cmd_compare(args) -> int:
    tree_config = dataclasses.replace(_build_config(args, "tree"), out=None)
    particle_grid = args.particle_grid or matched_particle_grid(
        tree_config.grid, tree_config.horizon)
    particle_config = dataclasses.replace(
        tree_config, method="particle", grid=particle_grid, tree_solver="analytic")
    result = run_compare(tree_config, particle_config, out=args.out)
    _print_result(result.tree)
    _print_result(result.particle)
    print("merged size keys:",
          ", ".join(str(r.param_value) for r in result.merged_reports))
    if args.out:
        print(f"merged csv written to {args.out}")
    return 0


def _check(name: str, ok: bool, detail: str, failures: list) -> None:
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {name}: {detail}")
    if not ok:
        failures.append(name)


def _cmd_validate(args) -> int:
    """Fast oracle suite; returns nonzero when any check fails."""
    failures: list = []
    seed = args.master_seed if args.master_seed is not None else 20260809
    plan = SeedPlan(seed)
    bench = LqBenchmark(horizon=4, epsilon=1.0, dim=1)
    problem = lq_problem(bench)
    optimal = lq_optimal_policy(bench)

    rng = plan.stream("validate-probes")
    probes = [(int(rng.integers(0, bench.horizon)), rng.uniform(-2, 2, 1),
               rng.uniform(-2, 2, 1), rng.uniform(-1, 1, 1)) for _ in range(20)]
    report = check_derivatives(problem, probes)
    _check("derivatives", report.ok(1e-6) and not report.non_finite,
           f"max relative deviation {report.worst_rel:.2e}", failures)

    dp = lq_grid_dp(bench, x_step=0.01, u_step=0.01, quad_nodes=64)
    inner = np.abs(dp.x_grid) <= 2.0
    sup = 0.0
    for t in range(bench.horizon):
        closed = optimal.evaluate(t, dp.x_grid[inner, None])[:, 0]
        sup = max(sup, float(np.max(np.abs(closed - dp.policy[t][inner]))))
    _check("closed form vs grid DP", sup <= 2e-3, f"sup deviation {sup:.2e}", failures)

    worst = 0.0
    for r in range(5):
        small = LqBenchmark(horizon=3, epsilon=1.0, dim=1)
        small_problem = lq_problem(small)
        tree = build_tree(small_problem, 2, plan.stream("validate-tree", r))
        analytic = solve_tree_lq_analytic(tree, small.epsilon)
        gradient = solve_tree_gradient(small_problem, tree, step=0.1,
                                       tol=1e-9, max_iter=20000)
        worst = max(worst, float(np.max(np.abs(analytic.controls - gradient.controls))))
    _check("tree gradient vs analytic", worst <= 1e-6,
           f"max control deviation {worst:.2e}", failures)

    rng = plan.stream("validate-nn")
    centers = rng.uniform(-3, 3, (60, 2))
    queries = rng.uniform(-3, 3, (1000, 2))
    regressor = NearestNeighborRegressor(centers, rng.normal(size=(60, 1)))
    fast = regressor.nearest_indices(queries)
    slow = nearest_center_indices_exhaustive(centers, queries)
    _check("nearest-neighbor scan equivalence", bool(np.array_equal(fast, slow)),
           f"{int(np.sum(fast != slow))} mismatches over {queries.shape[0]} queries",
           failures)

    points = gen_eval_points(problem, optimal, 200, "qmc", plan.stream("validate-eval"))
    mse = mse_evaluate(lambda r: optimal, optimal, points, replications=4)
    identity = float(np.max(np.abs(mse.mse - mse.squared_bias - mse.variance)))
    zero = float(np.max(mse.mse))
    _check("mse decomposition", identity == 0.0 and zero <= 1e-28,
           f"identity residual {identity:.1e}, optimal-policy mse {zero:.1e}", failures)

    indicator = simulation_indicator(optimal, optimal, problem, 100,
                                     plan.stream("validate-indicator"))
    _check("simulation indicator at optimum", indicator == 0.0,
           f"value {indicator:.1e}", failures)

    batch_a = sample_scenarios(problem, 64, plan.stream("validate-repro"))
    batch_b = sample_scenarios(problem, 64, plan.stream("validate-repro"))
    _check("seeded reproducibility", bool(np.array_equal(batch_a.values, batch_b.values)),
           "identical scenario batches from one seed", failures)

    print(f"{7 - len(failures)}/7 checks passed")
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="socbench",
        description="Sample-based stochastic optimal control benchmarks")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (("tree", "scenario-tree convergence study"),
                           ("particle", "particle-method convergence study")):
        p = sub.add_parser(name, help=helptext)
        _add_common_flags(p)

    p_compare = sub.add_parser("compare", help="run both methods on a shared axis")
    _add_common_flags(p_compare)
    p_compare.add_argument("--particle-grid", type=_int_list,
                           help="scenario counts (default: matched to tree grid)")

    p_validate = sub.add_parser("validate", help="run the fast oracle suite")
    p_validate.add_argument("--seed", type=int, dest="master_seed")

    args = parser.parse_args(argv)
    handlers = {"tree": _cmd_tree, "particle": _cmd_particle,
                "compare": _cmd_compare, "validate": _cmd_validate}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())

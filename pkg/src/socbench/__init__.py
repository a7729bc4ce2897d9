"""Sample-based stochastic optimal control: scenario trees vs. particles.

The package implements two scenario-based solution methods for finite-horizon
stochastic control problems and a measurement harness that scores each
method's feedback strategy against a closed-form optimum by mean squared
error, decomposed into squared bias and variance over replicated runs.
"""

__version__ = "0.1.0"

from .benchmarks import (LqBenchmark, lq_grid_dp, lq_optimal_adjoint,
                         lq_optimal_policy, lq_problem)
from .core import (ControlProblem, Dimensions, NoiseModel, ScenarioBatch,
                   SeedPlan, check_derivatives, sample_scenarios)
from .evaluation import (EvalPointSet, MseReport, RateFit, fit_rate,
                         gen_eval_points, mse_evaluate, simulation_indicator)
from .experiments import (ExperimentConfig, ExperimentResult, run_compare,
                          run_particle_experiment, run_tree_experiment)
from .particle import (ParticleSolveConfig, ParticleSystem, backward_pass,
                       forward_pass, gradient_pass, particle_solve)
from .regression import (ClosedFormPolicy, FeedbackPolicy,
                         NearestNeighborPolicy, NearestNeighborRegressor,
                         eval_policy, fit_nearest_neighbor, mean_policy)
from .tree import (ScenarioTree, TreeSolution, build_tree,
                   solve_tree_gradient, solve_tree_lq_analytic)

__all__ = [
    "ControlProblem", "Dimensions", "NoiseModel", "ScenarioBatch", "SeedPlan",
    "check_derivatives", "sample_scenarios",
    "ScenarioTree", "TreeSolution", "build_tree", "solve_tree_gradient",
    "solve_tree_lq_analytic",
    "FeedbackPolicy", "NearestNeighborPolicy", "ClosedFormPolicy",
    "NearestNeighborRegressor", "fit_nearest_neighbor", "eval_policy",
    "mean_policy",
    "ParticleSolveConfig", "ParticleSystem", "forward_pass", "backward_pass",
    "gradient_pass", "particle_solve",
    "LqBenchmark", "lq_problem", "lq_optimal_policy", "lq_grid_dp",
    "lq_optimal_adjoint",
    "EvalPointSet", "MseReport", "RateFit", "gen_eval_points", "mse_evaluate",
    "simulation_indicator", "fit_rate",
    "ExperimentConfig", "ExperimentResult", "run_tree_experiment",
    "run_particle_experiment", "run_compare",
]

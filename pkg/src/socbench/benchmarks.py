"""The linear-quadratic case study and its independent oracles.

The benchmark is the scalar problem with dynamics x_{t+1} = x_t + u_t + w_{t+1},
stage cost eps*u_t^2, final cost x_T^2, initial state x_0 = w_0, and i.i.d.
uniform noise on [-1, 1].  Its optimal feedback is -x / (T - t + eps).  The
two-dimensional variant runs two independent copies componentwise, so the
closed forms carry over coordinate by coordinate.

``lq_grid_dp`` is a deliberately independent check: backward value iteration
on a state grid with midpoint quadrature over the noise, never touching the
closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ControlProblem, Dimensions, NoiseModel
from .regression import ClosedFormPolicy

Array = np.ndarray


@dataclass(frozen=True)
class LqBenchmark:
    horizon: int = 4
    epsilon: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")


def lq_problem(bench: LqBenchmark) -> ControlProblem:
    """The benchmark as a ControlProblem with exact derivatives."""
    d = bench.dim
    eps = bench.epsilon
    eye = np.eye(d)

    def dynamics(t, x, u, w):
        return x + u + w

    def stage_cost(t, x, u):
        return eps * np.sum(u * u, axis=-1)

    def final_cost(x):
        return np.sum(x * x, axis=-1)

    def dynamics_dx(t, x, u, w):
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], w.shape[:-1])
        return np.broadcast_to(eye, shape + (d, d))

    def stage_cost_dx(t, x, u):
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        return np.zeros(shape + (d,))

    def stage_cost_du(t, x, u):
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        return np.broadcast_to(2.0 * eps * u, shape + (d,))

    def final_cost_dx(x):
        return 2.0 * x

    return ControlProblem(
        dims=Dimensions(horizon=bench.horizon, state_dim=d, control_dim=d, noise_dim=d),
        dynamics=dynamics,
        stage_cost=stage_cost,
        final_cost=final_cost,
        dynamics_dx=dynamics_dx,
        dynamics_du=dynamics_dx,  # both Jacobians are the identity
        stage_cost_dx=stage_cost_dx,
        stage_cost_du=stage_cost_du,
        final_cost_dx=final_cost_dx,
        noise_model=NoiseModel.iid_uniform(d, bench.horizon + 1),
    )


def lq_optimal_policy(bench: LqBenchmark) -> ClosedFormPolicy:
    """Closed-form optimal feedback -x / (T - t + eps), componentwise."""
    T, eps = bench.horizon, bench.epsilon

    def gamma(t: int, x: Array) -> Array:
        return -x / (T - t + eps)

    return ClosedFormPolicy(horizon=T, fn=gamma)


def lq_optimal_adjoint(bench: LqBenchmark, t: int, x: Array) -> Array:
    """Gradient of the optimal cost-to-go: 2*eps*x / (T - t + eps), and 2x at t = T."""
    if not 0 <= t <= bench.horizon:
        raise ValueError(f"stage {t} outside 0..{bench.horizon}")
    x = np.asarray(x, dtype=float)
    return 2.0 * bench.epsilon * x / (bench.horizon - t + bench.epsilon)


def lq_optimal_value_coeff(bench: LqBenchmark, t: int) -> float:
    """Quadratic coefficient of the optimal value function at stage t.

    The cost-to-go is coeff * ||x||^2 plus a state-independent constant.
    """
    return bench.epsilon / (bench.horizon - t + bench.epsilon)


@dataclass(frozen=True)
class GridDpResult:
    """Tabulated value functions and argmin controls from backward induction."""

    x_grid: Array           # (n_grid,)
    values: Array           # (T+1, n_grid) value tables, stage T is the final cost
    policy: Array           # (T, n_grid) argmin controls
    refinement_drift: float  # sup distance to a once-refined run; 0 when unchecked

    def policy_at(self, t: int, x: Array) -> Array:
        return np.interp(np.asarray(x, dtype=float), self.x_grid, self.policy[t])


def lq_grid_dp(bench: LqBenchmark, x_step: float = 0.01, u_step: float = 0.01,
               quad_nodes: int = 64, self_check: bool = False) -> GridDpResult:
    """Backward value iteration for the scalar benchmark on uniform grids.

    The expectation over the uniform noise uses midpoint quadrature with
    ``quad_nodes`` nodes on [-1, 1].  The state grid covers the reachable set
    [-(T+1), T+1]; the control minimization scans a uniform grid and refines
    the discrete argmin with one parabolic fit, which is exact for the
    quadratic-in-control objective.  With ``self_check`` the computation is
    repeated on half-step grids and the policy drift recorded.
    """
    if bench.dim != 1:
        raise ValueError("the grid oracle is one-dimensional")
    T, eps = bench.horizon, bench.epsilon
    lim = float(T + 1)
    x_grid = np.linspace(-lim, lim, round(2 * lim / x_step) + 1)
    u_grid = np.linspace(-lim, lim, round(2 * lim / u_step) + 1)
    w_nodes = -1.0 + (2.0 * np.arange(quad_nodes) + 1.0) / quad_nodes  # midpoints, weight 1/Q

    values = np.empty((T + 1, x_grid.size))
    policy = np.empty((T, x_grid.size))
    values[T] = x_grid**2
    for t in range(T - 1, -1, -1):
        # Noise-averaged continuation value on the grid (constant extrapolation
        # at the ends; excursions beyond the grid are never optimal).
        cont = np.interp(x_grid[:, None] + w_nodes[None, :], x_grid, values[t + 1]).mean(axis=1)
        # cost(x_k, u_j) = eps u^2 + E V_{t+1}(x + u + w)
        cost = eps * u_grid[None, :] ** 2 + np.interp(
            x_grid[:, None] + u_grid[None, :], x_grid, cont)
        j = np.argmin(cost, axis=1)
        j = np.clip(j, 1, u_grid.size - 2)
        rows = np.arange(x_grid.size)
        c_m, c_0, c_p = cost[rows, j - 1], cost[rows, j], cost[rows, j + 1]
        denom = c_p - 2.0 * c_0 + c_m
        shift = np.where(denom > 0, 0.5 * (c_m - c_p) / np.where(denom > 0, denom, 1.0), 0.0)
        shift = np.clip(shift, -1.0, 1.0)
        policy[t] = u_grid[j] + shift * u_step
        value_shift = np.where(denom > 0, -0.125 * (c_m - c_p) ** 2 / np.where(denom > 0, denom, 1.0), 0.0)
        values[t] = c_0 + value_shift

    drift = 0.0
    if self_check:
        refined = lq_grid_dp(bench, x_step / 2, u_step / 2, quad_nodes * 2, self_check=False)
        inner = np.abs(x_grid) <= 2.0
        drift = float(np.max(np.abs(refined.policy_at(0, x_grid[inner]) - policy[0][inner])))
    return GridDpResult(x_grid=x_grid, values=values, policy=policy, refinement_drift=drift)

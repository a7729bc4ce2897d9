"""Particle method: sampled optimality conditions solved by gradient iteration.

The method keeps N scenario particles with state, control and adjoint
trajectories.  Each iteration integrates the states forward, runs the adjoint
recursion backward - replacing the conditional expectation of the next-stage
adjoint by a regression over the current adjoint particles - and takes a
fixed-size gradient step on every control particle.  The per-stage sums over
the noise index j are full N-term sums; each of the N particles therefore
queries the regressor at N propagated points per stage, an O(N^2) cost that
is accepted by design (``noise_subsample`` trades it against fidelity).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import ControlProblem, NonFiniteValueError, ScenarioBatch
from .regression import (FeedbackPolicy, NearestNeighborRegressor,
                         RegressorFactory, fit_nearest_neighbor)

Array = np.ndarray


@dataclass
class ParticleSolveConfig:
    """Gradient-iteration settings.

    ``step_size`` is the fixed gradient step; the default is conservative for
    the quadratic benchmark at unit control weight.  Iteration stops when the
    largest per-particle gradient norm is at most ``tol``, aborts early when
    it grows by more than ``divergence_factor`` over its starting value, and
    otherwise runs ``max_iter`` sweeps.  ``init_controls`` of None starts all
    control particles at zero.  ``noise_subsample`` caps the number of noise
    particles entering the j-sums (None keeps the full sums).
    """

    step_size: float = 0.05
    tol: float = 1e-4
    max_iter: int = 2000
    init_controls: Optional[Array] = None
    divergence_factor: float = 1e3
    noise_subsample: Optional[int] = None

    def __post_init__(self):
        if self.step_size <= 0 or self.tol <= 0 or self.max_iter < 1:
            raise ValueError("step_size and tol must be positive, max_iter >= 1")


@dataclass
class ParticleSystem:
    """State of the particle iteration at termination."""

    scenarios: ScenarioBatch
    states: Array            # (N, T+1, n_x)
    controls: Array          # (N, T, n_u)
    adjoints: Array          # (N, T+1, n_x)
    gradients: Array         # (N, T, n_u), at the returned iterate
    iterations: int
    converged: bool
    diverged: bool = False
    grad_norm_history: list = field(default_factory=list)
    objective_history: list = field(default_factory=list)

    @property
    def final_grad_norm(self) -> float:
        return self.grad_norm_history[-1] if self.grad_norm_history else float("nan")


def forward_pass(problem: ControlProblem, controls: Array, scenarios: ScenarioBatch) -> Array:
    """Integrate the N state particles: x_0 = w_0, then the dynamics stagewise."""
    w = scenarios.values
    N, T = w.shape[0], problem.dims.horizon
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (N, T, problem.dims.control_dim):
        raise ValueError(f"controls must have shape {(N, T, problem.dims.control_dim)}, "
                         f"got {controls.shape}")
    states = np.empty((N, T + 1, problem.dims.state_dim))
    states[:, 0, :] = w[:, 0, :]
    for t in range(T):
        nxt = problem.dynamics(t, states[:, t, :], controls[:, t, :], w[:, t + 1, :])
        bad = ~np.isfinite(nxt)
        if np.any(bad):
            i = int(np.argwhere(np.any(bad, axis=-1))[0, 0])
            raise NonFiniteValueError(f"non-finite state for particle {i} at stage {t + 1}")
        states[:, t + 1, :] = nxt
    return states


def _stage_pull(problem: ControlProblem, t: int, x: Array, u: Array, w_next: Array,
                regressor, want_grads: bool) -> tuple:
    """Noise-averaged adjoint pullbacks at one stage.

    Evaluates the regressed next-stage adjoint at every (particle, noise)
    propagation f_t(x_i, u_i, w_j) and averages the transposed-Jacobian
    products over j.  Returns (adjoint increment, gradient) arrays of shapes
    (N, n_x) and (N, n_u); the gradient slot is None unless requested.
    """
    N = x.shape[0]
    M = w_next.shape[0]
    x_b, u_b = x[:, None, :], u[:, None, :]
    w_b = w_next[None, :, :]
    y = problem.dynamics(t, x_b, u_b, w_b)                     # (N, M, n_x)
    lam = regressor.predict(y.reshape(-1, y.shape[-1])).reshape(N, M, -1)
    jac_x = problem.dynamics_dx(t, x_b, u_b, w_b)              # (N, M, n_x, n_x)
    adj = problem.stage_cost_dx(t, x, u) + np.einsum("nmij,nmi->nmj", jac_x, lam).mean(axis=1)
    grad = None
    if want_grads:
        jac_u = problem.dynamics_du(t, x_b, u_b, w_b)          # (N, M, n_x, n_u)
        grad = problem.stage_cost_du(t, x, u) + np.einsum("nmij,nmi->nmj", jac_u, lam).mean(axis=1)
    return adj, grad


def _noise_for_sums(scenarios: ScenarioBatch, t: int, subsample: Optional[int]) -> Array:
    w = scenarios.values[:, t, :]
    if subsample is not None and subsample < w.shape[0]:
        return w[:subsample]
    return w


def backward_pass(problem: ControlProblem, states: Array, controls: Array,
                  scenarios: ScenarioBatch,
                  regressor_factory: RegressorFactory = NearestNeighborRegressor,
                  noise_subsample: Optional[int] = None) -> Array:
    """Adjoint particles by the backward recursion with regressed continuation.

    The stage-(t+1) regressor is refit on the just-computed adjoint particles
    before stage t is evaluated.
    """
    T = problem.dims.horizon
    N = states.shape[0]
    adjoints = np.empty((N, T + 1, problem.dims.state_dim))
    adjoints[:, T, :] = problem.final_cost_dx(states[:, T, :])
    for t in range(T - 1, -1, -1):
        regressor = regressor_factory(states[:, t + 1, :], adjoints[:, t + 1, :])
        w_next = _noise_for_sums(scenarios, t + 1, noise_subsample)
        adj, _ = _stage_pull(problem, t, states[:, t, :], controls[:, t, :],
                             w_next, regressor, want_grads=False)
        bad = ~np.isfinite(adj)
        if np.any(bad):
            i = int(np.argwhere(np.any(bad, axis=-1))[0, 0])
            raise NonFiniteValueError(f"non-finite adjoint for particle {i} at stage {t}")
        adjoints[:, t, :] = adj
    return adjoints


def gradient_pass(problem: ControlProblem, states: Array, controls: Array,
                  scenarios: ScenarioBatch, adjoints: Array,
                  regressor_factory: RegressorFactory = NearestNeighborRegressor,
                  noise_subsample: Optional[int] = None) -> Array:
    """Stationarity residuals per control particle, from completed adjoints."""
    T = problem.dims.horizon
    N = states.shape[0]
    grads = np.empty((N, T, problem.dims.control_dim))
    for t in range(T):
        regressor = regressor_factory(states[:, t + 1, :], adjoints[:, t + 1, :])
        w_next = _noise_for_sums(scenarios, t + 1, noise_subsample)
        _, g = _stage_pull(problem, t, states[:, t, :], controls[:, t, :],
                           w_next, regressor, want_grads=True)
        grads[:, t, :] = g
    return grads


def _fused_backward_gradient(problem: ControlProblem, states: Array, controls: Array,
                             scenarios: ScenarioBatch, regressor_factory: RegressorFactory,
                             noise_subsample: Optional[int]) -> tuple:
    """One backward sweep computing adjoints and gradients together.

    Shares the propagated points and regressor evaluations between the
    adjoint and gradient formulas; bit-identical to running backward_pass
    followed by gradient_pass.
    """
    T = problem.dims.horizon
    N = states.shape[0]
    adjoints = np.empty((N, T + 1, problem.dims.state_dim))
    grads = np.empty((N, T, problem.dims.control_dim))
    adjoints[:, T, :] = problem.final_cost_dx(states[:, T, :])
    for t in range(T - 1, -1, -1):
        regressor = regressor_factory(states[:, t + 1, :], adjoints[:, t + 1, :])
        w_next = _noise_for_sums(scenarios, t + 1, noise_subsample)
        adj, g = _stage_pull(problem, t, states[:, t, :], controls[:, t, :],
                             w_next, regressor, want_grads=True)
        if not np.all(np.isfinite(adj)):
            i = int(np.argwhere(~np.isfinite(adj).all(axis=-1))[0, 0])
            raise NonFiniteValueError(f"non-finite adjoint for particle {i} at stage {t}")
        adjoints[:, t, :] = adj
        grads[:, t, :] = g
    return adjoints, grads


def empirical_objective(problem: ControlProblem, states: Array, controls: Array) -> float:
    """Scenario average of the trajectory cost."""
    return float(np.mean(problem.trajectory_cost(states, controls)))


def particle_solve(problem: ControlProblem, scenarios: ScenarioBatch,
                   config: ParticleSolveConfig,
                   regressor_factory: RegressorFactory = NearestNeighborRegressor,
                   ) -> tuple[ParticleSystem, FeedbackPolicy]:
    """Run the three-step particle iteration until stationarity.

    Each sweep integrates states forward, refits the adjoint regression
    backward and updates every control particle by one gradient step.  The
    returned system holds the last evaluated iterate (states, adjoints and
    gradients all consistent with the returned controls); the policy is the
    nearest-neighbor fit of the per-stage (state, control) particles, so it
    carries N pieces at every stage.
    """
    N = scenarios.count
    T = problem.dims.horizon
    if config.init_controls is None:
        controls = np.zeros((N, T, problem.dims.control_dim))
    else:
        controls = np.array(config.init_controls, dtype=float)
        if controls.shape != (N, T, problem.dims.control_dim):
            raise ValueError("init_controls shape mismatch")

    grad_history: list = []
    obj_history: list = []
    converged = False
    diverged = False
    states = adjoints = grads = None
    iterations = 0
    for k in range(config.max_iter):
        states = forward_pass(problem, controls, scenarios)
        adjoints, grads = _fused_backward_gradient(
            problem, states, controls, scenarios, regressor_factory, config.noise_subsample)
        grad_norm = float(np.max(np.linalg.norm(grads, axis=2)))
        grad_history.append(grad_norm)
        obj_history.append(empirical_objective(problem, states, controls))
        iterations = k + 1
        if grad_norm <= config.tol:
            converged = True
            break
        if grad_norm > config.divergence_factor * max(grad_history[0], 1e-300):
            diverged = True
            break
        if k < config.max_iter - 1:
            controls = controls - config.step_size * grads

    system = ParticleSystem(
        scenarios=scenarios, states=states, controls=controls, adjoints=adjoints,
        gradients=grads, iterations=iterations, converged=converged, diverged=diverged,
        grad_norm_history=grad_history, objective_history=obj_history)
    pairs = [(states[:, t, :], controls[:, t, :]) for t in range(T)]
    return system, fit_nearest_neighbor(pairs)


def dump_trace_csv(system: ParticleSystem, path) -> None:
    """Iteration trace: ``iter, max_grad_norm, empirical_objective``."""
    lines = ["iter,max_grad_norm,empirical_objective"]
    for k, (g, obj) in enumerate(zip(system.grad_norm_history, system.objective_history)):
        lines.append(f"{k},{g:.17g},{obj:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

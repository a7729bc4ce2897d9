"""Regularly branching scenario trees and solvers for the discretized problem.

A tree with branching factor ``b`` over horizon ``T`` has ``b**(t+1)`` nodes
at stage t (the paper-style convention with ``b`` root nodes carrying the
stage-0 noise) and ``b**(T+1)`` leaves.  Nodes are stored stage-major in flat
arrays; the children of the node at local position p within stage t occupy
local positions ``p*b .. p*b + b - 1`` within stage t+1, so child blocks are
contiguous and subtree reductions are plain reshapes.

Weights are uniform within a stage: every node carries probability
``b**-(t+1)``, the empirical choice for i.i.d. conditional sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ControlProblem, NonFiniteValueError

Array = np.ndarray

DEFAULT_NODE_BUDGET = 10**6


class TreeBudgetError(ValueError):
    """Requested tree exceeds the configured node budget."""


@dataclass(frozen=True)
class ScenarioTree:
    """Flat-array scenario tree with constant branching factor."""

    horizon: int
    branching: int
    noise: Array           # (n_nodes, n_w), stage-major
    stage_offsets: Array   # (T+2,): stage-t block is [offsets[t], offsets[t+1])

    @property
    def n_nodes(self) -> int:
        return self.noise.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.noise.shape[1]

    @property
    def n_scenarios(self) -> int:
        return self.branching ** (self.horizon + 1)

    def stage_size(self, t: int) -> int:
        return int(self.stage_offsets[t + 1] - self.stage_offsets[t])

    def stage_slice(self, t: int) -> slice:
        return slice(int(self.stage_offsets[t]), int(self.stage_offsets[t + 1]))

    def nodes_at_stage(self, t: int) -> Array:
        return np.arange(self.stage_offsets[t], self.stage_offsets[t + 1])

    def stage_of(self, node: int) -> int:
        return int(np.searchsorted(self.stage_offsets, node, side="right") - 1)

    def parent(self, node: int) -> Optional[int]:
        t = self.stage_of(node)
        if t == 0:
            return None
        local = node - int(self.stage_offsets[t])
        return int(self.stage_offsets[t - 1]) + local // self.branching

    def children(self, node: int) -> Array:
        t = self.stage_of(node)
        if t == self.horizon:
            return np.empty(0, dtype=int)
        local = node - int(self.stage_offsets[t])
        start = int(self.stage_offsets[t + 1]) + local * self.branching
        return np.arange(start, start + self.branching)

    def descendants(self, node: int) -> Array:
        """All strict descendants of a node (its whole subtree, node excluded)."""
        out = []
        frontier = self.children(node)
        while frontier.size:
            out.append(frontier)
            lo, hi = frontier[0], frontier[-1]
            t = self.stage_of(int(lo))
            if t == self.horizon:
                break
            base = int(self.stage_offsets[t + 1])
            lo_local = int(lo) - int(self.stage_offsets[t])
            hi_local = int(hi) - int(self.stage_offsets[t])
            frontier = np.arange(base + lo_local * self.branching,
                                 base + (hi_local + 1) * self.branching)
        return np.concatenate(out) if out else np.empty(0, dtype=int)

    def probability(self, node: int) -> float:
        return float(self.branching) ** -(self.stage_of(node) + 1)

    def probabilities(self) -> Array:
        """Per-node weights; each stage sums to one."""
        probs = np.empty(self.n_nodes)
        for t in range(self.horizon + 1):
            probs[self.stage_slice(t)] = float(self.branching) ** -(t + 1)
        return probs

    def validate(self) -> None:
        """Check the structural invariants; raises AssertionError on violation."""
        b, T = self.branching, self.horizon
        for t in range(T + 1):
            assert self.stage_size(t) == b ** (t + 1), f"stage {t} size"
            stage_probs = self.probabilities()[self.stage_slice(t)]
            assert abs(stage_probs.sum() - 1.0) < 1e-9, f"stage {t} weights"
        for t in range(1, T + 1):
            for node in (int(self.stage_offsets[t]), int(self.stage_offsets[t + 1]) - 1):
                parent = self.parent(node)
                assert parent is not None and self.stage_of(parent) == t - 1
                assert node in self.children(parent)
        assert all(self.children(int(n)).size == b for n in self.nodes_at_stage(0))
        assert all(self.children(int(n)).size == 0 for n in self.nodes_at_stage(T))


@dataclass(frozen=True)
class TreeSolution:
    """Node states and controls on a tree, plus the discretized objective value.

    ``controls`` covers the non-leaf blocks only (stages 0..T-1); leaves carry
    no decision.  ``converged`` is None for exact solvers, otherwise the
    gradient solver's termination flag, with the final gradient norm in
    ``grad_norm``.
    """

    tree: ScenarioTree
    states: Array       # (n_nodes, n_x)
    controls: Array     # (n_internal, n_u)
    objective: float
    converged: Optional[bool] = None
    grad_norm: Optional[float] = None


def build_tree(problem: ControlProblem, branching: int, stream: np.random.Generator,
               node_budget: int = DEFAULT_NODE_BUDGET) -> ScenarioTree:
    """Sample a regularly branching tree by stagewise conditional sampling.

    Every stage-t node receives an independent draw from the stage-t noise
    law; with independent stages this is exactly the root-by-root conditional
    sampling procedure.
    """
    if branching < 1:
        raise ValueError(f"branching factor must be >= 1, got {branching}")
    T = problem.dims.horizon
    sizes = [branching ** (t + 1) for t in range(T + 1)]
    total = sum(sizes)
    if total > node_budget:
        raise TreeBudgetError(
            f"tree with branching {branching} and horizon {T} has {total} nodes, "
            f"over the budget of {node_budget}")
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    noise = np.empty((total, problem.dims.noise_dim))
    for t in range(T + 1):
        u = stream.random((sizes[t], problem.dims.noise_dim))
        noise[offsets[t]:offsets[t + 1]] = problem.noise_model.sample_stage(t, u)
    return ScenarioTree(horizon=T, branching=branching, noise=noise, stage_offsets=offsets)


def _propagate_states(problem: ControlProblem, tree: ScenarioTree, controls: Array) -> Array:
    """Roots take their own noise as state; children follow the dynamics."""
    n_x = problem.dims.state_dim
    states = np.empty((tree.n_nodes, n_x))
    states[tree.stage_slice(0)] = tree.noise[tree.stage_slice(0)]
    b = tree.branching
    for t in range(tree.horizon):
        x = states[tree.stage_slice(t)]
        u = controls[tree.stage_slice(t)]
        w_child = tree.noise[tree.stage_slice(t + 1)]
        x_rep = np.repeat(x, b, axis=0)
        u_rep = np.repeat(u, b, axis=0)
        nxt = problem.dynamics(t, x_rep, u_rep, w_child)
        if not np.all(np.isfinite(nxt)):
            raise NonFiniteValueError(f"non-finite state while propagating stage {t + 1}")
        states[tree.stage_slice(t + 1)] = nxt
    return states


def tree_objective(problem: ControlProblem, tree: ScenarioTree,
                   states: Array, controls: Array) -> float:
    """Probability-weighted stage costs plus weighted final costs at the leaves."""
    total = 0.0
    for t in range(tree.horizon):
        sl = tree.stage_slice(t)
        weight = float(tree.branching) ** -(t + 1)
        total += weight * float(np.sum(problem.stage_cost(t, states[sl], controls[sl])))
    leaves = tree.stage_slice(tree.horizon)
    leaf_weight = float(tree.branching) ** -(tree.horizon + 1)
    total += leaf_weight * float(np.sum(problem.final_cost(states[leaves])))
    return total


def solve_tree_lq_analytic(tree: ScenarioTree, epsilon: float) -> TreeSolution:
    """Exact node controls for the scalar linear-quadratic benchmark.

    Requires a tree built for the scalar benchmark (dynamics x + u + w, stage
    cost eps*u^2, final cost x^2).  The optimal control at a node offsets the
    current state by the node's conditional expectation of the remaining
    noise, i.e. the depth-weighted subtree mean m(i) with
    m(i) = (1/b) * sum_children (w_child + m(child)), and divides by
    (T - t + epsilon).
    """
    if tree.noise_dim != 1:
        raise ValueError("analytic tree solution requires scalar state and control")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    T, b = tree.horizon, tree.branching

    # Backward sweep: conditional mean of future noise per node.
    future_mean = np.zeros(tree.n_nodes)
    for t in range(T - 1, -1, -1):
        child_vals = (tree.noise[tree.stage_slice(t + 1), 0]
                      + future_mean[tree.stage_slice(t + 1)])
        future_mean[tree.stage_slice(t)] = child_vals.reshape(-1, b).mean(axis=1)

    # Forward sweep: states via the dynamics, controls via the closed form.
    states = np.empty((tree.n_nodes, 1))
    states[tree.stage_slice(0)] = tree.noise[tree.stage_slice(0)]
    n_internal = int(tree.stage_offsets[T])
    controls = np.empty((n_internal, 1))
    objective = 0.0
    for t in range(T):
        sl = tree.stage_slice(t)
        controls[sl, 0] = -(states[sl, 0] + future_mean[sl]) / (T - t + epsilon)
        states[tree.stage_slice(t + 1), 0] = (np.repeat(states[sl, 0], b)
                                              + np.repeat(controls[sl, 0], b)
                                              + tree.noise[tree.stage_slice(t + 1), 0])
        objective += float(b) ** -(t + 1) * epsilon * float(np.sum(controls[sl, 0] ** 2))
    leaves = tree.stage_slice(T)
    objective += float(b) ** -(T + 1) * float(np.sum(states[leaves, 0] ** 2))
    return TreeSolution(tree=tree, states=states, controls=controls, objective=objective)


def tree_adjoints_and_gradient(problem: ControlProblem, tree: ScenarioTree,
                               states: Array, controls: Array) -> tuple:
    """Backward adjoint recursion on the tree and per-node control gradients.

    Leaf adjoints are the final-cost gradients; interior adjoints add the
    stage-cost state gradient to the child average of dynamics-transposed
    adjoints.  The returned per-node gradient is the gradient of the node's
    cost-to-go (the objective gradient rescaled by 1/probability), matching
    the particle method's per-particle gradient scale.
    """
    T, b = tree.horizon, tree.branching
    n_x, n_u = problem.dims.state_dim, problem.dims.control_dim
    adjoints = np.empty((tree.n_nodes, n_x))
    leaves = tree.stage_slice(T)
    adjoints[leaves] = problem.final_cost_dx(states[leaves])
    n_internal = int(tree.stage_offsets[T])
    grads = np.empty((n_internal, n_u))
    for t in range(T - 1, -1, -1):
        sl = tree.stage_slice(t)
        m = tree.stage_size(t)
        x, u = states[sl], controls[sl]
        w_child = tree.noise[tree.stage_slice(t + 1)].reshape(m, b, -1)
        lam_child = adjoints[tree.stage_slice(t + 1)].reshape(m, b, n_x)
        x_b, u_b = x[:, None, :], u[:, None, :]
        jac_x = problem.dynamics_dx(t, x_b, u_b, w_child)   # (m, b, n_x, n_x)
        jac_u = problem.dynamics_du(t, x_b, u_b, w_child)   # (m, b, n_x, n_u)
        pull_x = np.einsum("mbij,mbi->mbj", jac_x, lam_child).mean(axis=1)
        pull_u = np.einsum("mbij,mbi->mbj", jac_u, lam_child).mean(axis=1)
        adjoints[sl] = problem.stage_cost_dx(t, x, u) + pull_x
        grads[sl] = problem.stage_cost_du(t, x, u) + pull_u
    return adjoints, grads


def solve_tree_gradient(problem: ControlProblem, tree: ScenarioTree,
                        step: float = 0.1, tol: float = 1e-8, max_iter: int = 10000,
                        init_controls: Optional[Array] = None) -> TreeSolution:
    """Gradient descent on the tree-discretized problem with a fixed step.

    Stops when every node's cost-to-go gradient norm falls at or below
    ``tol``; otherwise returns the last iterate flagged non-converged.
    """
    if step <= 0 or tol <= 0 or max_iter < 1:
        raise ValueError("step and tol must be positive, max_iter >= 1")
    n_internal = int(tree.stage_offsets[tree.horizon])
    if init_controls is None:
        controls = np.zeros((n_internal, problem.dims.control_dim))
    else:
        controls = np.array(init_controls, dtype=float).reshape(n_internal, -1)

    grad_norm = np.inf
    converged = False
    for k in range(max_iter):
        states = _propagate_states(problem, tree, controls)
        _, grads = tree_adjoints_and_gradient(problem, tree, states, controls)
        grad_norm = float(np.max(np.linalg.norm(grads, axis=1)))
        if grad_norm <= tol:
            converged = True
            break
        if k < max_iter - 1:  # keep the last evaluated iterate consistent
            controls = controls - step * grads

    objective = tree_objective(problem, tree, states, controls)
    return TreeSolution(tree=tree, states=states, controls=controls,
                        objective=objective, converged=converged, grad_norm=grad_norm)


def tree_policy_pairs(solution: TreeSolution) -> list:
    """Per-stage (states, controls) node samples, ready for policy fitting."""
    tree = solution.tree
    return [(solution.states[tree.stage_slice(t)], solution.controls[tree.stage_slice(t)])
            for t in range(tree.horizon)]


def dump_tree_csv(solution: TreeSolution, path) -> None:
    """One CSV row per node: ``node_id, t, parent_id, pi, w..., x..., u...``."""
    tree = solution.tree
    n_w, n_x = tree.noise_dim, solution.states.shape[1]
    n_u = solution.controls.shape[1]
    header = (["node_id", "t", "parent_id", "pi"]
              + [f"w_{k}" for k in range(n_w)]
              + [f"x_{k}" for k in range(n_x)]
              + [f"u_{k}" for k in range(n_u)])
    lines = [",".join(header)]
    n_internal = solution.controls.shape[0]
    for node in range(tree.n_nodes):
        t = tree.stage_of(node)
        parent = tree.parent(node)
        fields = [str(node), str(t), "" if parent is None else str(parent),
                  f"{tree.probability(node):.17g}"]
        fields += [f"{v:.17g}" for v in tree.noise[node]]
        fields += [f"{v:.17g}" for v in solution.states[node]]
        if node < n_internal:
            fields += [f"{v:.17g}" for v in solution.controls[node]]
        else:
            fields += [""] * n_u
        lines.append(",".join(fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

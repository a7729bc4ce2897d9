"""Problem definitions, noise models and reproducible random streams.

A control problem couples a state dynamics ``f_t(x, u, w)`` with stage costs
``C_t(x, u)`` and a final cost ``V(x)``.  All callables are vectorized over a
leading batch axis: states are ``(..., n_x)`` arrays, controls ``(..., n_u)``,
noises ``(..., n_w)``.  Derivative callables return Jacobians with the matrix
axes last, e.g. ``(..., n_x, n_u)`` for the control Jacobian of the dynamics.

Noise is specified in inverse-CDF form: each stage owns a map from uniform
variates on ``[0, 1]^{n_w}`` to the stage's noise law.  The same model then
serves pseudo-random sampling (uniforms from a Generator) and quasi-random
sampling (uniforms from a low-discrepancy sequence).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

#: Vectorized dynamics: (t, x, u, w) -> next state.
DynamicsFn = Callable[[int, Array, Array, Array], Array]
#: Vectorized stage cost: (t, x, u) -> scalar batch.
StageCostFn = Callable[[int, Array, Array], Array]


class NonFiniteValueError(RuntimeError):
    """A dynamics, cost or adjoint evaluation produced NaN or infinity."""


@dataclass(frozen=True)
class Dimensions:
    """Horizon and space dimensions of a problem instance.

    ``horizon`` is the number of decision stages: controls exist for
    t = 0..horizon-1, states and noises for t = 0..horizon.
    """

    horizon: int
    state_dim: int
    control_dim: int
    noise_dim: int

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        for name in ("state_dim", "control_dim", "noise_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class NoiseModel:
    """Per-stage noise samplers in inverse-CDF form.

    ``transforms[t]`` maps uniforms of shape ``(..., dim)`` to stage-t noise
    of the same shape.  Stages are mutually independent by construction: each
    stage owns its own transform and consumes its own uniforms.  ``support``
    gives per-stage (lower, upper) bounds of the noise law, used for probe
    generation and sanity checks.
    """

    dim: int
    transforms: tuple
    support: tuple

    def __post_init__(self):
        if len(self.transforms) != len(self.support):
            raise ValueError("one transform and one support box per stage required")

    @property
    def n_stages(self) -> int:
        return len(self.transforms)

    def sample_stage(self, t: int, uniforms: Array) -> Array:
        """Map uniform variates on [0,1]^dim to stage-t noise."""
        u = np.asarray(uniforms, dtype=float)
        if u.shape[-1] != self.dim:
            raise ValueError(f"expected last axis {self.dim}, got {u.shape}")
        return self.transforms[t](u)

    @staticmethod
    def iid_uniform(dim: int, n_stages: int, low: float = -1.0, high: float = 1.0) -> "NoiseModel":
        """I.i.d. uniform noise on a box, identical at every stage."""
        span = high - low

        def transform(u: Array) -> Array:
            return low + span * u

        lo = np.full(dim, low)
        hi = np.full(dim, high)
        return NoiseModel(
            dim=dim,
            transforms=tuple(transform for _ in range(n_stages)),
            support=tuple((lo, hi) for _ in range(n_stages)),
        )


@dataclass(frozen=True)
class ControlProblem:
    """A finite-horizon stochastic control problem with user-supplied derivatives.

    The initial state is the stage-0 noise, so ``state_dim == noise_dim`` is
    required.  Derivatives are supplied, not derived; ``check_derivatives``
    validates them against central finite differences.
    """

    dims: Dimensions
    dynamics: DynamicsFn
    stage_cost: StageCostFn
    final_cost: Callable[[Array], Array]
    dynamics_dx: DynamicsFn          # (t,x,u,w) -> (..., n_x, n_x)
    dynamics_du: DynamicsFn          # (t,x,u,w) -> (..., n_x, n_u)
    stage_cost_dx: StageCostFn       # (t,x,u)   -> (..., n_x)
    stage_cost_du: StageCostFn       # (t,x,u)   -> (..., n_u)
    final_cost_dx: Callable[[Array], Array]  # (x) -> (..., n_x)
    noise_model: NoiseModel

    def __post_init__(self):
        if self.dims.state_dim != self.dims.noise_dim:
            raise ValueError(
                "initial state equals the stage-0 noise, so state_dim must "
                f"equal noise_dim (got {self.dims.state_dim} != {self.dims.noise_dim})"
            )
        if self.noise_model.n_stages != self.dims.horizon + 1:
            raise ValueError(
                f"noise model must cover stages 0..{self.dims.horizon}, "
                f"got {self.noise_model.n_stages} stages"
            )

    def trajectory_cost(self, states: Array, controls: Array) -> Array:
        """Total cost of trajectories: states (..., T+1, n_x), controls (..., T, n_u)."""
        total = self.final_cost(states[..., -1, :])
        for t in range(self.dims.horizon):
            total = total + self.stage_cost(t, states[..., t, :], controls[..., t, :])
        return total


@dataclass(frozen=True)
class ScenarioBatch:
    """N noise scenarios, each a (T+1, n_w) matrix with row t holding w_t."""

    values: Array  # (N, T+1, n_w)

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"expected (N, T+1, n_w) array, got shape {self.values.shape}")

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def n_stages(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SeedPlan:
    """Splittable seed derivation from a single master seed.

    Child streams are keyed by a purpose tag and a replication index.  The tag
    is hashed with SHA-256 (stable across processes and runs, unlike ``hash``)
    into the spawn key of a ``SeedSequence``, so distinct (purpose, r) pairs
    yield independent, order-independent streams.
    """

    master_seed: int

    def seed_sequence(self, purpose: str, replication: int = 0) -> np.random.SeedSequence:
        if replication < 0:
            raise ValueError("replication index must be >= 0")
        digest = hashlib.sha256(purpose.encode("utf-8")).digest()
        tag = int.from_bytes(digest[:4], "little")
        return np.random.SeedSequence(self.master_seed, spawn_key=(tag, replication))

    def stream(self, purpose: str, replication: int = 0) -> np.random.Generator:
        """Independent Generator for the given (purpose, replication) pair."""
        return np.random.default_rng(self.seed_sequence(purpose, replication))


def sample_scenarios(problem: ControlProblem, n_scenarios: int,
                     stream: np.random.Generator) -> ScenarioBatch:
    """Draw independent full-horizon noise scenarios from the problem's noise model."""
    if n_scenarios < 1:
        raise ValueError(f"n_scenarios must be >= 1, got {n_scenarios}")
    T = problem.dims.horizon
    n_w = problem.dims.noise_dim
    uniforms = stream.random((n_scenarios, T + 1, n_w))
    values = np.empty_like(uniforms)
    for t in range(T + 1):
        values[:, t, :] = problem.noise_model.sample_stage(t, uniforms[:, t, :])
    return ScenarioBatch(values=values)


@dataclass
class DerivativeReport:
    """Max deviation between analytic derivatives and central differences."""

    max_abs: dict = field(default_factory=dict)        # map name -> max |analytic - fd|
    max_rel: dict = field(default_factory=dict)        # normalized by 1 + |analytic|
    non_finite: list = field(default_factory=list)     # (map name, probe index)

    @property
    def worst_rel(self) -> float:
        return max(self.max_rel.values()) if self.max_rel else 0.0

    def ok(self, tol: float = 1e-3) -> bool:
        return not self.non_finite and self.worst_rel <= tol


def _central_diff(fn, point: Array, h: float) -> Array:
    """Columnwise central difference of fn w.r.t. its array argument."""
    cols = []
    for k in range(point.shape[-1]):
        step = np.zeros_like(point)
        step[..., k] = h
        cols.append((fn(point + step) - fn(point - step)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def check_derivatives(problem: ControlProblem,
                      probe_points: Sequence[tuple],
                      h: float = 1e-4) -> DerivativeReport:
    """Compare supplied derivative maps with central finite differences.

    ``probe_points`` is a sequence of (t, x, u, w) tuples.  For each of the
    five derivative maps the report records the max absolute and relative
    deviation over all probes; non-finite function values are flagged rather
    than raised.
    """
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    report = DerivativeReport()

    def record(name: str, analytic: Array, approx: Array, idx: int):
        analytic = np.asarray(analytic, dtype=float)
        approx = np.asarray(approx, dtype=float)
        if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(approx))):
            report.non_finite.append((name, idx))
            return
        dev = np.abs(analytic - approx)
        rel = dev / (1.0 + np.abs(analytic))
        report.max_abs[name] = max(report.max_abs.get(name, 0.0), float(dev.max()))
        report.max_rel[name] = max(report.max_rel.get(name, 0.0), float(rel.max()))

    for idx, (t, x, u, w) in enumerate(probe_points):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float)
        record("dynamics_dx", problem.dynamics_dx(t, x, u, w),
               _central_diff(lambda p: problem.dynamics(t, p, u, w), x, h), idx)
        record("dynamics_du", problem.dynamics_du(t, x, u, w),
               _central_diff(lambda p: problem.dynamics(t, x, p, w), u, h), idx)
        record("stage_cost_dx", problem.stage_cost_dx(t, x, u),
               _central_diff(lambda p: problem.stage_cost(t, p, u), x, h), idx)
        record("stage_cost_du", problem.stage_cost_du(t, x, u),
               _central_diff(lambda p: problem.stage_cost(t, x, p), u, h), idx)
        record("final_cost_dx", problem.final_cost_dx(x),
               _central_diff(problem.final_cost, x, h), idx)
    return report

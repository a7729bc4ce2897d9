"""Feedback policies and nearest-neighbor (Voronoi) regression.

A feedback policy maps (stage, state) to a control.  The shipped regressor is
piecewise-constant nearest-neighbor interpolation: a query returns the value
attached to the closest center in Euclidean norm, ties broken by the lowest
center index.  Queries are vectorized; fast paths (a sorted scan in 1-D, a
k-d tree above) are bit-equivalent to the exhaustive distance scan, which is
kept as the reference implementation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

Array = np.ndarray

# Below this many center*query products the exhaustive scan is used directly.
_EXHAUSTIVE_BUDGET = 1 << 21


def _squared_distances(centers: Array, queries: Array) -> Array:
    """(Q, M) matrix of squared Euclidean distances, the reference arithmetic."""
    diff = queries[:, None, :] - centers[None, :, :]
    return np.einsum("qmd,qmd->qm", diff, diff)


def nearest_center_indices_exhaustive(centers: Array, queries: Array) -> Array:
    """Reference nearest-center search: full distance scan, first-index ties."""
    out = np.empty(queries.shape[0], dtype=np.intp)
    # Chunk queries so the (chunk, M) distance block stays small.
    chunk = max(1, _EXHAUSTIVE_BUDGET // max(1, centers.shape[0]))
    for start in range(0, queries.shape[0], chunk):
        block = queries[start:start + chunk]
        out[start:start + chunk] = np.argmin(_squared_distances(centers, block), axis=1)
    return out


def _lex_min(d2: Array, idx: Array) -> Array:
    """Columnwise argmin of (distance, index) pairs; d2 and idx are (Q, K)."""
    best = np.argmin(d2, axis=1)
    rows = np.arange(d2.shape[0])
    best_d = d2[rows, best]
    best_i = idx[rows, best]
    # Re-scan for exact distance ties with a lower center index.
    for k in range(d2.shape[1]):
        tie = (d2[:, k] == best_d) & (idx[:, k] < best_i)
        best_i = np.where(tie, idx[:, k], best_i)
    return best_i


def _nearest_1d(centers: Array, queries: Array) -> Array:
    """Sorted-boundary search in one dimension, bit-equivalent to the scan.

    Duplicate center values are collapsed to the representative with the
    lowest original index (the exhaustive winner among duplicates).  The
    searchsorted candidate and both neighbors are re-ranked with the reference
    squared-distance arithmetic, so midpoint rounding cannot flip the result.
    """
    c = centers[:, 0]
    q = queries[:, 0]
    uniq, inverse = np.unique(c, return_inverse=True)
    rep = np.full(uniq.shape[0], np.iinfo(np.intp).max, dtype=np.intp)
    np.minimum.at(rep, inverse, np.arange(c.shape[0], dtype=np.intp))
    if uniq.shape[0] == 1:
        return np.full(q.shape[0], rep[0], dtype=np.intp)

    mids = 0.5 * (uniq[:-1] + uniq[1:])
    pos = np.searchsorted(mids, q)
    cand = np.stack([np.clip(pos - 1, 0, uniq.shape[0] - 1),
                     np.clip(pos, 0, uniq.shape[0] - 1),
                     np.clip(pos + 1, 0, uniq.shape[0] - 1)], axis=1)
    d2 = (q[:, None] - uniq[cand]) ** 2
    return _lex_min(d2, rep[cand])


def _nearest_kd(centers: Array, queries: Array, tree: cKDTree) -> Array:
    """k-d tree search re-ranked with the reference arithmetic.

    The top-2 tree candidates are compared using the same squared-distance
    formula as the exhaustive scan; queries with an exact distance tie fall
    back to the full scan so the lowest-index rule holds even for duplicated
    centers.
    """
    _, idx = tree.query(queries, k=2, workers=-1)
    diff = queries[:, None, :] - centers[idx]
    d2 = np.einsum("qkd,qkd->qk", diff, diff)
    swap = (d2[:, 1] < d2[:, 0]) | ((d2[:, 1] == d2[:, 0]) & (idx[:, 1] < idx[:, 0]))
    best = np.where(swap, idx[:, 1], idx[:, 0])
    tie = d2[:, 0] == d2[:, 1]
    if np.any(tie):
        best[tie] = nearest_center_indices_exhaustive(centers, queries[tie])
    return best


class NearestNeighborRegressor:
    """Piecewise-constant regression over a fixed set of (center, value) pairs."""

    def __init__(self, centers: Array, values: Array):
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if centers.shape[0] != values.shape[0]:
            raise ValueError("one value row per center required")
        if centers.shape[0] < 1:
            raise ValueError("at least one center required")
        self.centers = centers
        self.values = values
        self._kdtree: Optional[cKDTree] = None

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    def nearest_indices(self, queries: Array) -> Array:
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        if queries.shape[1] != self.centers.shape[1]:
            raise ValueError(
                f"query dim {queries.shape[1]} != center dim {self.centers.shape[1]}")
        m, q = self.centers.shape[0], queries.shape[0]
        if m == 1:
            return np.zeros(q, dtype=np.intp)
        if self.centers.shape[1] == 1:
            return _nearest_1d(self.centers, queries)
        if m * q <= _EXHAUSTIVE_BUDGET:
            return nearest_center_indices_exhaustive(self.centers, queries)
        if self._kdtree is None:
            self._kdtree = cKDTree(self.centers)
        return _nearest_kd(self.centers, queries, self._kdtree)

    def predict(self, queries: Array) -> Array:
        """Values of the nearest centers; shape (Q, value_dim)."""
        return self.values[self.nearest_indices(np.atleast_2d(queries))]


#: A regressor factory: (centers, values) -> object with .predict(queries).
RegressorFactory = Callable[[Array, Array], NearestNeighborRegressor]


class FeedbackPolicy:
    """Per-stage map from state to control, for stages 0..T-1.

    Concrete policies are nearest-neighbor tables or closed forms; both are
    total functions of the state (nearest-neighbor extends constantly outside
    the convex hull of its centers).
    """

    kind: str = "abstract"

    @property
    def horizon(self) -> int:
        raise NotImplementedError

    @property
    def support_sizes(self) -> Optional[list]:
        """Number of stored centers per stage; None for closed forms."""
        return None

    def evaluate(self, t: int, x: Array) -> Array:
        """Control at stage t for states x of shape (n_x,) or (P, n_x)."""
        raise NotImplementedError

    def _check_stage(self, t: int):
        if not 0 <= t < self.horizon:
            raise ValueError(f"stage {t} outside 0..{self.horizon - 1}")


class NearestNeighborPolicy(FeedbackPolicy):
    """Voronoi piecewise-constant policy built from per-stage sample pairs."""

    kind = "nearest-neighbor"

    def __init__(self, regressors: Sequence[NearestNeighborRegressor]):
        if not regressors:
            raise ValueError("at least one stage required")
        self._regressors = list(regressors)

    @property
    def horizon(self) -> int:
        return len(self._regressors)

    @property
    def support_sizes(self) -> list:
        return [r.size for r in self._regressors]

    def stage_table(self, t: int) -> tuple:
        """(centers, values) arrays backing stage t."""
        self._check_stage(t)
        r = self._regressors[t]
        return r.centers, r.values

    def evaluate(self, t: int, x: Array) -> Array:
        self._check_stage(t)
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        out = self._regressors[t].predict(np.atleast_2d(x))
        return out[0] if single else out


class ClosedFormPolicy(FeedbackPolicy):
    """Policy given by an explicit formula (t, states) -> controls."""

    kind = "closed-form"

    def __init__(self, horizon: int, fn: Callable[[int, Array], Array]):
        self._horizon = horizon
        self._fn = fn

    @property
    def horizon(self) -> int:
        return self._horizon

    def evaluate(self, t: int, x: Array) -> Array:
        self._check_stage(t)
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        out = self._fn(t, np.atleast_2d(x))
        return out[0] if single else out


def fit_nearest_neighbor(pairs: Sequence[tuple]) -> NearestNeighborPolicy:
    """Build a Voronoi policy from per-stage (states, controls) sample pairs.

    ``pairs[t]`` holds the stage-t centers and their control values; every
    stage needs at least one pair.
    """
    regressors = []
    for t, (states, controls) in enumerate(pairs):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        controls = np.asarray(controls, dtype=float)
        if controls.ndim == 1:
            controls = controls[:, None]
        if states.shape[0] < 1:
            raise ValueError(f"stage {t} has no sample pairs")
        regressors.append(NearestNeighborRegressor(states, controls))
    return NearestNeighborPolicy(regressors)


def eval_policy(policy: FeedbackPolicy, t: int, x: Array) -> Array:
    """Evaluate a policy, rejecting non-finite query states."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("policy queried at a non-finite state")
    return policy.evaluate(t, x)


def mean_policy(policies: Sequence[FeedbackPolicy], eval_points: Sequence[Array]) -> list:
    """Pointwise average of several policies at fixed per-stage evaluation points.

    Returns one (P_t, n_u) array per stage: the empirical mean strategy that
    enters the bias term of the MSE decomposition.
    """
    if not policies:
        raise ValueError("at least one policy required")
    horizon = policies[0].horizon
    if any(p.horizon != horizon for p in policies):
        raise ValueError("all policies must share the same horizon")
    out = []
    for t in range(horizon):
        points = np.atleast_2d(np.asarray(eval_points[t], dtype=float))
        acc = np.zeros((points.shape[0], np.atleast_1d(policies[0].evaluate(t, points[0])).shape[-1]))
        for p in policies:
            acc += p.evaluate(t, points)
        out.append(acc / len(policies))
    return out


def dump_policy_csv(policy: NearestNeighborPolicy, path) -> None:
    """Write the per-stage (center, value) tables as CSV rows ``t, center..., value...``."""
    centers0, values0 = policy.stage_table(0)
    n_x, n_u = centers0.shape[1], values0.shape[1]
    header = ["t"] + [f"center_{k}" for k in range(n_x)] + [f"value_{k}" for k in range(n_u)]
    lines = [",".join(header)]
    for t in range(policy.horizon):
        centers, values = policy.stage_table(t)
        for c, v in zip(centers, values):
            fields = [str(t)] + [f"{x:.17g}" for x in c] + [f"{x:.17g}" for x in v]
            lines.append(",".join(fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

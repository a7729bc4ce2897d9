"""Strategy error measurement: MSE decomposition, QMC evaluation, rate fits.

The mean squared strategy error integrates, per stage, the squared distance
between an approximate feedback and the optimal one under the optimal-state
density, then averages over independent replications of the approximation.
The state integral is computed from points propagated through the optimal
closed loop from low-discrepancy (or pseudo-random) noise draws; the
replication average decomposes the error into squared bias plus variance.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .core import ControlProblem, sample_scenarios
from .regression import FeedbackPolicy

Array = np.ndarray

#: Builds the replication-r approximate policy; None marks a failed (excluded) run.
PolicyBuilder = Callable[[int], Optional[FeedbackPolicy]]


@dataclass(frozen=True)
class EvalPointSet:
    """Per-stage state points distributed as the optimal-state density.

    ``points[t]`` holds P states for stage t, obtained by mapping uniform
    points through the per-stage inverse-CDF noise maps and the optimal
    closed loop.  ``mode`` records the uniform source: scrambled Halton
    ("qmc") or a pseudo-random stream ("pseudo").
    """

    points: Array  # (T, P, n_x)
    mode: str

    @property
    def count(self) -> int:
        return self.points.shape[1]

    @property
    def horizon(self) -> int:
        return self.points.shape[0]


@dataclass
class MseReport:
    """Per-stage squared bias, variance and their sum over R replications."""

    method: str
    param_name: str
    param_value: int
    squared_bias: Array      # (T,)
    variance: Array          # (T,)
    mse: Array               # (T,), always squared_bias + variance
    mse_direct: Array        # (T,), pointwise-accumulated MSE for identity checks
    replications: int        # requested R
    points: int
    excluded: int
    master_seed: int

    @property
    def effective_replications(self) -> int:
        return self.replications - self.excluded


@dataclass(frozen=True)
class RateFit:
    """Least-squares slope of log(error) against log(size)."""

    sizes: Array
    errors: Array
    slope: float
    intercept: float
    residual: float


def gen_eval_points(problem: ControlProblem, optimal_policy: FeedbackPolicy,
                    n_points: int, mode: str,
                    stream: np.random.Generator) -> EvalPointSet:
    """Sample the optimal-state density by closed-loop propagation.

    Uniform points on the unit hypercube (one block of coordinates per stage)
    are pushed through the noise maps and then through the dynamics under the
    optimal policy; the visited states at stages 0..T-1 are the evaluation
    points.  QMC mode uses a Halton sequence with stream-seeded scrambling,
    so the point set is reproducible from the seed plan alone.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if mode not in ("qmc", "pseudo"):
        raise ValueError(f"unknown mode {mode!r}")
    T = problem.dims.horizon
    n_w = problem.dims.noise_dim
    dim = T * n_w  # stages 0..T-1 feed the states where policies act
    if mode == "qmc":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # qmc engines warn on unbalanced sizes
            sampler = qmc.Halton(d=dim, scramble=True, seed=stream)
            uniforms = sampler.random(n_points)
    else:
        uniforms = stream.random((n_points, dim))
    uniforms = uniforms.reshape(n_points, T, n_w)

    states = np.empty((T, n_points, problem.dims.state_dim))
    states[0] = problem.noise_model.sample_stage(0, uniforms[:, 0, :])
    for t in range(T - 1):
        w_next = problem.noise_model.sample_stage(t + 1, uniforms[:, t + 1, :])
        u = optimal_policy.evaluate(t, states[t])
        states[t + 1] = problem.dynamics(t, states[t], u, w_next)
    return EvalPointSet(points=states, mode=mode)


def _policy_deviations(make_policy: PolicyBuilder, points: Array,
                       optimal_values: Array, r: int) -> Optional[Array]:
    """Deviation of replica r from the optimal policy at the evaluation points."""
    policy = make_policy(r)
    if policy is None:
        return None
    T, P, _ = points.shape
    out = np.empty_like(optimal_values)
    for t in range(T):
        out[t] = policy.evaluate(t, points[t]) - optimal_values[t]
    return out


def mse_evaluate(make_policy: PolicyBuilder, optimal_policy: FeedbackPolicy,
                 points: EvalPointSet, replications: int,
                 method: str = "unknown", param_name: str = "N", param_value: int = 0,
                 master_seed: int = 0, n_jobs: int = 1) -> MseReport:
    """Replicate a policy-producing procedure and decompose its strategy error.

    For every stage and evaluation point the replica controls are accumulated
    around the optimal control, giving squared bias (distance of the replica
    mean from the optimum), variance (mean squared spread around the replica
    mean, 1/R normalized so the decomposition is an identity) and their sum.
    Replicas whose builder returns None are excluded and counted.  With
    ``n_jobs`` > 1 replicas run in separate processes; results are reduced in
    replication order, so the outcome is schedule-independent.
    """
    if replications < 2:
        raise ValueError("variance estimation needs at least 2 replications")
    T, P = points.horizon, points.count
    pts = points.points
    n_u = np.atleast_2d(optimal_policy.evaluate(0, pts[0])).shape[-1]
    optimal_values = np.empty((T, P, n_u))
    for t in range(T):
        optimal_values[t] = optimal_policy.evaluate(t, pts[t])

    sum_dev = np.zeros_like(optimal_values)     # sum of (replica - optimal)
    sum_sq = np.zeros((T, P))                   # sum of ||replica - optimal||^2
    excluded = 0

    job = partial(_policy_deviations, make_policy, pts, optimal_values)
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = pool.map(job, range(replications), chunksize=1)
            for dev in results:
                if dev is None:
                    excluded += 1
                    continue
                sum_dev += dev
                sum_sq += np.sum(dev * dev, axis=-1)
    else:
        for r in range(replications):
            dev = job(r)
            if dev is None:
                excluded += 1
                continue
            sum_dev += dev
            sum_sq += np.sum(dev * dev, axis=-1)

    r_eff = replications - excluded
    if r_eff < 2:
        raise RuntimeError(
            f"only {r_eff} of {replications} replications usable; variance undefined")
    mean_dev = sum_dev / r_eff
    bias_sq_pts = np.sum(mean_dev * mean_dev, axis=-1)          # (T, P)
    mse_pts = sum_sq / r_eff                                    # (T, P)
    var_pts = np.maximum(mse_pts - bias_sq_pts, 0.0)
    squared_bias = bias_sq_pts.mean(axis=1)
    variance = var_pts.mean(axis=1)
    return MseReport(
        method=method, param_name=param_name, param_value=param_value,
        squared_bias=squared_bias, variance=variance,
        mse=squared_bias + variance, mse_direct=mse_pts.mean(axis=1),
        replications=replications, points=P, excluded=excluded,
        master_seed=master_seed)


def simulation_indicator(policy: FeedbackPolicy, optimal_policy: FeedbackPolicy,
                         problem: ControlProblem, n_scenarios: int,
                         stream: np.random.Generator) -> float:
    """Closed-loop control discrepancy on fresh scenarios.

    Both policies are simulated through their own closed loops on the same
    noise draws; the result is the mean, over scenarios and stages, of the
    squared distance between the two controls.
    """
    if n_scenarios < 1:
        raise ValueError("n_scenarios must be >= 1")
    batch = sample_scenarios(problem, n_scenarios, stream)
    w = batch.values
    T = problem.dims.horizon
    x_pol = w[:, 0, :].copy()
    x_opt = w[:, 0, :].copy()
    total = 0.0
    for t in range(T):
        u_pol = policy.evaluate(t, x_pol)
        u_opt = optimal_policy.evaluate(t, x_opt)
        total += float(np.sum((u_pol - u_opt) ** 2))
        x_pol = problem.dynamics(t, x_pol, u_pol, w[:, t + 1, :])
        x_opt = problem.dynamics(t, x_opt, u_opt, w[:, t + 1, :])
    return total / (n_scenarios * T)


def fit_rate(sizes: Sequence[float], errors: Sequence[float]) -> RateFit:
    """Ordinary least squares of log error on log size; the slope is the rate."""
    sizes = np.asarray(sizes, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if sizes.size != errors.size or sizes.size < 3:
        raise ValueError("need at least 3 (size, error) pairs")
    if np.any(sizes <= 0) or np.any(errors <= 0):
        raise ValueError("sizes and errors must be strictly positive")
    log_s, log_e = np.log(sizes), np.log(errors)
    slope, intercept = np.polyfit(log_s, log_e, 1)
    resid = log_e - (slope * log_s + intercept)
    return RateFit(sizes=sizes, errors=errors, slope=float(slope),
                   intercept=float(intercept),
                   residual=float(np.sqrt(np.mean(resid**2))))


CSV_COLUMNS = ["method", "param_name", "param_value", "t", "bias_sq",
               "variance", "mse", "R", "P", "excluded", "seed"]


def mse_csv_rows(report: MseReport) -> list:
    """Per-stage CSV rows for one report, in stage order."""
    rows = []
    for t in range(report.squared_bias.size):
        rows.append([
            report.method, report.param_name, str(report.param_value), str(t),
            f"{report.squared_bias[t]:.17g}", f"{report.variance[t]:.17g}",
            f"{report.mse[t]:.17g}", str(report.replications), str(report.points),
            str(report.excluded), str(report.master_seed),
        ])
    return rows


def write_mse_csv(reports: Sequence[MseReport], path, config_echo: dict) -> None:
    """Write reports as CSV with a commented header block echoing the config."""
    lines = [f"# {key} = {value}" for key, value in sorted(config_echo.items())]
    lines.append(",".join(CSV_COLUMNS))
    all_rows = [row for report in reports for row in mse_csv_rows(report)]
    all_rows.sort(key=lambda row: (row[0], int(row[2]), int(row[3])))
    lines.extend(",".join(row) for row in all_rows)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

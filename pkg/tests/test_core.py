"""Problem construction, noise sampling, seed plan and derivative checks."""

import numpy as np
import pytest

from socbench.benchmarks import LqBenchmark, lq_problem
from socbench.core import (ControlProblem, Dimensions, NoiseModel, SeedPlan,
                           check_derivatives, sample_scenarios)


@pytest.fixture(scope="module")
def lq():
    return lq_problem(LqBenchmark(horizon=4, epsilon=1.0, dim=1))


class TestDimensions:
    def test_valid(self):
        dims = Dimensions(horizon=4, state_dim=1, control_dim=1, noise_dim=1)
        assert dims.horizon == 4

    @pytest.mark.parametrize("field,value", [
        ("horizon", 0), ("state_dim", 0), ("control_dim", -1), ("noise_dim", 0)])
    def test_rejects_nonpositive(self, field, value):
        kwargs = dict(horizon=4, state_dim=1, control_dim=1, noise_dim=1)
        kwargs[field] = value
        with pytest.raises(ValueError):
            Dimensions(**kwargs)


class TestNoiseModel:
    def test_uniform_transform_is_affine(self):
        model = NoiseModel.iid_uniform(2, n_stages=5)
        u = np.array([[0.0, 0.5], [1.0, 0.25]])
        out = model.sample_stage(3, u)
        np.testing.assert_allclose(out, 2.0 * u - 1.0)

    def test_stage_count_mismatch_rejected(self):
        model = NoiseModel.iid_uniform(1, n_stages=3)
        bench = lq_problem(LqBenchmark(horizon=4))
        with pytest.raises(ValueError):
            ControlProblem(**{**bench.__dict__, "noise_model": model})


class TestSampleScenarios:
    def test_single_scenario_support(self, lq):
        batch = sample_scenarios(lq, 1, SeedPlan(3).stream("s"))
        assert batch.values.shape == (1, 5, 1)
        assert np.all(batch.values >= -1.0) and np.all(batch.values <= 1.0)

    def test_large_batch_stage_means_near_zero(self, lq):
        # sd of the mean of 1e4 uniform[-1,1] draws is ~0.0058
        batch = sample_scenarios(lq, 10**4, SeedPlan(5).stream("s"))
        means = batch.values.mean(axis=0)
        assert np.all(np.abs(means) < 0.02)

    def test_same_seed_bit_identical(self, lq):
        a = sample_scenarios(lq, 64, SeedPlan(11).stream("s"))
        b = sample_scenarios(lq, 64, SeedPlan(11).stream("s"))
        assert np.array_equal(a.values, b.values)

    def test_cross_stage_correlation_small(self, lq):
        batch = sample_scenarios(lq, 10**4, SeedPlan(17).stream("s"))
        flat = batch.values[:, :, 0]
        corr = np.corrcoef(flat.T)
        off_diag = corr[~np.eye(5, dtype=bool)]
        assert np.all(np.abs(off_diag) < 0.05)

    def test_rejects_empty_batch(self, lq):
        with pytest.raises(ValueError):
            sample_scenarios(lq, 0, SeedPlan(1).stream("s"))


class TestSeedPlan:
    def test_streams_distinct_across_purposes_and_replications(self):
        plan = SeedPlan(123)
        draws = {
            ("a", 0): plan.stream("a", 0).random(4),
            ("a", 1): plan.stream("a", 1).random(4),
            ("b", 0): plan.stream("b", 0).random(4),
        }
        keys = list(draws)
        for i in range(len(keys)):
            for j in range(i + 1, len(keys)):
                assert not np.array_equal(draws[keys[i]], draws[keys[j]])

    def test_reproducible_from_master_seed(self):
        a = SeedPlan(99).stream("tag", 7).random(8)
        b = SeedPlan(99).stream("tag", 7).random(8)
        np.testing.assert_array_equal(a, b)

    def test_order_independent(self):
        plan = SeedPlan(42)
        late = plan.stream("x", 5).random(3)
        plan2 = SeedPlan(42)
        _ = plan2.stream("x", 0).random(3)
        again = plan2.stream("x", 5).random(3)
        np.testing.assert_array_equal(late, again)


class TestCheckDerivatives:
    def probes(self, n=10, seed=0, dim=1):
        rng = np.random.default_rng(seed)
        return [(int(rng.integers(0, 4)), rng.uniform(-2, 2, dim),
                 rng.uniform(-2, 2, dim), rng.uniform(-1, 1, dim)) for _ in range(n)]

    def test_lq_derivatives_near_exact(self, lq):
        report = check_derivatives(lq, self.probes(), h=1e-4)
        assert not report.non_finite
        assert report.worst_rel <= 1e-6
        assert max(report.max_abs.values()) <= 1e-6

    def test_detects_wrong_derivative(self, lq):
        broken = ControlProblem(**{
            **lq.__dict__,
            "stage_cost_du": lambda t, x, u: 4.0 * u + np.zeros_like(x)})
        report = check_derivatives(broken, self.probes(), h=1e-4)
        # deviation is |4u - 2u| = |2u|, of the size of the correct derivative
        assert report.max_abs["stage_cost_du"] > 0.1
        assert report.max_abs["dynamics_dx"] <= 1e-6

    def test_zero_point_gradient_exact(self, lq):
        report = check_derivatives(lq, [(0, np.zeros(1), np.zeros(1), np.zeros(1))])
        analytic = lq.stage_cost_du(0, np.zeros(1), np.zeros(1))
        assert np.all(analytic == 0.0)
        assert report.max_abs["stage_cost_du"] <= 1e-10

    def test_flags_non_finite(self, lq):
        bad = ControlProblem(**{
            **lq.__dict__,
            "final_cost": lambda x: np.where(np.sum(x, axis=-1) > 1.5, np.nan,
                                             np.sum(x * x, axis=-1))})
        report = check_derivatives(bad, [(0, np.array([1.5]), np.zeros(1), np.zeros(1))])
        assert ("final_cost_dx", 0) in report.non_finite

    def test_requires_positive_step(self, lq):
        with pytest.raises(ValueError):
            check_derivatives(lq, self.probes(2), h=0.0)


def test_problem_requires_matching_state_and_noise_dims():
    base = lq_problem(LqBenchmark(horizon=2, dim=1))
    with pytest.raises(ValueError):
        ControlProblem(**{**base.__dict__,
                          "dims": Dimensions(horizon=2, state_dim=2,
                                             control_dim=1, noise_dim=1)})

"""Nearest-neighbor policies: Voronoi semantics, tie rules, fast-path equivalence."""

import numpy as np
import pytest

from socbench.regression import (ClosedFormPolicy, NearestNeighborRegressor,
                                 eval_policy, fit_nearest_neighbor, mean_policy,
                                 nearest_center_indices_exhaustive)


class TestNearestNeighborBasics:
    def test_two_centers_pick_closer(self):
        policy = fit_nearest_neighbor([(np.array([[-1.0], [1.0]]),
                                        np.array([[10.0], [20.0]]))])
        assert eval_policy(policy, 0, np.array([0.2]))[0] == 20.0
        assert eval_policy(policy, 0, np.array([-0.2]))[0] == 10.0

    def test_single_center_covers_everything(self):
        policy = fit_nearest_neighbor([(np.array([[3.0]]), np.array([[7.0]]))])
        for x in (-100.0, 0.0, 3.0, 1e6):
            assert eval_policy(policy, 0, np.array([x]))[0] == 7.0

    def test_tie_breaks_to_lowest_index(self):
        policy = fit_nearest_neighbor([(np.array([[-1.0], [1.0]]),
                                        np.array([[10.0], [20.0]]))])
        assert eval_policy(policy, 0, np.array([0.0]))[0] == 10.0
        # permuted storage: the tie now favors the other value
        permuted = fit_nearest_neighbor([(np.array([[1.0], [-1.0]]),
                                          np.array([[20.0], [10.0]]))])
        assert eval_policy(permuted, 0, np.array([0.0]))[0] == 20.0

    def test_duplicate_centers_resolve_to_first(self):
        policy = fit_nearest_neighbor([(np.array([[2.0], [2.0], [5.0]]),
                                        np.array([[1.0], [2.0], [3.0]]))])
        assert eval_policy(policy, 0, np.array([2.0]))[0] == 1.0

    def test_query_at_stored_center_returns_its_value(self):
        rng = np.random.default_rng(0)
        centers = rng.normal(size=(30, 2))
        values = rng.normal(size=(30, 1))
        policy = fit_nearest_neighbor([(centers, values)])
        for k in (0, 7, 29):
            assert eval_policy(policy, 0, centers[k])[0] == values[k, 0]

    def test_empty_stage_rejected(self):
        with pytest.raises(ValueError):
            fit_nearest_neighbor([(np.empty((0, 1)), np.empty((0, 1)))])

    def test_non_finite_query_rejected(self):
        policy = fit_nearest_neighbor([(np.array([[0.0]]), np.array([[1.0]]))])
        with pytest.raises(ValueError):
            eval_policy(policy, 0, np.array([np.nan]))

    def test_stage_out_of_range_rejected(self):
        policy = fit_nearest_neighbor([(np.array([[0.0]]), np.array([[1.0]]))])
        with pytest.raises(ValueError):
            policy.evaluate(1, np.array([0.0]))


class TestFastPathEquivalence:
    """Accelerated searches must match the exhaustive scan bit for bit."""

    @pytest.mark.parametrize("dim", [1, 2])
    @pytest.mark.parametrize("n_centers", [1, 2, 5, 100])
    def test_random_instances(self, dim, n_centers):
        rng = np.random.default_rng(1000 * dim + n_centers)
        centers = rng.uniform(-3, 3, (n_centers, dim))
        queries = rng.uniform(-4, 4, (1000, dim))
        reg = NearestNeighborRegressor(centers, np.arange(n_centers, dtype=float))
        np.testing.assert_array_equal(
            reg.nearest_indices(queries),
            nearest_center_indices_exhaustive(centers, queries))

    def test_1d_exact_midpoints_and_duplicates(self):
        centers = np.array([[0.0], [1.0], [1.0], [1.0], [4.0], [0.0]])
        queries = np.array([[0.5], [2.5], [1.0], [0.0], [-3.0], [2.4999999999999996]])
        reg = NearestNeighborRegressor(centers, np.zeros(6))
        np.testing.assert_array_equal(
            reg.nearest_indices(queries),
            nearest_center_indices_exhaustive(centers, queries))

    def test_2d_duplicates_and_ties_via_large_query_block(self):
        # force the k-d path by exceeding the exhaustive budget
        rng = np.random.default_rng(9)
        base = rng.uniform(-1, 1, (512, 2))
        centers = np.vstack([base, base[:16]])  # duplicated rows
        queries = np.vstack([rng.uniform(-1, 1, (2**13, 2)), base[:16]])
        reg = NearestNeighborRegressor(centers, np.zeros(centers.shape[0]))
        assert centers.shape[0] * queries.shape[0] > 2**21
        np.testing.assert_array_equal(
            reg.nearest_indices(queries),
            nearest_center_indices_exhaustive(centers, queries))

    def test_piecewise_constant_along_segment(self):
        rng = np.random.default_rng(2)
        centers = rng.uniform(-2, 2, (20, 2))
        reg = NearestNeighborRegressor(centers, rng.normal(size=20))
        a = np.array([0.3, -0.1])
        cell = reg.nearest_indices(a[None, :])[0]
        b = centers[cell]  # stay within the cell: move toward its center
        line = a[None, :] + np.linspace(0, 0.9, 25)[:, None] * (b - a)[None, :]
        assert np.all(reg.nearest_indices(line) == cell)


class TestMeanPolicy:
    def lin_policy(self, coeff):
        return ClosedFormPolicy(horizon=2, fn=lambda t, x: coeff * x)

    def test_identical_replicas_equal_single(self):
        points = [np.linspace(-1, 1, 9)[:, None]] * 2
        policies = [self.lin_policy(-0.5)] * 4
        out = mean_policy(policies, points)
        np.testing.assert_array_equal(out[0], -0.5 * points[0])

    def test_symmetric_pair_averages_to_zero(self):
        points = [np.linspace(-1, 1, 9)[:, None]] * 2
        out = mean_policy([self.lin_policy(1.0), self.lin_policy(-1.0)], points)
        np.testing.assert_allclose(out[0], 0.0, atol=1e-15)
        np.testing.assert_allclose(out[1], 0.0, atol=1e-15)

    def test_requires_policies(self):
        with pytest.raises(ValueError):
            mean_policy([], [np.zeros((1, 1))])


class TestClosedFormPolicy:
    def test_metadata(self):
        policy = ClosedFormPolicy(horizon=3, fn=lambda t, x: -x)
        assert policy.kind == "closed-form"
        assert policy.support_sizes is None
        assert policy.horizon == 3

    def test_batch_and_single_shapes(self):
        policy = ClosedFormPolicy(horizon=3, fn=lambda t, x: -x)
        single = policy.evaluate(0, np.array([2.0]))
        batch = policy.evaluate(0, np.array([[2.0], [3.0]]))
        assert single.shape == (1,)
        assert batch.shape == (2, 1)
        assert single[0] == -2.0

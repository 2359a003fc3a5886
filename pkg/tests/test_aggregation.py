import numpy as np
import pytest

from aggregation import (
    AggregationError, GradientSet, VarianceDiag, abs_geo_mean, arith_mean, fishr_loss, fishr_penalty,
    fishr_penalty_grad, grad_variance_diag, mean_variance, weighted_geo_mean,
)
from conftest import relative_error
from models import ModelSpec
from nn_engine import Batch, init_params, per_sample_head_grads


def naive_weighted_geo_mean(grads: np.ndarray) -> np.ndarray:
    """Direct products, one coordinate at a time"""
    n_envs, dim = grads.shape
    result = np.zeros(dim)
    for k in range(dim):
        column = grads[:, k]
        positive = column[column >= 0]
        negative = column[column < 0]
        value = 0.0
        if positive.size:
            value += positive.size / n_envs * np.prod(positive) ** (1.0 / positive.size)
        if negative.size:
            value -= negative.size / n_envs * np.prod(np.abs(negative)) ** (1.0 / negative.size)
        result[k] = value
    return result


def random_gradient_set(rng: np.random.Generator) -> np.ndarray:
    grads = rng.uniform(-10, 10, size=(rng.integers(1, 7), rng.integers(1, 9)))
    grads[rng.random(grads.shape) < 0.1] = 0.0
    if rng.random() < 0.2:
        grads = -np.abs(grads) - 1e-3
    return grads


class TestWeightedGeoMean:
    @pytest.mark.parametrize("values, expected", [
        ([4.0, -9.0], -2.5),
        ([4.0, 9.0], 6.0),
        ([-4.0, -9.0], -6.0),
        ([0.0, 5.0], 0.0),
        ([0.0, -5.0], -2.5),
        ([-3.0], -3.0),
    ])
    def test_hand_cases(self, values, expected):
        assert weighted_geo_mean(np.array(values))[0] == pytest.approx(expected, rel=1e-12)

    def test_matches_direct_products(self):
        rng = np.random.default_rng(0)
        for _ in range(2000):
            grads = random_gradient_set(rng)
            np.testing.assert_allclose(weighted_geo_mean(grads), naive_weighted_geo_mean(grads),
                                       rtol=1e-12, atol=1e-11)

    def test_identical_inputs_are_idempotent(self):
        g = np.array([1.5, -2.0, 0.0, 1e-30])
        np.testing.assert_allclose(weighted_geo_mean([g, g, g]), g, rtol=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        grads = rng.uniform(-5, 5, size=(5, 6))
        np.testing.assert_allclose(weighted_geo_mean(grads), weighted_geo_mean(grads[::-1]), rtol=1e-13)

    def test_no_underflow_for_many_small_gradients(self):
        grads = np.full((50, 1), 1e-10)
        assert weighted_geo_mean(grads)[0] == pytest.approx(1e-10, rel=1e-10)

    def test_abs_geo_mean_drops_signs(self):
        assert abs_geo_mean(np.array([4.0, -9.0]))[0] == pytest.approx(6.0)

    def test_positively_homogeneous(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            grads = random_gradient_set(rng)
            scale = rng.uniform(1e-3, 1e3)
            np.testing.assert_allclose(weighted_geo_mean(scale * grads), scale * weighted_geo_mean(grads),
                                       rtol=1e-12, atol=1e-10)

    def test_bounded_by_largest_magnitude(self):
        rng = np.random.default_rng(12)
        for _ in range(500):
            grads = random_gradient_set(rng)
            bound = np.abs(grads).max(axis=0)
            assert np.all(np.abs(weighted_geo_mean(grads)) <= bound * (1 + 1e-12))


class TestArithMean:
    def test_mean(self):
        np.testing.assert_array_equal(arith_mean([np.array([1.0, 2.0]), np.array([3.0, -2.0])]), [2.0, 0.0])

    def test_single_is_identity(self):
        g = np.array([0.1, -0.7])
        assert np.array_equal(arith_mean([g]), g)


class TestGradientSetValidation:
    def test_empty(self):
        with pytest.raises(AggregationError):
            arith_mean([])

    def test_nan(self):
        with pytest.raises(AggregationError):
            weighted_geo_mean(np.array([1.0, np.nan]))

    def test_infinite(self):
        with pytest.raises(AggregationError):
            weighted_geo_mean(np.array([[1.0], [np.inf]]))

    def test_ragged(self):
        with pytest.raises(AggregationError):
            GradientSet.of([np.zeros(2), np.zeros(3)])


class TestVariance:
    def test_population_variance(self):
        v = grad_variance_diag(np.array([[1.0, 0.0], [3.0, 0.0]]))
        np.testing.assert_array_equal(v.values, [1.0, 0.0])
        assert v.sample_count == 2

    def test_single_sample_is_zero(self):
        assert np.array_equal(grad_variance_diag(np.array([[2.0, -1.0]])).values, [0.0, 0.0])

    def test_negative_variance_rejected(self):
        with pytest.raises(AggregationError):
            VarianceDiag(np.array([-1.0]))

    def test_mixed_lengths_rejected(self):
        with pytest.raises(AggregationError):
            mean_variance([VarianceDiag(np.zeros(2)), VarianceDiag(np.zeros(3))])


class TestFishrLoss:
    def test_identical_is_zero(self):
        v = VarianceDiag(np.array([0.3, 0.1]))
        assert fishr_loss([v, v, v]) == 0.0

    @pytest.mark.parametrize("copies", [2, 3, 5, 7])
    @pytest.mark.parametrize("values", [[0.3, 0.1], [0.1, 0.7, 1e-3]])
    def test_identical_is_exactly_zero_for_any_client_count(self, copies, values):
        v = VarianceDiag(np.array(values))
        assert fishr_loss([v] * copies) == 0.0
        assert np.array_equal(mean_variance([v] * copies), v.values)

    def test_hand_case(self):
        assert fishr_loss([VarianceDiag(np.array([1.0, 0.0])), VarianceDiag(np.array([0.0, 1.0]))]) == 0.5

    def test_single_client(self):
        assert fishr_loss([VarianceDiag(np.array([4.0]))]) == 0.0


class TestFishrPenaltyGrad:
    def _v_bar(self, spec, params, seed):
        rng = np.random.default_rng(seed)
        other = Batch(rng.normal(size=(9, spec.input_size)), rng.integers(0, 2, size=9))
        return grad_variance_diag(per_sample_head_grads(spec, params, other))

    def test_matches_finite_differences(self, small_spec, small_params, small_batch):
        v_bar = self._v_bar(small_spec, small_params, 21)
        head = small_params.head
        analytic = fishr_penalty_grad(small_spec, small_params, small_batch, v_bar)

        def penalty(head_values):
            values = small_params.values.copy()
            values[head.offset:head.stop] = head_values
            return fishr_penalty(small_spec, small_params.with_values(values), small_batch, v_bar)

        h = 1e-5
        block = small_params.head_block().copy()
        numeric = np.zeros_like(block)
        for i in range(block.shape[0]):
            step = np.zeros_like(block)
            step[i] = h
            numeric[i] = (penalty(block + step) - penalty(block - step)) / (2 * h)
        assert analytic.shape == (small_spec.head_param_count,)
        assert relative_error(analytic, numeric) < 1e-3

    def test_softmax_matches_finite_differences(self, softmax_spec):
        rng = np.random.default_rng(8)
        params = init_params(softmax_spec, seed=8)
        params = params.with_values(params.values + 0.1 * rng.normal(size=params.values.shape))
        batch = Batch(rng.normal(size=(10, 3)), rng.integers(0, 4, size=10))
        v_bar = VarianceDiag(np.full(softmax_spec.head_param_count, 0.01))
        head = params.head
        analytic = fishr_penalty_grad(softmax_spec, params, batch, v_bar)

        def penalty(head_values):
            values = params.values.copy()
            values[head.offset:head.stop] = head_values
            return fishr_penalty(softmax_spec, params.with_values(values), batch, v_bar)

        h = 1e-5
        block = params.head_block().copy()
        numeric = np.array([
            (penalty(block + h * np.eye(block.shape[0])[i]) - penalty(block - h * np.eye(block.shape[0])[i])) / (2 * h)
            for i in range(block.shape[0])
        ])
        assert relative_error(analytic, numeric) < 1e-3

    def test_single_sample_with_zero_mean_is_zero(self, small_spec, small_params):
        batch = Batch(np.ones((1, 4)), np.array([1]))
        grad = fishr_penalty_grad(small_spec, small_params, batch, VarianceDiag.zeros(small_spec.head_param_count))
        assert np.array_equal(grad, np.zeros(small_spec.head_param_count))

    def test_wrong_v_bar_length(self, small_spec, small_params, small_batch):
        with pytest.raises(AggregationError):
            fishr_penalty_grad(small_spec, small_params, small_batch, VarianceDiag.zeros(3))

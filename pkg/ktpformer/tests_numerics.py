"""
Tensor engine tests: forward values of every operation, backward rules against
central finite differences, and the error contracts.
"""

import numpy as np
from django.test import SimpleTestCase

from .lifting import numerics as nx
from .lifting.exceptions import NumericalError, ShapeMismatchError


def numeric_gradient(fn, value, step=1e-6):
    """Central differences of a scalar function of one array."""
    value = np.array(value, dtype=np.float64)
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = fn(value)
        flat[i] = original - step
        lower = fn(value)
        flat[i] = original
        out[i] = (upper - lower) / (2 * step)
    return grad


def relative_error(a, b, floor=1e-3):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


class GradientCheckMixin:
    """Compare the tape gradient of `build(leaf)` with finite differences."""

    def assertGradientMatches(self, build, value, tolerance=1e-5):
        leaf = nx.parameter(value)
        nx.backward(build(leaf))
        with nx.no_grad():
            numeric = numeric_gradient(lambda v: build(nx.Tensor(v)).item(), value)
        self.assertLess(relative_error(leaf.grad, numeric), tolerance)


class TensorTests(SimpleTestCase):

    def test_leaf_owns_gradient_buffer(self):
        leaf = nx.parameter([[1.0, 2.0], [3.0, 4.0]])
        self.assertEqual(leaf.grad.shape, leaf.shape)
        self.assertTrue(np.all(leaf.grad == 0))
        self.assertIsNone(nx.Tensor([1.0]).grad)

    def test_parameter_copies_its_input(self):
        source = np.ones(3)
        leaf = nx.parameter(source)
        source[0] = 5.0
        self.assertEqual(leaf.value[0], 1.0)

    def test_no_grad_records_nothing(self):
        leaf = nx.parameter([1.0, 2.0])
        with nx.no_grad():
            out = nx.mul(leaf, leaf)
        self.assertFalse(out.requires_grad)
        self.assertEqual(out.op, 'leaf')
        self.assertTrue(nx.is_grad_enabled())

    def test_detach_cuts_the_tape(self):
        leaf = nx.parameter([2.0])
        detached = nx.mul(leaf, leaf).detach()
        self.assertFalse(detached.requires_grad)
        self.assertEqual(detached.item(), 4.0)


class MatmulTests(GradientCheckMixin, SimpleTestCase):

    def test_identity_product(self):
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        np.testing.assert_array_equal(nx.matmul(np.eye(2), x).value, x)

    def test_hand_product(self):
        out = nx.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
        np.testing.assert_array_equal(out.value, [[3.0], [7.0]])

    def test_gradient_of_sum_matches_finite_differences(self):
        b = np.array([[2.0, 3.0], [4.0, 5.0]])
        self.assertGradientMatches(lambda a: nx.sum(nx.matmul(a, b)), np.eye(2), tolerance=1e-6)

    def test_batched_broadcast_gradient(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4, 5))
        self.assertGradientMatches(lambda w: nx.sum(nx.square(nx.matmul(a, w))), rng.normal(size=(5, 2)), 1e-5)

    def test_mismatch_names_both_shapes(self):
        with self.assertRaises(ShapeMismatchError) as ctx:
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))
        self.assertIn('(2, 3) vs (2, 3)', str(ctx.exception))
        self.assertEqual(ctx.exception.shapes, ((2, 3), (2, 3)))


class SoftmaxTests(GradientCheckMixin, SimpleTestCase):

    def test_symmetric_input(self):
        np.testing.assert_allclose(nx.softmax_lastaxis([0.0, 0.0]).value, [0.5, 0.5])

    def test_hand_values(self):
        np.testing.assert_allclose(nx.softmax_lastaxis([1.0, 2.0, 3.0]).value,
                                   [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_shift_invariance(self):
        x = np.array([0.3, -1.2, 2.5])
        np.testing.assert_allclose(nx.softmax_lastaxis(x + 1000.0).value, nx.softmax_lastaxis(x).value,
                                   atol=1e-12)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(1).normal(scale=10.0, size=(4, 6, 7))
        np.testing.assert_allclose(nx.softmax_lastaxis(x).value.sum(axis=-1), 1.0, atol=1e-12)

    def test_nan_input_is_rejected(self):
        with self.assertRaises(NumericalError):
            nx.softmax_lastaxis([1.0, np.nan])

    def test_sum_of_softmax_has_zero_gradient(self):
        leaf = nx.parameter([0.4, -0.1, 2.0])
        nx.backward(nx.sum(nx.softmax_lastaxis(leaf)))
        np.testing.assert_allclose(leaf.grad, 0.0, atol=1e-15)

    def test_gradient_matches_finite_differences(self):
        weights = np.array([[1.0, -2.0, 0.5], [0.3, 0.2, -1.0]])
        self.assertGradientMatches(lambda x: nx.sum(nx.mul(nx.softmax_lastaxis(x), weights)),
                                   np.array([[0.1, 0.7, -0.4], [1.5, -0.2, 0.0]]))


class LayerNormTests(GradientCheckMixin, SimpleTestCase):

    def test_constant_slice_maps_to_zero(self):
        out = nx.layer_norm([5.0, 5.0, 5.0], np.ones(3), np.zeros(3))
        np.testing.assert_array_equal(out.value, [0.0, 0.0, 0.0])

    def test_hand_values_without_eps(self):
        out = nx.layer_norm([1.0, 3.0], np.ones(2), np.zeros(2), eps=0.0)
        np.testing.assert_allclose(out.value, [-1.0, 1.0])

    def test_gain_and_bias_are_affine(self):
        x = np.array([[0.5, -1.0, 2.0, 4.0]])
        gain = np.array([2.0, -1.0, 0.5, 3.0])
        bias = np.array([0.1, 0.2, 0.3, 0.4])
        plain = nx.layer_norm(x, np.ones(4), np.zeros(4)).value
        np.testing.assert_allclose(nx.layer_norm(x, gain, bias).value, gain * plain + bias, rtol=1e-14)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 5))
        gain, bias = rng.normal(size=5), rng.normal(size=5)
        upstream = rng.normal(size=(3, 5))
        self.assertGradientMatches(lambda v: nx.sum(nx.mul(nx.layer_norm(v, gain, bias), upstream)), x)
        self.assertGradientMatches(lambda g: nx.sum(nx.mul(nx.layer_norm(x, g, bias), upstream)), gain)
        self.assertGradientMatches(lambda b: nx.sum(nx.mul(nx.layer_norm(x, gain, b), upstream)), bias)

    def test_gain_shape_is_checked(self):
        with self.assertRaises(ShapeMismatchError):
            nx.layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(3))


class ElementwiseGradientTests(GradientCheckMixin, SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(3)

    def test_gelu(self):
        self.assertGradientMatches(lambda x: nx.sum(nx.gelu(x)), self.rng.normal(size=(4, 3)))

    def test_gelu_values(self):
        np.testing.assert_allclose(nx.gelu([0.0, 1.0]).value, [0.0, 0.8413447460685429], rtol=1e-12)

    def test_broadcast_add_and_mul(self):
        full = self.rng.normal(size=(2, 3, 4))
        self.assertGradientMatches(lambda b: nx.sum(nx.square(nx.add(full, b))), self.rng.normal(size=(4,)))
        self.assertGradientMatches(lambda m: nx.sum(nx.mul(full, m)), self.rng.normal(size=(3, 4)))

    def test_norm_and_mean(self):
        self.assertGradientMatches(lambda x: nx.mean(nx.norm_lastaxis(x)), self.rng.normal(size=(3, 4, 3)))

    def test_norm_subgradient_at_zero(self):
        leaf = nx.parameter(np.zeros((1, 3)))
        nx.backward(nx.sum(nx.norm_lastaxis(leaf)))
        np.testing.assert_array_equal(leaf.grad, np.zeros((1, 3)))

    def test_layout_operations(self):
        value = self.rng.normal(size=(2, 3, 4))
        upstream = self.rng.normal(size=(4, 2, 3))
        self.assertGradientMatches(lambda x: nx.sum(nx.mul(nx.permute(x, (2, 0, 1)), upstream)), value)
        self.assertGradientMatches(lambda x: nx.sum(nx.square(nx.reshape(x, (6, 4)))), value)
        self.assertGradientMatches(lambda x: nx.sum(nx.square(nx.sub(x[1:], x[:-1]))), value)
        self.assertGradientMatches(
            lambda x: nx.sum(nx.mul(nx.concat_lastaxis([x, nx.scale(x, 2.0)]), 1.5)), value)

    def test_sum_over_axis(self):
        self.assertGradientMatches(lambda x: nx.sum(nx.square(nx.sum(x, axis=1))), self.rng.normal(size=(3, 4)))


class BackwardTests(SimpleTestCase):

    def test_square_at_three(self):
        x = nx.parameter(3.0)
        nx.backward(nx.mul(x, x))
        self.assertEqual(x.grad, 6.0)

    def test_constant_loss_leaves_zero_gradients(self):
        x = nx.parameter([1.0, 2.0])
        nx.backward(nx.add(nx.sum(nx.scale(x, 0.0)), 4.0))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_non_scalar_loss_is_rejected(self):
        with self.assertRaises(ShapeMismatchError):
            nx.backward(nx.scale(nx.parameter([1.0, 2.0]), 2.0))

    def test_shared_subexpression_accumulates_once_per_path(self):
        x = nx.parameter(2.0)
        y = nx.mul(x, x)
        nx.backward(nx.add(y, y))
        self.assertEqual(x.grad, 8.0)

    def test_gradients_accumulate_until_zeroed(self):
        x = nx.parameter(1.5)
        nx.backward(nx.scale(x, 2.0))
        nx.backward(nx.scale(x, 2.0))
        self.assertEqual(x.grad, 4.0)
        nx.zero_grads([x])
        self.assertEqual(x.grad, 0.0)

    def test_deep_graph_does_not_recurse(self):
        x = nx.parameter(1.0)
        out = x
        for _ in range(5000):
            out = nx.add(out, 0.0)
        nx.backward(out)
        self.assertEqual(x.grad, 1.0)

"""
Multi-head self-attention, the encoder block and the spatial/temporal reshape.
"""

import numpy as np
from django.test import SimpleTestCase

from test_config import ATTENTION_ROW_TOLERANCE, GRADCHECK_TOLERANCE

from .lifting import numerics as nx
from .lifting.exceptions import ConfigurationError, ShapeMismatchError
from .lifting.transformer import (
    MLP_RATIO, EncoderParams, MHSAParams, check_heads, encoder_block, mhsa, reshape_spatial_temporal,
)
from .tests_numerics import numeric_gradient, relative_error


def encoder_params(channels, heads, rng=None, zero=False):
    hidden = MLP_RATIO * channels

    def draw(*shape):
        if zero or rng is None:
            return nx.parameter(np.zeros(shape))
        return nx.parameter(rng.normal(scale=0.3, size=shape))

    return EncoderParams(
        mhsa=MHSAParams(draw(channels, 3 * channels), draw(channels, channels), heads),
        ln_gain=nx.parameter(np.ones(channels)),
        ln_bias=nx.parameter(np.zeros(channels)),
        fc1_weight=draw(channels, hidden),
        fc1_bias=draw(hidden),
        fc2_weight=draw(hidden, channels),
        fc2_bias=draw(channels),
    )


class MHSATests(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(21)

    def test_zero_qkv_gives_uniform_attention_and_zero_output(self):
        params = MHSAParams(nx.parameter(np.zeros((8, 24))), nx.parameter(self.rng.normal(size=(8, 8))), 2)
        out, attn = mhsa(self.rng.normal(size=(2, 5, 8)), params)
        np.testing.assert_allclose(attn.value, 0.2, rtol=1e-15)
        np.testing.assert_array_equal(out.value, 0.0)

    def test_single_token(self):
        qkv = self.rng.normal(size=(4, 12))
        out_transform = self.rng.normal(size=(4, 4))
        tokens = self.rng.normal(size=(3, 1, 4))
        out, attn = mhsa(tokens, MHSAParams(nx.Tensor(qkv), nx.Tensor(out_transform), 2))
        np.testing.assert_array_equal(attn.value, np.ones((3, 2, 1, 1)))
        values = tokens @ qkv[:, 8:]
        np.testing.assert_allclose(out.value, values @ out_transform, rtol=1e-12, atol=1e-12)

    def test_attention_rows_are_distributions(self):
        params = MHSAParams(nx.Tensor(self.rng.normal(size=(16, 48))), nx.Tensor(np.eye(16)), 4)
        _, attn = mhsa(self.rng.normal(scale=3.0, size=(2, 7, 16)), params)
        self.assertEqual(attn.shape, (2, 4, 7, 7))
        np.testing.assert_allclose(attn.value.sum(axis=-1), 1.0, atol=ATTENTION_ROW_TOLERANCE)
        self.assertTrue(np.all((attn.value >= 0.0) & (attn.value <= 1.0)))

    def test_shared_key_offset_leaves_output_unchanged(self):
        # channel 0 is constant, so its key row adds one score offset per query row
        qkv = self.rng.normal(size=(6, 18))
        tokens = self.rng.normal(size=(1, 4, 6))
        tokens[..., 0] = 1.0
        out, attn = mhsa(tokens, MHSAParams(nx.Tensor(qkv), nx.Tensor(np.eye(6)), 1))
        shifted_qkv = qkv.copy()
        shifted_qkv[0, 6:12] += self.rng.normal(size=6)
        shifted, shifted_attn = mhsa(tokens, MHSAParams(nx.Tensor(shifted_qkv), nx.Tensor(np.eye(6)), 1))
        np.testing.assert_allclose(shifted_attn.value, attn.value, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(shifted.value, out.value, rtol=1e-9, atol=1e-12)

    def test_indivisible_heads_rejected(self):
        with self.assertRaises(ConfigurationError):
            check_heads(10, 3)
        params = MHSAParams(nx.Tensor(np.zeros((10, 30))), nx.Tensor(np.eye(10)), 3)
        with self.assertRaises(ConfigurationError):
            mhsa(np.zeros((1, 2, 10)), params)

    def test_rank_two_tokens_rejected(self):
        params = MHSAParams(nx.Tensor(np.zeros((4, 12))), nx.Tensor(np.eye(4)), 2)
        with self.assertRaises(ShapeMismatchError):
            mhsa(np.zeros((2, 4)), params)


class EncoderBlockTests(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(22)

    def test_zero_weights_are_identity(self):
        tokens = self.rng.normal(size=(2, 5, 16))
        out, _ = encoder_block(tokens, encoder_params(16, 4, zero=True))
        np.testing.assert_array_equal(out.value, tokens)

    def test_shape_contract(self):
        out, attn = encoder_block(self.rng.normal(size=(2, 5, 16)), encoder_params(16, 4, self.rng))
        self.assertEqual(out.shape, (2, 5, 16))
        self.assertEqual(attn.shape, (2, 4, 5, 5))
        self.assertTrue(np.all(np.isfinite(out.value)))

    def test_token_permutation_equivariance(self):
        params = encoder_params(8, 2, self.rng)
        tokens = self.rng.normal(size=(1, 6, 8))
        order = np.array([3, 1, 5, 0, 2, 4])
        out, _ = encoder_block(tokens, params)
        permuted, _ = encoder_block(tokens[:, order], params)
        np.testing.assert_allclose(permuted.value, out.value[:, order], rtol=1e-10, atol=1e-12)

    def test_qkv_gradient_matches_finite_differences(self):
        params = encoder_params(8, 2, self.rng)
        tokens = self.rng.normal(size=(2, 3, 8))
        start = self.rng.normal(scale=0.3, size=(8, 24))

        def build(qkv):
            params.mhsa.qkv_transform = qkv
            return nx.sum(encoder_block(tokens, params)[0])

        leaf = nx.parameter(start)
        nx.backward(build(leaf))
        with nx.no_grad():
            numeric = numeric_gradient(lambda v: build(nx.Tensor(v)).item(), start)
        self.assertLess(relative_error(leaf.grad, numeric), GRADCHECK_TOLERANCE)


class ReshapeTests(SimpleTestCase):

    def test_round_trip_is_bitwise(self):
        x = np.random.default_rng(23).normal(size=(4, 3, 5))
        back = reshape_spatial_temporal(reshape_spatial_temporal(x))
        np.testing.assert_array_equal(back.value, x)

    def test_element_mapping(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        swapped = reshape_spatial_temporal(x).value
        self.assertEqual(swapped.shape, (3, 2, 4))
        self.assertEqual(swapped[2, 1, 3], x[1, 2, 3])

    def test_gradient_is_permuted(self):
        leaf = nx.parameter(np.zeros((2, 3, 4)))
        upstream = np.arange(24.0).reshape(3, 2, 4)
        nx.backward(nx.sum(nx.mul(reshape_spatial_temporal(leaf), upstream)))
        np.testing.assert_array_equal(leaf.grad, upstream.transpose(1, 0, 2))

    def test_rank_two_rejected(self):
        with self.assertRaises(ShapeMismatchError):
            reshape_spatial_temporal(np.zeros((2, 3)))

"""
Kinematics and trajectory prior attention.
"""

import numpy as np
from django.test import SimpleTestCase

from test_config import GRADCHECK_TOLERANCE

from .lifting import numerics as nx
from .lifting.exceptions import ShapeMismatchError
from .lifting.prior_attention import (
    KPAParams, TPABlockParams, TPAParams, kpa_forward, linear_embedding, tpa_block, tpa_stack,
)
from .lifting.topology import build_spatial_local, build_temporal_local, chain_skeleton
from .tests_numerics import numeric_gradient, relative_error


def kpa_params(joints, channels, rng=None, embed=None):
    rng = rng or np.random.default_rng(0)
    return KPAParams(
        embed=nx.parameter(embed if embed is not None else rng.normal(size=(2, channels))),
        global_affinity=nx.parameter(np.zeros((joints, joints))),
        modulation=nx.parameter(np.ones((joints, channels))),
        spatial_pos=nx.parameter(np.zeros((joints, channels))),
    )


def tpa_block_params(frames, channels, transform=None):
    return TPABlockParams(
        transform=nx.parameter(np.eye(channels) if transform is None else transform),
        global_affinity=nx.parameter(np.zeros((frames, frames))),
        modulation=nx.parameter(np.ones((frames, channels))),
    )


class KPATests(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(11)
        self.seq = self.rng.normal(size=(3, 4, 2))

    def test_identity_prior_is_plain_embedding(self):
        params = kpa_params(4, 6, self.rng)
        out = kpa_forward(self.seq, params, np.eye(4))
        np.testing.assert_array_equal(out.value, linear_embedding(self.seq, params).value)

    def test_hand_example(self):
        params = kpa_params(2, 1, embed=np.array([[1.0], [0.0]]))
        seq = np.array([[[1.0, 9.0], [2.0, 9.0]]])
        out = kpa_forward(seq, params, np.ones((2, 2)))
        np.testing.assert_array_equal(out.value, [[[3.0], [3.0]]])

    def test_doubling_modulation_doubles_output(self):
        params = kpa_params(4, 5, self.rng)
        params.spatial_pos = nx.parameter(self.rng.normal(size=(4, 5)))
        local = build_spatial_local(chain_skeleton(4))
        base = kpa_forward(self.seq, params, local).value - params.spatial_pos.value
        params.modulation = nx.parameter(2.0 * params.modulation.value)
        doubled = kpa_forward(self.seq, params, local).value - params.spatial_pos.value
        np.testing.assert_allclose(doubled, 2.0 * base, rtol=1e-12, atol=1e-14)

    def test_positional_embedding_broadcasts_over_frames(self):
        params = kpa_params(4, 3, self.rng)
        params.spatial_pos = nx.parameter(self.rng.normal(size=(4, 3)))
        zero = kpa_forward(np.zeros((3, 4, 2)), params, np.eye(4)).value
        for t in range(3):
            np.testing.assert_array_equal(zero[t], params.spatial_pos.value)

    def test_joint_permutation_equivariance(self):
        params = kpa_params(4, 3, self.rng)
        params.global_affinity = nx.parameter(self.rng.normal(size=(4, 4)))
        params.modulation = nx.parameter(self.rng.normal(size=(4, 3)))
        params.spatial_pos = nx.parameter(self.rng.normal(size=(4, 3)))
        local = build_spatial_local(chain_skeleton(4))
        order = np.array([2, 0, 3, 1])
        permuted = KPAParams(
            embed=params.embed,
            global_affinity=nx.Tensor(params.global_affinity.value[np.ix_(order, order)]),
            modulation=nx.Tensor(params.modulation.value[order]),
            spatial_pos=nx.Tensor(params.spatial_pos.value[order]),
        )
        expected = kpa_forward(self.seq, params, local).value[:, order]
        out = kpa_forward(self.seq[:, order], permuted, local[np.ix_(order, order)]).value
        np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)

    def test_every_parameter_receives_gradient(self):
        params = kpa_params(4, 3, self.rng)
        params.global_affinity = nx.parameter(self.rng.normal(size=(4, 4)))
        upstream = self.rng.normal(size=(3, 4, 3))
        nx.backward(nx.sum(nx.mul(kpa_forward(self.seq, params, np.eye(4)), upstream)))
        for name in ('embed', 'global_affinity', 'modulation', 'spatial_pos'):
            self.assertGreater(np.abs(getattr(params, name).grad).max(), 0.0, name)

    def test_wrong_input_width_rejected(self):
        with self.assertRaises(ShapeMismatchError):
            kpa_forward(np.zeros((3, 4, 3)), kpa_params(4, 2), np.eye(4))

    def test_wrong_joint_count_rejected(self):
        with self.assertRaises(ShapeMismatchError):
            kpa_forward(np.zeros((3, 5, 2)), kpa_params(4, 2), np.eye(4))


class TPATests(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(12)
        self.tokens = self.rng.normal(size=(3, 5, 4))

    def test_identity_block(self):
        out = tpa_block(self.tokens, tpa_block_params(5, 4), np.eye(5))
        np.testing.assert_array_equal(out.value, self.tokens)

    def test_hand_example(self):
        out = tpa_block(np.array([[[1.0], [2.0]]]), tpa_block_params(2, 1), np.ones((2, 2)))
        np.testing.assert_array_equal(out.value, [[[3.0], [3.0]]])

    def test_block_is_linear(self):
        block = tpa_block_params(5, 4, self.rng.normal(size=(4, 4)))
        block.global_affinity = nx.parameter(self.rng.normal(size=(5, 5)))
        local = build_temporal_local(5, 1)
        single = tpa_block(self.tokens, block, local).value
        scaled = tpa_block(2.5 * self.tokens, block, local).value
        np.testing.assert_allclose(scaled, 2.5 * single, rtol=1e-12, atol=1e-12)

    def test_channels_do_not_mix_through_affinity(self):
        block = tpa_block_params(5, 4)
        local = build_temporal_local(5, 2)
        tokens = np.zeros((3, 5, 4))
        tokens[:, :, 1] = self.tokens[:, :, 1]
        out = tpa_block(tokens, block, local).value
        np.testing.assert_array_equal(out[:, :, [0, 2, 3]], 0.0)

    def test_without_prior_is_bare_transform(self):
        transform = self.rng.normal(size=(4, 4))
        out = tpa_block(self.tokens, tpa_block_params(5, 4, transform), np.ones((5, 5)), use_prior=False)
        np.testing.assert_allclose(out.value, self.tokens @ transform, rtol=1e-12)

    def test_identity_stack_doubles_tokens(self):
        params = TPAParams([tpa_block_params(5, 4), tpa_block_params(5, 4)], nx.parameter(np.zeros((5, 4))))
        out = tpa_stack(self.tokens, params, np.eye(5))
        np.testing.assert_array_equal(out.value, 2.0 * self.tokens)

    def test_zero_stack_leaves_residual(self):
        pos = self.rng.normal(size=(5, 4))
        zero = np.zeros((4, 4))
        params = TPAParams([tpa_block_params(5, 4, zero), tpa_block_params(5, 4, zero)], nx.parameter(pos))
        out = tpa_stack(self.tokens, params, build_temporal_local(5, 1))
        np.testing.assert_allclose(out.value, self.tokens + pos, rtol=1e-15)

    def test_affinity_gradient_matches_finite_differences(self):
        local = build_temporal_local(5, 1)
        second = tpa_block_params(5, 4, self.rng.normal(size=(4, 4)))
        first_transform = self.rng.normal(size=(4, 4))
        pos = np.zeros((5, 4))

        def build(affinity):
            first = TPABlockParams(nx.Tensor(first_transform), affinity, nx.Tensor(np.ones((5, 4))))
            return nx.sum(tpa_stack(self.tokens, TPAParams([first, second], nx.Tensor(pos)), local))

        start = self.rng.uniform(-0.01, 0.01, size=(5, 5))
        leaf = nx.parameter(start)
        nx.backward(build(leaf))
        with nx.no_grad():
            numeric = numeric_gradient(lambda v: build(nx.Tensor(v)).item(), start)
        self.assertLess(relative_error(leaf.grad, numeric), GRADCHECK_TOLERANCE)

    def test_mismatched_modulation_rejected(self):
        block = tpa_block_params(5, 4)
        block.modulation = nx.parameter(np.ones((4, 4)))
        with self.assertRaises(ShapeMismatchError):
            tpa_block(self.tokens, block, np.eye(5))

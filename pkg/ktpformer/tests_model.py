"""
Full-model wiring, parameter accounting and attention extraction.
"""

import math
import re
from pathlib import Path

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase

from test_config import (
    ACCOUNTING_CONFIGS, ATTENTION_ROW_TOLERANCE, DEGRADATION_TOLERANCE, DESK_CONFIG, TINY_CONFIG,
)

from .lifting import numerics as nx
from .lifting.exceptions import ConfigurationError, ShapeMismatchError
from .lifting.model import (
    MODES, ForwardRecord, ModelConfig, ModelParameters, Topologies, analytic_parameter_count,
    count_flops, count_parameters, extract_attention, forward, forward_mode, parameter_shapes,
)


def enumerated_count(config):
    return sum(math.prod(shape) for _, shape in parameter_shapes(config))


def group_count(config, prefix):
    return sum(math.prod(shape) for name, shape in parameter_shapes(config) if name.startswith(prefix))


class ModelConfigTests(SimpleTestCase):

    def test_defaults_are_desk_scale(self):
        config = ModelConfig()
        self.assertEqual((config.frames, config.joints, config.channels, config.heads, config.depth),
                         (27, 17, 64, 4, 2))
        self.assertEqual(config.mode, 'SMD')

    def test_invalid_settings_rejected(self):
        for changes in (dict(heads=3), dict(frames=0), dict(mode='XMD'), dict(depth=-1),
                        dict(kpa_variant='partial'), dict(lambda_t=-0.1), dict(joint_weights=(1.0,) * 4),
                        dict(lr_decay=0.0), dict(beta2=1.0)):
            with self.subTest(changes=changes), self.assertRaises(ConfigurationError):
                ModelConfig(**changes)

    def test_non_positive_joint_weights_rejected(self):
        with self.assertRaises(ConfigurationError):
            ModelConfig(joints=2, joint_weights=(1.0, 0.0), skeleton='chain')

    def test_ablation_variants_freeze_prior_parameters(self):
        frozen = ModelConfig(kpa_variant='no_global', tpa_variant='no_prior').frozen_parameters()
        self.assertIn('kpa.global_affinity', frozen)
        self.assertNotIn('kpa.modulation', frozen)
        self.assertIn('tpa.block1.modulation', frozen)
        self.assertNotIn('tpa.block0.transform', frozen)
        baseline = ModelConfig(mode='BASELINE').frozen_parameters()
        self.assertIn('tpa.block0.transform', baseline)
        self.assertIn('kpa.modulation', baseline)
        self.assertEqual(ModelConfig().frozen_parameters(), set())

    def test_frozen_global_affinity_starts_at_zero(self):
        params = ModelParameters.initialize(ModelConfig(**dict(TINY_CONFIG, kpa_variant='no_global')))
        np.testing.assert_array_equal(params.arrays['kpa.global_affinity'], 0.0)
        self.assertGreater(np.abs(params.arrays['tpa.block0.global_affinity']).max(), 0.0)


class ParameterAccountingTests(SimpleTestCase):

    def test_enumeration_matches_closed_form(self):
        for kwargs in ACCOUNTING_CONFIGS:
            config = ModelConfig(**kwargs)
            with self.subTest(config=kwargs):
                self.assertEqual(enumerated_count(config), analytic_parameter_count(config))

    def test_registry_count_matches_closed_form(self):
        for kwargs in (TINY_CONFIG, DESK_CONFIG):
            config = ModelConfig(**kwargs)
            self.assertEqual(count_parameters(ModelParameters.initialize(config)),
                             analytic_parameter_count(config))

    def test_documented_order_matches_enumeration(self):
        text = (Path(settings.BASE_DIR) / 'FORMATS.md').read_text(encoding='utf-8')
        section = text.split('### Parameter enumeration order', 1)[1].split('## ', 1)[0]
        documented = re.findall(r'^\| `([^`]+)`\s*\| ([^|]+?)\s*\|', section, re.M)
        config = ModelConfig(**TINY_CONFIG)
        sizes = {'d': config.channels, 'd_ff': config.mlp_width, 'N': config.joints, 'T': config.frames}

        def dimension(token):
            count, symbol = re.fullmatch(r'(\d*)(d_ff|d|N|T)?', token).groups()
            return (int(count) if count else 1) * (sizes[symbol] if symbol else 1)

        expected = {}
        for name, shape in parameter_shapes(config):
            name = re.sub(r'block\d+', 'block<b>', name)
            name = re.sub(r'^encoder\.(entry_\w+|stack\d+\.\w+)\.', 'encoder.<enc>.', name)
            expected.setdefault(name, shape)
        self.assertEqual([name for name, _ in documented], list(expected))
        for name, shape in documented:
            self.assertEqual(tuple(dimension(t) for t in shape.split(' x ')), expected[name], name)

    def test_enumeration_visits_each_array_once(self):
        names = [name for name, _ in parameter_shapes(ModelConfig(**DESK_CONFIG))]
        self.assertEqual(len(names), len(set(names)))
        self.assertEqual(names[0], 'kpa.embed')
        self.assertEqual(names[-2:], ['head.weight', 'head.bias'])

    def test_kpa_increment(self):
        config = ModelConfig(**DESK_CONFIG)
        d, n = config.channels, config.joints
        self.assertEqual(group_count(config, 'kpa.'), 2 * d + n * n + 2 * n * d)

    def test_single_tpa_block_variant(self):
        smd = ModelConfig(**DESK_CONFIG)
        single = smd.with_overrides(mode='SMD-S')
        d, t = smd.channels, smd.frames
        self.assertEqual(analytic_parameter_count(smd) - analytic_parameter_count(single), d * d + t * t + t * d)

    def test_doubling_depth(self):
        config = ModelConfig(**DESK_CONFIG)
        encoder = group_count(config, 'encoder.entry_spatial.')
        deeper = config.with_overrides(depth=2 * config.depth)
        self.assertEqual(analytic_parameter_count(deeper) - analytic_parameter_count(config),
                         config.depth * 2 * encoder)

    def test_zero_depth_is_priors_entry_blocks_and_head(self):
        config = ModelConfig(**dict(DESK_CONFIG, depth=0))
        expected = (group_count(config, 'kpa.') + group_count(config, 'tpa.')
                    + group_count(config, 'encoder.entry_') + group_count(config, 'head.'))
        self.assertEqual(analytic_parameter_count(config), expected)

    def test_flops(self):
        config = ModelConfig(**DESK_CONFIG)
        flops = count_flops(config)
        self.assertIsInstance(flops, int)
        self.assertGreater(flops, count_flops(config.with_overrides(mode='BASELINE')))
        self.assertGreater(count_flops(config.with_overrides(depth=4)), flops)
        self.assertGreater(flops, count_flops(config.with_overrides(mode='SMD-S')))


class ForwardTests(SimpleTestCase):

    def setUp(self):
        self.config = ModelConfig(**TINY_CONFIG)
        self.params = ModelParameters.initialize(self.config)
        self.seq = np.random.default_rng(31).normal(size=(4, 5, 2))

    def test_output_shape_and_attention(self):
        record = forward(self.seq, self.params, self.config)
        self.assertEqual(record.pred.shape, (4, 5, 3))
        self.assertEqual(record.attn_spatial.shape, (4, 2, 5, 5))
        self.assertEqual(record.attn_temporal.shape, (5, 2, 4, 4))

    def test_zero_input_is_finite(self):
        record = forward(np.zeros((4, 5, 2)), self.params, self.config)
        self.assertTrue(np.all(np.isfinite(record.pred.value)))

    def test_repeated_forward_is_bit_identical(self):
        first = forward(self.seq, ModelParameters.initialize(self.config), self.config).pred.value
        second = forward(self.seq, ModelParameters.initialize(self.config), self.config).pred.value
        np.testing.assert_array_equal(first, second)

    def test_different_seeds_differ(self):
        other = ModelParameters.initialize(self.config, seed=1)
        self.assertFalse(np.array_equal(forward(self.seq, other, self.config).pred.value,
                                        forward(self.seq, self.params, self.config).pred.value))

    def test_every_mode_is_finite_with_finite_gradients(self):
        for mode in MODES:
            config = self.config.with_overrides(mode=mode)
            bound = ModelParameters.initialize(config).bind()
            with self.subTest(mode=mode):
                pred = forward(self.seq, bound, config).pred
                self.assertEqual(pred.shape, (4, 5, 3))
                self.assertTrue(np.all(np.isfinite(pred.value)))
                nx.backward(nx.mean(nx.square(pred)))
                for name, grad in bound.gradients().items():
                    self.assertTrue(np.all(np.isfinite(grad)), name)

    def test_baseline_never_touches_priors(self):
        bound = self.params.bind()
        nx.backward(nx.sum(forward_mode(self.seq, bound, self.config, 'BASELINE')))
        grads = bound.gradients()
        for name in ('kpa.global_affinity', 'kpa.modulation', 'tpa.block0.global_affinity',
                     'tpa.block1.modulation', 'tpa.block0.transform'):
            np.testing.assert_array_equal(grads[name], 0.0, err_msg=name)
        self.assertGreater(np.abs(grads['kpa.embed']).max(), 0.0)

    def identity_prior_parameters(self):
        arrays = dict(self.params.arrays)
        arrays['kpa.global_affinity'] = np.zeros((5, 5))
        arrays['kpa.modulation'] = np.ones((5, 8))
        arrays['kpa.spatial_pos'] = np.zeros((5, 8))
        arrays['tpa.temporal_pos'] = np.zeros((4, 8))
        for b in range(2):
            arrays[f'tpa.block{b}.transform'] = np.eye(8)
            arrays[f'tpa.block{b}.global_affinity'] = np.zeros((4, 4))
            arrays[f'tpa.block{b}.modulation'] = np.ones((4, 8))
        return arrays

    def test_identity_priors_match_plain_attention_on_the_same_weights(self):
        plain = self.config.with_overrides(kpa_variant='no_prior', tpa_variant='no_prior')
        arrays = self.identity_prior_parameters()
        identity = Topologies(np.eye(5), np.eye(4))
        smd = forward(self.seq, ModelParameters(self.config, arrays), self.config, identity)
        bare = forward(self.seq, ModelParameters(plain, arrays), plain, identity)
        np.testing.assert_allclose(smd.pred.value, bare.pred.value, rtol=0, atol=DEGRADATION_TOLERANCE)

    def test_identity_priors_with_real_topologies_differ(self):
        plain = self.config.with_overrides(kpa_variant='no_prior', tpa_variant='no_prior')
        arrays = self.identity_prior_parameters()
        smd = forward(self.seq, ModelParameters(self.config, arrays), self.config).pred.value
        bare = forward(self.seq, ModelParameters(plain, arrays), plain).pred.value
        self.assertGreater(np.abs(smd - bare).max(), 1e-6)

    def test_zero_transforms_reduce_smd_to_baseline(self):
        arrays = dict(self.params.arrays)
        arrays['kpa.global_affinity'] = np.zeros((5, 5))
        arrays['kpa.modulation'] = np.ones((5, 8))
        for b in range(2):
            arrays[f'tpa.block{b}.transform'] = np.zeros((8, 8))
            arrays[f'tpa.block{b}.global_affinity'] = np.zeros((4, 4))
            arrays[f'tpa.block{b}.modulation'] = np.ones((4, 8))
        params = ModelParameters(self.config, arrays)
        identity = Topologies(np.eye(5), np.eye(4))
        smd = forward_mode(self.seq, params, self.config, 'SMD', identity).value
        baseline = forward_mode(self.seq, params, self.config, 'BASELINE', identity).value
        np.testing.assert_allclose(smd, baseline, rtol=0, atol=DEGRADATION_TOLERANCE)

    def test_no_prior_variant_ignores_global_affinity(self):
        config = self.config.with_overrides(kpa_variant='no_prior', tpa_variant='no_prior')
        params = ModelParameters.initialize(config)
        before = forward(self.seq, params, config).pred.value
        params.arrays['kpa.global_affinity'] += 1.0
        params.arrays['tpa.block0.global_affinity'] += 1.0
        np.testing.assert_array_equal(forward(self.seq, params, config).pred.value, before)

    def test_wrong_input_shape_rejected(self):
        with self.assertRaises(ShapeMismatchError):
            forward(np.zeros((4, 6, 2)), self.params, self.config)

    def test_mismatched_parameters_rejected(self):
        with self.assertRaises(ConfigurationError):
            forward(self.seq, self.params, self.config.with_overrides(depth=2))

    def test_unknown_mode_rejected(self):
        with self.assertRaises(ConfigurationError):
            forward_mode(self.seq, self.params, self.config, 'XMD')

    def test_single_block_mode_needs_its_own_parameters(self):
        with self.assertRaises(ConfigurationError):
            forward_mode(self.seq, self.params, self.config, 'SMD-S')


class ExtractAttentionTests(SimpleTestCase):

    def test_uniform_heads(self):
        record = ForwardRecord(None, np.full((3, 2, 4, 4), 0.25), np.full((4, 2, 3, 3), 1 / 3))
        spatial, temporal = extract_attention(record)
        np.testing.assert_allclose(spatial, 0.25)
        np.testing.assert_allclose(temporal, 1 / 3)

    def test_identical_heads_return_that_head(self):
        head = np.random.default_rng(32).dirichlet(np.ones(4), size=4)
        record = ForwardRecord(None, np.broadcast_to(head, (3, 2, 4, 4)), np.full((4, 2, 3, 3), 1 / 3))
        np.testing.assert_allclose(extract_attention(record)[0], head, rtol=1e-14)

    def test_rows_sum_to_one_on_a_real_forward(self):
        config = ModelConfig(**TINY_CONFIG)
        record = forward(np.random.default_rng(33).normal(size=(4, 5, 2)),
                         ModelParameters.initialize(config), config)
        spatial, temporal = extract_attention(record)
        self.assertEqual(spatial.shape, (5, 5))
        self.assertEqual(temporal.shape, (4, 4))
        np.testing.assert_allclose(spatial.sum(axis=1), 1.0, atol=ATTENTION_ROW_TOLERANCE)
        np.testing.assert_allclose(temporal.sum(axis=1), 1.0, atol=ATTENTION_ROW_TOLERANCE)

"""
Training objective, optimizer, trainer loop and gradient audit.

The long acceptance runs are skipped unless KTP_SLOW_TESTS is set.
"""

import csv
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase

from test_config import (
    DESK_CONFIG, GRADCHECK_TOLERANCE, OVERFIT_BONE_FRACTION, OVERFIT_LEARNING_RATE, OVERFIT_LR_DECAY,
    OVERFIT_STEPS, TINY_CONFIG, TREND_STEPS,
)

from .lifting import numerics as nx
from .lifting.evaluation import mpjpe
from .lifting.exceptions import ConfigurationError, FormatError, NumericalError, ShapeMismatchError
from .lifting.model import ModelConfig, ModelParameters
from .lifting.synthesis import SynthSpec, bone_lengths, synth_pair
from .lifting.topology import load_skeleton
from .lifting.training import (
    LOG_HEADER, LossWeights, OptimizerState, Trainer, TrainingClip, adam_step, gradcheck, loss_components,
    loss_mpjve, loss_temporal_consistency, loss_total, loss_wmpjpe, predict_millimetres, prepare_clip,
)
from .tests_numerics import GradientCheckMixin


def random_clips(config, count, seed=0):
    rng = np.random.default_rng(seed)
    return [TrainingClip(f'clip{i}', rng.uniform(-1, 1, size=(config.frames, config.joints, 2)),
                         rng.normal(0, 0.2, size=(config.frames, config.joints, 3)))
            for i in range(count)]


class WeightedPositionLossTests(SimpleTestCase):

    def test_exact_prediction_is_zero(self):
        gt = np.random.default_rng(40).normal(size=(3, 4, 3))
        self.assertEqual(loss_wmpjpe(gt, gt, np.ones(4)).item(), 0.0)

    def test_unit_weights_reduce_to_mpjpe(self):
        rng = np.random.default_rng(41)
        pred, gt = rng.normal(size=(5, 4, 3)), rng.normal(size=(5, 4, 3))
        self.assertAlmostEqual(loss_wmpjpe(pred, gt, np.ones(4)).item(), mpjpe(pred, gt), places=12)

    def test_weighted_offset(self):
        pred = np.array([[[3.0, 4.0, 0.0]]])
        self.assertEqual(loss_wmpjpe(pred, np.zeros((1, 1, 3)), [2.0]).item(), 10.0)

    def test_weight_count_checked(self):
        with self.assertRaises(ShapeMismatchError):
            loss_wmpjpe(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), np.ones(2))

    def test_shape_mismatch_rejected(self):
        with self.assertRaises(ShapeMismatchError):
            loss_wmpjpe(np.zeros((2, 3, 3)), np.zeros((2, 4, 3)), np.ones(3))


class TemporalLossTests(SimpleTestCase):

    def test_constant_sequence_is_zero(self):
        frame = np.random.default_rng(42).normal(size=(1, 4, 3))
        self.assertEqual(loss_temporal_consistency(np.repeat(frame, 5, axis=0)).item(), 0.0)

    def test_single_unit_step(self):
        pred = np.zeros((2, 4, 3))
        pred[1, 2, 0] = 1.0
        self.assertAlmostEqual(loss_temporal_consistency(pred).item(), 0.25, places=15)

    def test_quadratic_in_scale(self):
        pred = np.random.default_rng(43).normal(size=(6, 3, 3))
        base = loss_temporal_consistency(pred).item()
        self.assertAlmostEqual(loss_temporal_consistency(3.0 * pred).item(), 9.0 * base, places=10)

    def test_single_frame_warns_and_returns_zero(self):
        with self.assertLogs('ktpformer.lifting.training', 'WARNING'):
            self.assertEqual(loss_temporal_consistency(np.ones((1, 4, 3))).item(), 0.0)


class VelocityLossTests(SimpleTestCase):

    def test_exact_prediction_is_zero(self):
        gt = np.random.default_rng(44).normal(size=(4, 3, 3))
        self.assertEqual(loss_mpjve(gt, gt).item(), 0.0)

    def test_constant_offset_is_zero(self):
        gt = np.random.default_rng(45).normal(size=(4, 3, 3))
        self.assertAlmostEqual(loss_mpjve(gt + np.array([10.0, -2.0, 3.0]), gt).item(), 0.0, places=12)

    def test_single_unit_velocity_error(self):
        pred = np.zeros((2, 5, 3))
        pred[1, 0, 1] = 1.0
        self.assertAlmostEqual(loss_mpjve(pred, np.zeros((2, 5, 3))).item(), 0.2, places=15)

    def test_single_frame_warns_and_returns_zero(self):
        with self.assertLogs('ktpformer.lifting.training', 'WARNING'):
            self.assertEqual(loss_mpjve(np.ones((1, 2, 3)), np.zeros((1, 2, 3))).item(), 0.0)


class TotalLossTests(GradientCheckMixin, SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(46)
        self.pred = self.rng.normal(size=(4, 3, 3))
        self.gt = self.rng.normal(size=(4, 3, 3))

    def test_zero_lambdas_leave_position_term(self):
        weights = LossWeights(np.array([1.0, 2.0, 0.5]), 0.0, 0.0)
        self.assertEqual(loss_total(self.pred, self.gt, weights).item(),
                         loss_wmpjpe(self.pred, self.gt, weights.joint_weights).item())

    def test_exact_prediction_leaves_smoothness_term(self):
        weights = LossWeights(np.ones(3), 0.1, 1.0)
        parts = loss_components(self.gt, self.gt, weights)
        self.assertEqual(parts.wmpjpe.item(), 0.0)
        self.assertEqual(parts.velocity.item(), 0.0)
        self.assertAlmostEqual(parts.total.item(), 0.1 * loss_temporal_consistency(self.gt).item(), places=14)

    def test_non_negative(self):
        weights = LossWeights(np.ones(3), 0.3, 0.7)
        for _ in range(20):
            pred, gt = self.rng.normal(size=(3, 3, 3)), self.rng.normal(size=(3, 3, 3))
            self.assertGreaterEqual(loss_total(pred, gt, weights).item(), 0.0)

    def test_gradient_matches_finite_differences(self):
        weights = LossWeights(np.array([1.0, 2.0, 0.5]), 0.1, 1.0)
        self.assertGradientMatches(lambda p: loss_total(p, self.gt, weights), self.pred, GRADCHECK_TOLERANCE)

    def test_invalid_weights_rejected(self):
        with self.assertRaises(ConfigurationError):
            LossWeights(np.array([1.0, 0.0]))
        with self.assertRaises(ConfigurationError):
            LossWeights(np.ones(2), lambda_t=-1.0)


class AdamTests(SimpleTestCase):

    def setUp(self):
        self.config = ModelConfig(**TINY_CONFIG)
        self.params = ModelParameters.initialize(self.config)

    def zero_grads(self):
        return {name: np.zeros_like(a) for name, a in self.params.items()}

    def test_learning_rate_schedule(self):
        state = OptimizerState.for_parameters(self.params)
        self.assertEqual(state.learning_rate(0), 7e-5)
        self.assertAlmostEqual(state.learning_rate(1), 6.93e-5, places=15)

    def test_zero_gradients_leave_parameters_unchanged(self):
        before = self.params.copy()
        adam_step(self.params, self.zero_grads(), OptimizerState.for_parameters(self.params))
        for name, array in self.params.items():
            np.testing.assert_array_equal(array, before.arrays[name], err_msg=name)

    def test_first_step_moves_by_learning_rate(self):
        state = OptimizerState.for_parameters(self.params, self.config.with_overrides(learning_rate=0.1))
        self.params.arrays['head.bias'][:] = 1.0
        grads = self.zero_grads()
        grads['head.bias'] = 2.0 * self.params.arrays['head.bias']
        lr = adam_step(self.params, grads, state)
        self.assertEqual(lr, 0.1)
        np.testing.assert_allclose(self.params.arrays['head.bias'], 0.9, atol=1e-8)
        self.assertEqual(state.step, 1)

    def test_non_finite_gradient_aborts_before_updating(self):
        before = self.params.copy()
        state = OptimizerState.for_parameters(self.params)
        grads = {name: np.ones_like(a) for name, a in self.params.items()}
        grads['tpa.block1.modulation'][0, 0] = np.nan
        with self.assertRaises(NumericalError) as ctx:
            adam_step(self.params, grads, state)
        self.assertEqual(ctx.exception.parameter, 'tpa.block1.modulation')
        self.assertEqual(state.step, 0)
        for name, array in self.params.items():
            np.testing.assert_array_equal(array, before.arrays[name])

    def test_frozen_parameters_are_skipped(self):
        before = self.params.copy()
        grads = {name: np.ones_like(a) for name, a in self.params.items()}
        adam_step(self.params, grads, OptimizerState.for_parameters(self.params),
                  frozen={'kpa.global_affinity'})
        np.testing.assert_array_equal(self.params.arrays['kpa.global_affinity'],
                                      before.arrays['kpa.global_affinity'])
        self.assertFalse(np.array_equal(self.params.arrays['kpa.embed'], before.arrays['kpa.embed']))


class OptimizerStateFileTests(SimpleTestCase):

    def setUp(self):
        self.config = ModelConfig(**TINY_CONFIG)
        self.params = ModelParameters.initialize(self.config)
        self.state = OptimizerState.for_parameters(self.params)
        rng = np.random.default_rng(47)
        adam_step(self.params, {name: rng.normal(size=a.shape) for name, a in self.params.items()}, self.state, 3)
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / 'run.opt'

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_is_bit_exact(self):
        self.state.epoch = 4
        self.state.save(self.path)
        loaded = OptimizerState.load(self.path, self.params)
        self.assertEqual((loaded.step, loaded.epoch, loaded.beta1, loaded.beta2, loaded.eps, loaded.base_lr,
                          loaded.decay),
                         (self.state.step, 4, self.state.beta1, self.state.beta2, self.state.eps,
                          self.state.base_lr, self.state.decay))
        self.assertEqual(list(loaded.first_moment), list(self.state.first_moment))
        for name in self.state.first_moment:
            np.testing.assert_array_equal(loaded.first_moment[name], self.state.first_moment[name])
            np.testing.assert_array_equal(loaded.second_moment[name], self.state.second_moment[name])

    def test_truncated_file_rejected(self):
        self.state.save(self.path)
        self.path.write_bytes(self.path.read_bytes()[:-5])
        with self.assertRaises(FormatError):
            OptimizerState.load(self.path, self.params)

    def test_bad_magic_rejected(self):
        self.path.write_bytes(b'NOPE' + bytes(40))
        with self.assertRaises(FormatError) as ctx:
            OptimizerState.load(self.path)
        self.assertEqual(ctx.exception.byte_offset, 0)

    def test_state_for_another_model_rejected(self):
        self.state.save(self.path)
        other = ModelParameters.initialize(self.config.with_overrides(channels=4))
        with self.assertRaises(FormatError):
            OptimizerState.load(self.path, other)


class TrainerTests(SimpleTestCase):

    def setUp(self):
        self.config = ModelConfig(**dict(TINY_CONFIG, batch_size=2, epochs=2, learning_rate=1e-3))

    def test_loss_decreases_on_a_fixed_clip(self):
        config = self.config.with_overrides(batch_size=1, epochs=40)
        params = ModelParameters.initialize(config)
        result = Trainer(config, params, random_clips(config, 1)).run()
        self.assertEqual(result.steps, 40)
        self.assertLess(result.history[-1].loss_total, result.history[0].loss_total)

    def test_worker_count_does_not_change_the_result(self):
        trained = []
        for workers in (1, 3):
            config = self.config.with_overrides(batch_size=4, workers=workers)
            params = ModelParameters.initialize(config)
            Trainer(config, params, random_clips(config, 4)).run()
            trained.append(params)
        for name, array in trained[0].items():
            np.testing.assert_array_equal(array, trained[1].arrays[name], err_msg=name)

    def test_runs_are_repeatable(self):
        results = []
        for _ in range(2):
            params = ModelParameters.initialize(self.config)
            results.append((Trainer(self.config, params, random_clips(self.config, 3)).run(), params))
        self.assertEqual(results[0][0].history, results[1][0].history)
        np.testing.assert_array_equal(results[0][1].arrays['head.weight'], results[1][1].arrays['head.weight'])

    def test_epoch_batches_cover_every_clip(self):
        trainer = Trainer(self.config, ModelParameters.initialize(self.config), random_clips(self.config, 5))
        for epoch in range(3):
            batches = trainer.batches(epoch)
            self.assertEqual([len(b) for b in batches], [2, 2, 1])
            self.assertEqual(sorted(c.name for b in batches for c in b), [f'clip{i}' for i in range(5)])

    def test_loss_log(self):
        with tempfile.TemporaryDirectory() as tmp:
            log_path = Path(tmp) / 'loss.csv'
            trainer = Trainer(self.config, ModelParameters.initialize(self.config), random_clips(self.config, 3),
                              log_path=log_path)
            result = trainer.run()
            with open(log_path, newline='') as handle:
                rows = list(csv.reader(handle))
        self.assertEqual(rows[0], LOG_HEADER)
        self.assertEqual(len(rows) - 1, result.steps)
        self.assertEqual(result.steps, 4)
        self.assertEqual(rows[1][:2], ['1', '0'])
        self.assertEqual(float(rows[-1][3]), result.final_loss)
        self.assertEqual(float(rows[-1][2]), 1e-3 * 0.99)

    def test_max_steps_stops_early(self):
        config = self.config.with_overrides(epochs=5, max_steps=3)
        result = Trainer(config, ModelParameters.initialize(config), random_clips(config, 3)).run()
        self.assertEqual(result.steps, 3)
        self.assertEqual(result.epochs, 2)

    def test_single_clip_schedule_anneals_every_step(self):
        config = self.config.with_overrides(batch_size=1, epochs=5, learning_rate=OVERFIT_LEARNING_RATE,
                                            lr_decay=OVERFIT_LR_DECAY)
        trainer = Trainer(config, ModelParameters.initialize(config), random_clips(config, 1))
        result = trainer.run()
        self.assertEqual([r.lr for r in result.history],
                         [OVERFIT_LEARNING_RATE * OVERFIT_LR_DECAY ** k for k in range(5)])
        self.assertLess(trainer.state.learning_rate(OVERFIT_STEPS - 1), 2e-5)

    def test_partial_epoch_is_not_counted_as_completed(self):
        config = self.config.with_overrides(epochs=5, max_steps=3)
        trainer = Trainer(config, ModelParameters.initialize(config), random_clips(config, 3))
        trainer.run()
        self.assertEqual(trainer.state.epoch, 1)

    def test_resumed_run_matches_an_uninterrupted_one(self):
        clips = random_clips(self.config, 3)
        straight = ModelParameters.initialize(self.config.with_overrides(epochs=4))
        Trainer(self.config.with_overrides(epochs=4), straight, clips).run()

        split = ModelParameters.initialize(self.config)
        first = Trainer(self.config, split, clips)
        first.run()
        self.assertEqual(first.state.epoch, 2)
        second = Trainer(self.config, split, clips, state=first.state)
        result = second.run()
        self.assertEqual([r.epoch for r in result.history], [2, 2, 3, 3])
        self.assertEqual(result.history[0].lr, 1e-3 * 0.99 ** 2)
        self.assertEqual(second.state.epoch, 4)
        for name, array in straight.items():
            np.testing.assert_array_equal(array, split.arrays[name], err_msg=name)

    def test_frozen_global_affinity_stays_zero(self):
        config = self.config.with_overrides(kpa_variant='no_global')
        params = ModelParameters.initialize(config)
        Trainer(config, params, random_clips(config, 2)).run()
        np.testing.assert_array_equal(params.arrays['kpa.global_affinity'], 0.0)

    def test_mismatched_clip_rejected(self):
        other = ModelConfig(**dict(TINY_CONFIG, frames=5))
        with self.assertRaises(ShapeMismatchError):
            Trainer(self.config, ModelParameters.initialize(self.config), random_clips(other, 1))

    def test_empty_clip_set_rejected(self):
        with self.assertRaises(ConfigurationError):
            Trainer(self.config, ModelParameters.initialize(self.config), [])


class GradcheckTests(SimpleTestCase):

    def setUp(self):
        self.config = ModelConfig(**TINY_CONFIG)

    def test_tiny_model_passes(self):
        report = gradcheck(self.config, GRADCHECK_TOLERANCE)
        self.assertTrue(report.passed, [(g.name, g.max_rel_error) for g in report.failures])

    def test_every_group_reported_once(self):
        report = gradcheck(self.config, GRADCHECK_TOLERANCE, max_entries=2)
        self.assertEqual([g.name for g in report.groups], ModelParameters.initialize(self.config).names())
        self.assertTrue(all(g.entries <= 2 for g in report.groups))

    def test_corrupted_backward_rule_is_caught(self):
        def wrong_gelu(node, g):
            return (g,)

        with mock.patch.dict(nx.BACKWARD_RULES, {'gelu': wrong_gelu}):
            report = gradcheck(self.config, GRADCHECK_TOLERANCE, max_entries=4)
        self.assertFalse(report.passed)
        self.assertIn('encoder.entry_spatial.mlp.fc1.weight', [g.name for g in report.failures])

    def test_every_mode_passes(self):
        for mode in ('UMD', 'PMD', 'SMD-S', 'BASELINE'):
            with self.subTest(mode=mode):
                report = gradcheck(self.config.with_overrides(mode=mode), GRADCHECK_TOLERANCE, max_entries=6)
                self.assertTrue(report.passed, [(g.name, g.max_rel_error) for g in report.failures])


@unittest.skipUnless(settings.KTP_SLOW_TESTS, 'set KTP_SLOW_TESTS=True for the long training runs')
class AcceptanceTrainingTests(SimpleTestCase):

    def setUp(self):
        self.pair = synth_pair(SynthSpec(seed=1, frames=27, noise_std=0.0, name='overfit'))
        self.clip = prepare_clip(self.pair)

    def overfit(self, mode):
        config = ModelConfig(**dict(DESK_CONFIG, mode=mode, batch_size=1, epochs=OVERFIT_STEPS,
                                    learning_rate=OVERFIT_LEARNING_RATE, lr_decay=OVERFIT_LR_DECAY,
                                    lambda_t=0.0, lambda_m=0.0))
        params = ModelParameters.initialize(config)
        result = Trainer(config, params, [self.clip]).run()
        pred = predict_millimetres(params, config, self.clip.inputs)
        return result, mpjpe(pred, self.clip.targets * 1000.0)

    def test_canonical_model_overfits_one_clip(self):
        _, error = self.overfit('SMD')
        mean_bone = bone_lengths(self.pair.gt3d.data, load_skeleton()).mean()
        self.assertLess(error, OVERFIT_BONE_FRACTION * mean_bone)

    def test_baseline_converges_under_the_same_budget(self):
        result, error = self.overfit('BASELINE')
        self.assertTrue(np.isfinite(error))
        self.assertTrue(all(np.isfinite(r.loss_total) for r in result.history))
        self.assertLess(result.history[-1].loss_total, result.history[0].loss_total)

    def test_smoothed_loss_trends_down(self):
        config = ModelConfig(**dict(DESK_CONFIG, batch_size=1, epochs=TREND_STEPS))
        result = Trainer(config, ModelParameters.initialize(config), [self.clip]).run()
        losses = np.array([r.loss_total for r in result.history])
        smoothed = np.convolve(losses, np.ones(20) / 20, mode='valid')
        block_means = smoothed[::20]
        self.assertTrue(np.all(np.diff(block_means) < 0), block_means)

"""
Evaluation protocols and the Procrustes alignment.
"""

import csv
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from scipy.spatial.transform import Rotation

from test_config import (
    OFFSET_FIXTURE_MPJPE, OFFSET_FIXTURE_PCK, RANDOM_PAIR_COUNT, SIMILARITY_INVARIANCE_TOLERANCE,
)

from .lifting.evaluation import (
    AUC_SWEEP, align_sequence, evaluate, evaluate_sequences, joint_errors, mpjpe, mpjve_metric, p_mpjpe,
    pck_auc, procrustes_align, similarity_transform, write_metric_csv, write_per_joint_csv,
)
from .lifting.exceptions import ConfigurationError, ShapeMismatchError


def similarity(points, rotation, scale, translation):
    return scale * points @ rotation.T + translation


def grid_search_alignment_error(pred_frame, gt_frame, rotations):
    """Best squared-error similarity fit over a fixed rotation sample; returns its mean joint error."""
    centered_pred = pred_frame - pred_frame.mean(axis=0)
    centered_gt = gt_frame - gt_frame.mean(axis=0)
    rotated = np.einsum('mij,nj->mni', rotations, centered_pred)
    scales = np.clip(np.einsum('mni,ni->m', rotated, centered_gt) / np.sum(centered_pred ** 2), 0.0, None)
    fitted = scales[:, None, None] * rotated
    best = np.argmin(np.sum((fitted - centered_gt) ** 2, axis=(1, 2)))
    return float(np.mean(np.linalg.norm(fitted[best] - centered_gt, axis=-1)))


class MPJPETests(SimpleTestCase):

    def test_exact_prediction_is_zero(self):
        gt = np.random.default_rng(50).normal(size=(3, 4, 3))
        self.assertEqual(mpjpe(gt, gt), 0.0)

    def test_offset_fixture(self):
        gt = np.zeros((1, 2, 3))
        pred = gt.copy()
        pred[0, 1] = [3.0, 4.0, 0.0]
        self.assertEqual(mpjpe(pred, gt), OFFSET_FIXTURE_MPJPE)

    def test_rigid_motion_of_both_inputs(self):
        rng = np.random.default_rng(51)
        pred, gt = rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 5, 3))
        rotation = Rotation.random(None, 52).as_matrix()
        offset = rng.normal(size=3)
        moved = mpjpe(similarity(pred, rotation, 1.0, offset), similarity(gt, rotation, 1.0, offset))
        self.assertAlmostEqual(moved, mpjpe(pred, gt), places=12)

    def test_symmetric_in_its_inputs(self):
        rng = np.random.default_rng(53)
        pred, gt = rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 5, 3))
        self.assertEqual(mpjpe(pred, gt), mpjpe(gt, pred))
        self.assertAlmostEqual(mpjve_metric(pred, gt), mpjve_metric(gt, pred), places=14)

    def test_shape_mismatch_rejected(self):
        with self.assertRaises(ShapeMismatchError):
            joint_errors(np.zeros((2, 3, 3)), np.zeros((2, 3, 2)))


class ProcrustesTests(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(54)

    def test_identical_frames(self):
        gt = self.rng.normal(size=(6, 3))
        np.testing.assert_allclose(procrustes_align(gt, gt), gt, atol=1e-12)

    def test_recovers_similarity_transform(self):
        gt = self.rng.normal(size=(17, 3))
        rotation = Rotation.random(None, 55).as_matrix()
        pred = similarity(gt, rotation, 2.0, np.array([100.0, -20.0, 5.0]))
        result = similarity_transform(pred, gt)
        np.testing.assert_allclose(result.aligned, gt, atol=1e-9)
        self.assertAlmostEqual(result.scale, 0.5, places=12)
        np.testing.assert_allclose(result.rotation, rotation.T, atol=1e-12)
        self.assertFalse(result.degenerate)

    def test_rotation_is_proper(self):
        for _ in range(50):
            result = similarity_transform(self.rng.normal(size=(5, 3)), self.rng.normal(size=(5, 3)))
            self.assertAlmostEqual(np.linalg.det(result.rotation), 1.0, places=10)
            self.assertGreater(result.scale, 0.0)

    def test_alignment_never_increases_error(self):
        for _ in range(RANDOM_PAIR_COUNT):
            pred, gt = self.rng.normal(size=(1, 6, 3)), self.rng.normal(size=(1, 6, 3))
            self.assertLessEqual(p_mpjpe(pred, gt), mpjpe(pred, gt) + 1e-9)

    def test_invariant_under_similarity_of_prediction(self):
        pred, gt = self.rng.normal(size=(3, 8, 3)), self.rng.normal(size=(3, 8, 3))
        rotation = Rotation.random(None, 56).as_matrix()
        moved = similarity(pred, rotation, 3.7, np.array([-50.0, 10.0, 400.0]))
        self.assertLessEqual(abs(p_mpjpe(moved, gt) - p_mpjpe(pred, gt)), SIMILARITY_INVARIANCE_TOLERANCE)

    def test_reflections_only_when_allowed(self):
        gt = self.rng.normal(size=(1, 7, 3))
        mirrored = gt * np.array([-1.0, 1.0, 1.0])
        self.assertGreater(p_mpjpe(mirrored, gt), 1e-3)
        self.assertLess(p_mpjpe(mirrored, gt, allow_reflection=True), 1e-9)
        result = similarity_transform(mirrored[0], gt[0], allow_reflection=True)
        self.assertAlmostEqual(np.linalg.det(result.rotation), -1.0, places=10)

    def test_matches_brute_force_search(self):
        rotations = Rotation.random(60000, 57).as_matrix()
        for _ in range(5):
            pred, gt = self.rng.normal(size=(5, 3)), self.rng.normal(size=(5, 3))
            exact = p_mpjpe(pred[None], gt[None])
            searched = grid_search_alignment_error(pred, gt, rotations)
            self.assertLess(abs(searched - exact), 0.05 * exact)

    def test_collinear_points_fall_back_to_translation(self):
        line = np.outer(np.arange(4.0), [1.0, 2.0, 0.5])
        gt = self.rng.normal(size=(4, 3))
        result = similarity_transform(line, gt)
        self.assertTrue(result.degenerate)
        np.testing.assert_array_equal(result.rotation, np.eye(3))
        np.testing.assert_allclose(result.aligned.mean(axis=0), gt.mean(axis=0), atol=1e-12)

    def test_two_points_are_degenerate(self):
        self.assertTrue(similarity_transform(np.eye(3)[:2], np.ones((2, 3))).degenerate)

    def test_sequence_counts_degenerate_frames(self):
        pred = self.rng.normal(size=(3, 4, 3))
        pred[1] = 0.0
        with self.assertLogs('ktpformer.lifting.evaluation', 'WARNING'):
            _, degenerate = align_sequence(pred, self.rng.normal(size=(3, 4, 3)))
        self.assertEqual(degenerate, 1)


class PCKTests(SimpleTestCase):

    def test_perfect_prediction(self):
        gt = np.random.default_rng(58).normal(size=(2, 4, 3))
        self.assertEqual(pck_auc(gt, gt), (100.0, 100.0))

    def test_offset_fixture(self):
        gt = np.zeros((1, 2, 3))
        pred = gt.copy()
        pred[0, 0, 2] = 200.0
        self.assertEqual(pck_auc(pred, gt, 150.0)[0], OFFSET_FIXTURE_PCK)

    def test_joint_on_the_threshold_counts(self):
        pred = np.zeros((1, 1, 3))
        pred[0, 0, 0] = 150.0
        self.assertEqual(pck_auc(pred, np.zeros((1, 1, 3)), 150.0)[0], 100.0)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(59)
        pred, gt = rng.normal(scale=100.0, size=(5, 17, 3)), np.zeros((5, 17, 3))
        values = [pck_auc(pred, gt, t)[0] for t in AUC_SWEEP[1:]]
        self.assertTrue(all(a <= b for a, b in zip(values, values[1:])))

    def test_invalid_sweep_and_threshold(self):
        with self.assertRaises(ConfigurationError):
            pck_auc(np.zeros((1, 2, 3)), np.zeros((1, 2, 3)), sweep=[])
        with self.assertRaises(ConfigurationError):
            pck_auc(np.zeros((1, 2, 3)), np.zeros((1, 2, 3)), threshold=0.0)


class VelocityMetricTests(SimpleTestCase):

    def test_identical_and_offset_sequences(self):
        gt = np.random.default_rng(60).normal(size=(4, 3, 3))
        self.assertEqual(mpjve_metric(gt, gt), 0.0)
        self.assertAlmostEqual(mpjve_metric(gt + 7.0, gt), 0.0, places=12)

    def test_single_unit_velocity_error(self):
        pred = np.zeros((2, 5, 3))
        pred[1, 0, 1] = 1.0
        self.assertAlmostEqual(mpjve_metric(pred, np.zeros((2, 5, 3))), 0.2, places=15)

    def test_single_frame_rejected(self):
        with self.assertRaises(ConfigurationError):
            mpjve_metric(np.zeros((1, 2, 3)), np.zeros((1, 2, 3)))


class ReportTests(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(61)

    def test_report_invariants_on_random_data(self):
        for _ in range(50):
            pred = self.rng.normal(scale=80.0, size=(3, 6, 3))
            gt = self.rng.normal(scale=80.0, size=(3, 6, 3))
            report = evaluate(pred, gt)
            self.assertLessEqual(report.p_mpjpe, report.mpjpe + 1e-9)
            self.assertTrue(0.0 <= report.pck <= 100.0 and 0.0 <= report.auc <= 100.0)
            self.assertEqual(report.per_joint.shape, (6,))
            self.assertEqual(report.per_frame.shape, (3,))

    def test_single_frame_report_has_no_velocity(self):
        report = evaluate(np.ones((1, 4, 3)), np.zeros((1, 4, 3)))
        self.assertIsNone(report.mpjve)
        self.assertNotIn('mpjve', dict(report.to_rows()))

    def test_pooling_weights_clips_by_frames(self):
        short = (self.rng.normal(size=(2, 4, 3)), self.rng.normal(size=(2, 4, 3)))
        long = (self.rng.normal(size=(6, 4, 3)), self.rng.normal(size=(6, 4, 3)))
        result = evaluate_sequences([('short', *short), ('long', *long)])
        joined = evaluate(np.concatenate([short[0], long[0]]), np.concatenate([short[1], long[1]]))
        self.assertAlmostEqual(result.overall.mpjpe, joined.mpjpe, places=12)
        self.assertAlmostEqual(result.overall.p_mpjpe, joined.p_mpjpe, places=12)
        np.testing.assert_allclose(result.overall.per_joint, joined.per_joint, rtol=1e-12)
        self.assertEqual(set(result.per_clip), {'short', 'long'})

    def test_no_clips_rejected(self):
        with self.assertRaises(ConfigurationError):
            evaluate_sequences([])

    def test_csv_writers(self):
        report = evaluate(self.rng.normal(size=(3, 2, 3)), self.rng.normal(size=(3, 2, 3)))
        with tempfile.TemporaryDirectory() as tmp:
            metrics_path = Path(tmp) / 'report.csv'
            joints_path = Path(tmp) / 'joints.csv'
            write_metric_csv(report, metrics_path)
            write_per_joint_csv(report, joints_path, ['pelvis', 'hip'])
            with open(metrics_path, newline='') as handle:
                metrics = list(csv.reader(handle))
            with open(joints_path, newline='') as handle:
                joints = list(csv.reader(handle))
        self.assertEqual(metrics[0], ['metric', 'value'])
        self.assertEqual(float(dict(metrics[1:])['mpjpe']), report.mpjpe)
        self.assertEqual(joints, [['joint', 'name', 'mpjpe'],
                                  ['0', 'pelvis', repr(float(report.per_joint[0]))],
                                  ['1', 'hip', repr(float(report.per_joint[1]))]])

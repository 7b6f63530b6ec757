"""
Skeleton graphs, local topologies and the symmetrised combination.
"""

import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from test_config import RANDOM_PAIR_COUNT, SYMMETRY_TOLERANCE

from .lifting import numerics as nx
from .lifting.exceptions import ConfigurationError, FormatError, ShapeMismatchError
from .lifting.topology import (
    AffinityPair, SkeletonGraph, build_spatial_local, build_temporal_local, chain_skeleton, combine,
    load_skeleton, parse_skeleton, resolve_skeleton, save_skeleton,
)


class SkeletonGraphTests(SimpleTestCase):

    def test_default_skeleton_has_seventeen_joints(self):
        skeleton = load_skeleton()
        self.assertEqual(skeleton.joint_count, 17)
        self.assertEqual(len(skeleton.edges), 16)
        self.assertEqual(skeleton.joint_names[0], 'pelvis')

    def test_default_skeleton_is_a_tree(self):
        parents = load_skeleton().parents()
        self.assertEqual(parents[0], -1)
        self.assertEqual(parents[3], 2)
        self.assertEqual(parents[16], 15)

    def test_rejects_self_edge(self):
        with self.assertRaises(ConfigurationError):
            SkeletonGraph(3, ((0, 0),))

    def test_rejects_duplicate_edge(self):
        with self.assertRaises(ConfigurationError):
            SkeletonGraph(3, ((0, 1), (1, 0)))

    def test_rejects_out_of_range_edge(self):
        with self.assertRaises(ConfigurationError):
            SkeletonGraph(2, ((0, 2),))

    def test_disconnected_skeleton_has_no_parents(self):
        with self.assertRaises(ConfigurationError):
            SkeletonGraph(3, ((0, 1),)).parents()

    def test_resolve_falls_back_to_chain(self):
        self.assertEqual(resolve_skeleton('h36m', 5), chain_skeleton(5))
        with self.assertRaises(ConfigurationError):
            resolve_skeleton(str(Path(__file__).parent / 'data' / 'h36m_17.skel'), 16)


class SkeletonFileTests(SimpleTestCase):

    def test_save_then_load(self):
        skeleton = chain_skeleton(6)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'chain.skel'
            save_skeleton(skeleton, path)
            self.assertEqual(load_skeleton(path), skeleton)

    def test_bad_magic_reports_offset(self):
        with self.assertRaises(FormatError) as ctx:
            parse_skeleton('not-a-skeleton v1 2\n')
        self.assertEqual(ctx.exception.byte_offset, 0)

    def test_bad_edge_line_reports_its_offset(self):
        text = 'ktp-skel v1 2\n0 a\n1 b\nedges:\n0 x\n'
        with self.assertRaises(FormatError) as ctx:
            parse_skeleton(text)
        self.assertEqual(ctx.exception.byte_offset, text.index('0 x'))


class LocalTopologyTests(SimpleTestCase):

    def test_two_joint_chain(self):
        np.testing.assert_array_equal(build_spatial_local(chain_skeleton(2)), [[1, 1], [1, 1]])

    def test_three_joint_chain(self):
        np.testing.assert_array_equal(build_spatial_local(chain_skeleton(3)),
                                      [[1, 1, 0], [1, 1, 1], [0, 1, 1]])

    def test_default_skeleton_is_symmetric(self):
        local = build_spatial_local(load_skeleton())
        np.testing.assert_array_equal(local, local.T)
        self.assertTrue(set(np.unique(local)) <= {0.0, 1.0})

    def test_temporal_band(self):
        np.testing.assert_array_equal(build_temporal_local(3, 1), [[1, 1, 0], [1, 1, 1], [0, 1, 1]])
        np.testing.assert_array_equal(build_temporal_local(1, 1), [[1]])
        np.testing.assert_array_equal(build_temporal_local(5, 4), np.ones((5, 5)))

    def test_zero_frames_rejected(self):
        with self.assertRaises(ConfigurationError):
            build_temporal_local(0, 1)


class CombineTests(SimpleTestCase):

    def test_zero_global_returns_local(self):
        local = build_spatial_local(load_skeleton())
        out = combine(AffinityPair(local, nx.Tensor(np.zeros((17, 17)))))
        np.testing.assert_array_equal(out.value, local)

    def test_hand_values(self):
        pair = AffinityPair(np.array([[0.0, 1.0], [1.0, 0.0]]), nx.Tensor([[0.2, 0.4], [0.6, 0.8]]))
        np.testing.assert_allclose(combine(pair).value, [[0.2, 1.5], [1.5, 0.8]], rtol=1e-12)

    def test_random_globals_are_symmetrised(self):
        rng = np.random.default_rng(0)
        local = build_temporal_local(6, 2)
        for _ in range(RANDOM_PAIR_COUNT):
            out = combine(AffinityPair(local, nx.Tensor(rng.normal(size=(6, 6))))).value
            self.assertLessEqual(np.max(np.abs(out - out.T)), SYMMETRY_TOLERANCE)

    def test_shape_mismatch_rejected(self):
        with self.assertRaises(ShapeMismatchError):
            AffinityPair(np.eye(3), nx.Tensor(np.zeros((2, 2))))

    def test_asymmetric_local_rejected(self):
        local = np.eye(3)
        local[0, 1] = 1.0
        with self.assertRaisesMessage(ConfigurationError, 'symmetric'):
            AffinityPair(local, nx.Tensor(np.zeros((3, 3))))

    def test_non_binary_local_rejected(self):
        with self.assertRaisesMessage(ConfigurationError, '0 or 1'):
            AffinityPair(np.full((2, 2), 0.5), nx.Tensor(np.zeros((2, 2))))

    def test_built_locals_are_accepted(self):
        AffinityPair(build_spatial_local(load_skeleton()), nx.Tensor(np.zeros((17, 17))))
        AffinityPair(build_temporal_local(9, 3), nx.Tensor(np.zeros((9, 9))))

    def test_gradient_flows_to_global(self):
        glob = nx.parameter(np.zeros((3, 3)))
        upstream = np.arange(9.0).reshape(3, 3)
        nx.backward(nx.sum(nx.mul(combine(AffinityPair(np.eye(3), glob)), upstream)))
        np.testing.assert_allclose(glob.grad, (upstream + upstream.T) / 2)

"""
Clip files, run configurations, checkpoints and synthetic motion.
"""

import struct
import tempfile
from pathlib import Path

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase

from test_config import BONE_LENGTH_TOLERANCE, DESK_CONFIG, TINY_CONFIG

from .lifting.checkpoint import HEADER, load_checkpoint, parse_checkpoint, save_checkpoint, serialize_checkpoint
from .lifting.clips import (
    ClipPair, PoseClip, load_clip, load_clip_pairs, parse_clip, save_clip, save_clip_pair, serialize_clip,
)
from .lifting.exceptions import ConfigurationError, FormatError
from .lifting.model import ModelConfig, ModelParameters, forward
from .lifting.run_config import (
    load_config, load_synth_spec, parse_config, parse_synth_spec, save_config, serialize_record,
)
from .lifting.synthesis import MIN_DEPTH, SynthSpec, bone_lengths, project, synth_generate, synth_pair
from .lifting.topology import chain_skeleton, load_skeleton


class ClipFileTests(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(70)
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_then_load_is_bitwise(self):
        clip = PoseClip(self.rng.normal(scale=1e3, size=(4, 3, 3)) / 7.0, 'mm', 'walk', 50.0)
        save_clip(clip, self.dir / 'walk.3d.clip')
        loaded = load_clip(self.dir / 'walk.3d.clip')
        np.testing.assert_array_equal(loaded.data, clip.data)
        self.assertEqual((loaded.unit, loaded.name, loaded.frame_rate), ('mm', 'walk', 50.0))

    def test_image_metadata_round_trips(self):
        clip = PoseClip(self.rng.uniform(0, 1000, size=(2, 3, 2)), 'px', image_size=(1000, 1002))
        self.assertEqual(parse_clip(serialize_clip(clip)).image_size, (1000, 1002))

    def test_truncated_payload_names_both_counts(self):
        text = serialize_clip(PoseClip(np.zeros((3, 2, 3)), 'mm'))
        truncated = ''.join(text.splitlines(keepends=True)[:-2])
        with self.assertRaises(FormatError) as ctx:
            parse_clip(truncated)
        self.assertIn('4 rows', str(ctx.exception))
        self.assertIn('6', str(ctx.exception))
        self.assertEqual(ctx.exception.byte_offset, len(truncated.encode('utf-8')))

    def test_four_dimensional_header_rejected(self):
        with self.assertRaises(FormatError):
            parse_clip('ktp-clip v1 1 1 4 mm\n1 2 3 4\n')

    def test_bad_magic_and_version(self):
        with self.assertRaises(FormatError) as ctx:
            parse_clip('pose-clip v1 1 1 3 mm\n1 2 3\n')
        self.assertEqual(ctx.exception.byte_offset, 0)
        with self.assertRaises(FormatError):
            parse_clip('ktp-clip v9 1 1 3 mm\n1 2 3\n')

    def test_unit_must_match_dimension(self):
        with self.assertRaises(FormatError):
            parse_clip('ktp-clip v1 1 1 3 px\n1 2 3\n')

    def test_short_row_reports_its_offset(self):
        text = 'ktp-clip v1 2 1 3 mm\n1 2 3\n4 5\n'
        with self.assertRaises(FormatError) as ctx:
            parse_clip(text)
        self.assertEqual(ctx.exception.byte_offset, text.index('4 5'))

    def test_non_finite_payload_rejected(self):
        with self.assertRaises(FormatError):
            parse_clip('ktp-clip v1 1 1 3 mm\n1 nan 3\n')

    def test_clip_pairs(self):
        for name in ('b', 'a'):
            save_clip_pair(ClipPair(name, PoseClip(np.zeros((2, 3, 2)), 'norm'), PoseClip(np.ones((2, 3, 3)), 'm')),
                           self.dir)
        self.assertEqual([pair.name for pair in load_clip_pairs(self.dir)], ['a', 'b'])

    def test_missing_partner_rejected(self):
        save_clip(PoseClip(np.zeros((2, 3, 2)), 'norm'), self.dir / 'lonely.2d.clip')
        with self.assertRaises(FormatError):
            load_clip_pairs(self.dir)

    def test_empty_and_missing_directories(self):
        with self.assertRaises(FormatError):
            load_clip_pairs(self.dir)
        with self.assertRaises(FileNotFoundError):
            load_clip_pairs(self.dir / 'absent')


class RunConfigTests(SimpleTestCase):

    def test_parse_serialize_parse_is_a_fixed_point(self):
        config = ModelConfig(**dict(TINY_CONFIG, joint_weights=(1.0, 2.5, 1.0, 0.5, 3.0), lambda_t=0.3))
        text = serialize_record(config)
        self.assertEqual(parse_config(text), config)
        self.assertEqual(serialize_record(parse_config(text)), text)

    def test_shipped_configs(self):
        for name, expected in (('tiny.cfg', TINY_CONFIG), ('desk.cfg', DESK_CONFIG)):
            config = load_config(Path(settings.KTP_CONFIG_DIR) / name)
            for key, value in expected.items():
                self.assertEqual(getattr(config, key), value, f'{name}: {key}')
        full = load_config(Path(settings.KTP_CONFIG_DIR) / 'full.cfg')
        self.assertEqual((full.frames, full.channels, full.heads, full.depth), (243, 512, 8, 7))

    def test_comments_and_partial_files(self):
        config = parse_config('# desk run\nframes = 9   # short clip\n\nmode = UMD\n')
        self.assertEqual((config.frames, config.mode, config.channels), (9, 'UMD', 64))

    def test_unknown_key_rejected(self):
        with self.assertRaises(ConfigurationError) as ctx:
            parse_config('frames = 9\ndropout = 0.1\n', 'run.cfg')
        self.assertIn('dropout', str(ctx.exception))

    def test_duplicate_key_rejected(self):
        with self.assertRaises(ConfigurationError):
            parse_config('frames = 9\nframes = 27\n')

    def test_bad_values_rejected(self):
        for text in ('frames = nine\n', 'frames 9\n', 'heads = 5\n', 'joint_weights = 1,x\n'):
            with self.subTest(text=text), self.assertRaises(ConfigurationError):
                parse_config(text)

    def test_seed_override(self):
        self.assertEqual(parse_config('seed = 3\n', seed_override=11).seed, 11)

    def test_save_config(self):
        config = ModelConfig(**DESK_CONFIG)
        with tempfile.TemporaryDirectory() as tmp:
            save_config(config, Path(tmp) / 'run.cfg')
            self.assertEqual(load_config(Path(tmp) / 'run.cfg'), config)

    def test_synth_spec_round_trip(self):
        spec = SynthSpec(seed=4, frames=9, noise_std=1.5, name='walk_x')
        self.assertEqual(parse_synth_spec(serialize_record(spec)), spec)
        shipped = load_synth_spec(Path(settings.KTP_CONFIG_DIR) / 'fixture_walk_b.spec')
        self.assertEqual((shipped.seed, shipped.frames, shipped.noise_std, shipped.name), (2, 27, 1.0, 'walk_b'))


class CheckpointTests(SimpleTestCase):

    def setUp(self):
        self.config = ModelConfig(**dict(TINY_CONFIG, mode='PMD', kpa_variant='no_global', lambda_t=0.25))
        self.params = ModelParameters.initialize(self.config)

    def test_round_trip(self):
        loaded = parse_checkpoint(serialize_checkpoint(self.params), base=self.config)
        self.assertEqual(loaded.config, self.config)
        self.assertEqual(loaded.names(), self.params.names())
        for name, array in self.params.items():
            np.testing.assert_array_equal(loaded.arrays[name], array)

    def test_header_carries_architecture(self):
        loaded = parse_checkpoint(serialize_checkpoint(self.params))
        for key in ('frames', 'joints', 'channels', 'heads', 'depth', 'mode', 'kpa_variant', 'lambda_t'):
            self.assertEqual(getattr(loaded.config, key), getattr(self.config, key), key)

    def test_loaded_model_predicts_identically(self):
        seq = np.random.default_rng(71).normal(size=(4, 5, 2))
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(self.params, Path(tmp) / 'model.ktpf')
            loaded = load_checkpoint(Path(tmp) / 'model.ktpf', self.config)
        np.testing.assert_array_equal(forward(seq, loaded, loaded.config).pred.value,
                                      forward(seq, self.params, self.config).pred.value)

    def test_bad_magic(self):
        data = b'XXXX' + serialize_checkpoint(self.params)[4:]
        with self.assertRaises(FormatError) as ctx:
            parse_checkpoint(data)
        self.assertEqual(ctx.exception.byte_offset, 0)

    def test_bad_version(self):
        data = bytearray(serialize_checkpoint(self.params))
        data[4:8] = struct.pack('<I', 9)
        with self.assertRaises(FormatError):
            parse_checkpoint(bytes(data))

    def test_unknown_mode(self):
        data = bytearray(serialize_checkpoint(self.params))
        data[28:32] = struct.pack('<I', 7)
        with self.assertRaises(FormatError):
            parse_checkpoint(bytes(data))

    def test_truncations(self):
        data = serialize_checkpoint(self.params)
        for cut in (10, HEADER.size + 4, len(data) - 3):
            with self.subTest(cut=cut), self.assertRaises(FormatError):
                parse_checkpoint(data[:cut])

    def test_trailing_bytes(self):
        with self.assertRaises(FormatError):
            parse_checkpoint(serialize_checkpoint(self.params) + b'\0')


class SynthesisTests(SimpleTestCase):

    def test_same_seed_is_identical(self):
        spec = SynthSpec(seed=5, frames=9, noise_std=2.0)
        first, second = synth_generate(spec), synth_generate(spec)
        np.testing.assert_array_equal(first[0].data, second[0].data)
        np.testing.assert_array_equal(first[1].data, second[1].data)

    def test_different_seeds_differ(self):
        self.assertFalse(np.array_equal(synth_generate(SynthSpec(seed=1, frames=5))[0].data,
                                        synth_generate(SynthSpec(seed=2, frames=5))[0].data))

    def test_noise_free_projection_is_consistent(self):
        spec = SynthSpec(seed=6, frames=9, noise_std=0.0)
        gt3d, input2d = synth_generate(spec)
        np.testing.assert_array_equal(
            project(gt3d.data, spec.focal_length, spec.image_width, spec.image_height), input2d.data)
        self.assertEqual(input2d.image_size, (1000, 1000))
        self.assertEqual((gt3d.unit, input2d.unit), ('mm', 'px'))

    def test_bone_lengths_are_constant(self):
        gt3d, _ = synth_generate(SynthSpec(seed=7, frames=27, amplitude=0.8))
        lengths = bone_lengths(gt3d.data, load_skeleton())
        self.assertLessEqual(np.max(np.abs(lengths - lengths[0])), BONE_LENGTH_TOLERANCE)
        self.assertTrue(np.all(lengths > 0))

    def test_chain_skeleton_for_other_joint_counts(self):
        gt3d, input2d = synth_generate(SynthSpec(seed=8, frames=4, joints=5))
        self.assertEqual(gt3d.data.shape, (4, 5, 3))
        self.assertEqual(input2d.data.shape, (4, 5, 2))
        lengths = bone_lengths(gt3d.data, chain_skeleton(5))
        self.assertLessEqual(np.max(np.abs(lengths - lengths[0])), BONE_LENGTH_TOLERANCE)

    def test_bone_scale(self):
        base = bone_lengths(synth_generate(SynthSpec(seed=9, frames=2))[0].data, load_skeleton())
        scaled = bone_lengths(synth_generate(SynthSpec(seed=9, frames=2, bone_scale=1.5))[0].data, load_skeleton())
        np.testing.assert_allclose(scaled, 1.5 * base, rtol=1e-12)

    def test_points_near_the_camera_rejected(self):
        with self.assertRaises(ConfigurationError) as ctx:
            project(np.array([[0.0, 0.0, MIN_DEPTH / 2]]), 1000.0, 100, 100)
        self.assertIn('camera_distance', str(ctx.exception))
        with self.assertRaises(ConfigurationError):
            synth_generate(SynthSpec(camera_distance=50.0))

    def test_invalid_specs_rejected(self):
        for changes in (dict(bone_scale=0.0), dict(amplitude=1.5), dict(frames=0), dict(name='two words')):
            with self.subTest(changes=changes), self.assertRaises(ConfigurationError):
                SynthSpec(**changes)

    def test_pair_naming(self):
        pair = synth_pair(SynthSpec(name='walk_z', frames=3))
        self.assertEqual((pair.name, pair.input2d.name, pair.gt3d.name), ('walk_z', 'walk_z', 'walk_z'))

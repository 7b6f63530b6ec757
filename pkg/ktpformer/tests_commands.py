"""
End-to-end runs of the management commands against temporary directories.
"""

import csv
import shutil
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings

from test_config import ATTENTION_ROW_TOLERANCE, TINY_CONFIG

from .lifting import numerics as nx
from .lifting.clips import load_clip, load_clip_pairs
from .lifting.model import ModelConfig, analytic_parameter_count, count_flops
from .lifting.run_config import save_config, serialize_record
from .lifting.synthesis import SynthSpec
from .management import base
from .management.commands.train import Command as TrainCommand
from .models import ExperimentRun, MetricRecord


def run_command(name, *args):
    out = StringIO()
    call_command(name, *args, '--no-progress', stdout=out, stderr=StringIO())
    return out.getvalue()


class CommandTestCase(TestCase):
    """Tiny-scale synthetic clips plus a tiny run configuration in a scratch directory."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.config_path = self.dir / 'tiny.cfg'
        save_config(ModelConfig(**TINY_CONFIG), self.config_path)
        self.specs = []
        for seed, name in ((1, 'walk_a'), (2, 'walk_b'), (3, 'walk_c')):
            path = self.dir / f'{name}.spec'
            spec = SynthSpec(seed=seed, frames=4, joints=5, skeleton='chain', noise_std=0.5, name=name)
            path.write_text(serialize_record(spec), encoding='utf-8')
            self.specs.append(str(path))
        self.clips = self.dir / 'clips'

    def tearDown(self):
        self.tmp.cleanup()

    def synth(self):
        return run_command('synth', '--spec', *self.specs, '--out', str(self.clips))

    def train(self, out='model.ktpf', *extra):
        return run_command('train', '--config', str(self.config_path), '--clips', str(self.clips),
                           '--out', str(self.dir / out), *extra)

    def assertFails(self, returncode, kind, name, *args):
        with self.assertRaises(CommandError) as ctx:
            run_command(name, *args)
        self.assertEqual(ctx.exception.returncode, returncode)
        self.assertTrue(str(ctx.exception).startswith(f'error={kind} command={name} detail="'),
                        str(ctx.exception))


class SynthCommandTests(CommandTestCase):

    def test_writes_clip_pairs(self):
        output = self.synth()
        pairs = load_clip_pairs(self.clips)
        self.assertEqual([pair.name for pair in pairs], ['walk_a', 'walk_b', 'walk_c'])
        self.assertEqual(pairs[0].input2d.data.shape, (4, 5, 2))
        self.assertEqual(pairs[0].input2d.image_size, (1000, 1000))
        self.assertIn('Wrote 3 clip pair(s)', output)

    def test_output_is_repeatable(self):
        self.synth()
        first = (self.clips / 'walk_a.2d.clip').read_bytes()
        shutil.rmtree(self.clips)
        self.synth()
        self.assertEqual((self.clips / 'walk_a.2d.clip').read_bytes(), first)

    @override_settings(KTP_SEED=9)
    def test_seed_override_applies_to_every_spec(self):
        self.synth()
        overridden = load_clip(self.clips / 'walk_a.3d.clip').data
        other = load_clip(self.clips / 'walk_b.3d.clip').data
        np.testing.assert_array_equal(overridden, other)

    def test_duplicate_names_rejected(self):
        self.assertFails(1, 'validation', 'synth', '--spec', self.specs[0], self.specs[0], '--out', str(self.clips))
        self.assertFalse(self.clips.exists())

    def test_bad_spec_key(self):
        bad = self.dir / 'bad.spec'
        bad.write_text('frames = 4\nwobble = 2\n', encoding='utf-8')
        self.assertFails(1, 'validation', 'synth', '--spec', str(bad), '--out', str(self.clips))

    def test_missing_spec_file(self):
        self.assertFails(3, 'io', 'synth', '--spec', str(self.dir / 'absent.spec'), '--out', str(self.clips))

    def test_shipped_spec_by_bare_name(self):
        run_command('synth', '--spec', 'fixture_walk_a.spec', '--out', str(self.clips))
        self.assertEqual(load_clip(self.clips / 'walk_a.3d.clip').data.shape, (27, 17, 3))


class TrainCommandTests(CommandTestCase):

    def setUp(self):
        super().setUp()
        self.synth()

    def test_writes_checkpoint_log_and_optimizer_state(self):
        output = self.train()
        self.assertTrue((self.dir / 'model.ktpf').is_file())
        self.assertTrue((self.dir / 'model.ktpf.opt').is_file())
        with open(self.dir / 'model.ktpf.log.csv', newline='') as handle:
            rows = list(csv.reader(handle))
        self.assertEqual(rows[0][:2], ['step', 'epoch'])
        self.assertEqual(len(rows), 2)
        self.assertIn('steps=1', output)

    def test_identical_runs_write_identical_checkpoints(self):
        self.train('first.ktpf')
        self.train('second.ktpf')
        self.assertEqual((self.dir / 'first.ktpf').read_bytes(), (self.dir / 'second.ktpf').read_bytes())

    def test_records_the_run(self):
        self.train('model.ktpf', '--name', 'tiny smd')
        run = ExperimentRun.objects.get()
        self.assertEqual((run.name, run.mode, run.status, run.steps), ('tiny smd', 'SMD', 'completed', 1))
        config = ModelConfig(**TINY_CONFIG)
        self.assertEqual(run.parameter_count, analytic_parameter_count(config))
        self.assertEqual(run.flop_count, count_flops(config))
        self.assertIn('channels = 8', run.config_text)
        self.assertTrue(np.isfinite(run.final_loss))

    def test_no_record(self):
        self.train('model.ktpf', '--no-record')
        self.assertFalse(ExperimentRun.objects.exists())

    @override_settings(KTP_SEED=5)
    def test_environment_seed_reaches_the_registry(self):
        self.train()
        self.assertEqual(ExperimentRun.objects.get().seed, 5)

    def test_resume_matches_an_uninterrupted_run(self):
        self.train('half.ktpf', '--no-record')
        output = self.train('resumed.ktpf', '--no-record', '--resume', str(self.dir / 'half.ktpf'))
        self.assertIn('at epoch 1, step 1', output)
        save_config(ModelConfig(**dict(TINY_CONFIG, epochs=2)), self.config_path)
        self.train('straight.ktpf', '--no-record')
        self.assertEqual((self.dir / 'resumed.ktpf').read_bytes(), (self.dir / 'straight.ktpf').read_bytes())
        self.assertEqual((self.dir / 'resumed.ktpf.opt').read_bytes(), (self.dir / 'straight.ktpf.opt').read_bytes())

    def test_resume_without_optimizer_state_warns(self):
        self.train('half.ktpf', '--no-record', '--no-optimizer-state')
        with self.assertLogs('ktpformer.management.commands.train', 'WARNING'):
            self.train('resumed.ktpf', '--no-record', '--resume', str(self.dir / 'half.ktpf'))

    def test_resume_with_another_architecture(self):
        self.train('half.ktpf', '--no-record')
        save_config(ModelConfig(**dict(TINY_CONFIG, channels=4)), self.config_path)
        self.assertFails(1, 'validation', 'train', '--config', str(self.config_path), '--clips', str(self.clips),
                         '--out', str(self.dir / 'model.ktpf'), '--resume', str(self.dir / 'half.ktpf'))

    def test_optimizer_state_alone_rejected(self):
        self.train('first.ktpf', '--no-record')
        self.assertFails(1, 'validation', 'train', '--config', str(self.config_path), '--clips', str(self.clips),
                         '--out', str(self.dir / 'model.ktpf'),
                         '--resume-optimizer', str(self.dir / 'first.ktpf.opt'))

    def test_clip_shape_mismatch(self):
        save_config(ModelConfig(**dict(TINY_CONFIG, frames=9)), self.config_path)
        self.assertFails(1, 'validation', 'train', '--config', str(self.config_path), '--clips', str(self.clips),
                         '--out', str(self.dir / 'model.ktpf'))

    def test_missing_clip_directory(self):
        self.assertFails(3, 'io', 'train', '--config', str(self.config_path), '--clips', str(self.dir / 'none'),
                         '--out', str(self.dir / 'model.ktpf'))

    def test_missing_output_directory(self):
        self.assertFails(3, 'io', 'train', '--config', str(self.config_path), '--clips', str(self.clips),
                         '--out', str(self.dir / 'nowhere' / 'model.ktpf'))

    def test_corrupt_optimizer_state(self):
        self.train('first.ktpf', '--no-record')
        broken = self.dir / 'broken.opt'
        broken.write_bytes(b'KTPO\x02')
        self.assertFails(3, 'format', 'train', '--config', str(self.config_path), '--clips', str(self.clips),
                         '--out', str(self.dir / 'model.ktpf'), '--resume', str(self.dir / 'first.ktpf'),
                         '--resume-optimizer', str(broken))


class EvalCommandTests(CommandTestCase):

    def setUp(self):
        super().setUp()
        self.synth()
        self.train('model.ktpf', '--no-record')
        self.report = self.dir / 'report.csv'

    def read_report(self):
        with open(self.report, newline='') as handle:
            return {row[0]: float(row[1]) for row in list(csv.reader(handle))[1:]}

    def test_checkpoint_evaluation(self):
        output = run_command('eval', '--ckpt', str(self.dir / 'model.ktpf'), '--clips', str(self.clips),
                             '--report', str(self.report))
        metrics = self.read_report()
        self.assertLessEqual(metrics['p_mpjpe'], metrics['mpjpe'] + 1e-9)
        self.assertIn('mpjve', metrics)
        self.assertIn(f"mpjpe={metrics['mpjpe']!r}", output)
        with open(self.dir / 'report_joints.csv', newline='') as handle:
            self.assertEqual(len(list(csv.reader(handle))), 6)

    def test_metrics_are_recorded(self):
        run_command('eval', '--ckpt', str(self.dir / 'model.ktpf'), '--clips', str(self.clips),
                    '--report', str(self.report))
        pooled = MetricRecord.objects.filter(clip_name='all')
        self.assertEqual(pooled.get(metric='mpjpe').value, self.read_report()['mpjpe'])
        self.assertEqual(set(MetricRecord.objects.values_list('clip_name', flat=True)),
                         {'all', 'walk_a', 'walk_b', 'walk_c'})

    def test_metrics_attach_to_a_run(self):
        run = ExperimentRun.objects.create(config_text='')
        run_command('eval', '--ckpt', str(self.dir / 'model.ktpf'), '--clips', str(self.clips),
                    '--report', str(self.report), '--run-id', str(run.id))
        self.assertTrue(run.metrics.filter(clip_name='all', metric='pck').exists())

    def test_unknown_run_rejected(self):
        self.assertFails(1, 'validation', 'eval', '--ckpt', str(self.dir / 'model.ktpf'), '--clips',
                         str(self.clips), '--report', str(self.report), '--run-id', '999')

    def test_ground_truth_as_predictions_scores_zero(self):
        predictions = self.dir / 'predictions'
        predictions.mkdir()
        for path in self.clips.glob('*.3d.clip'):
            shutil.copy(path, predictions / path.name)
        output = run_command('eval', '--predictions', str(predictions), '--clips', str(self.clips),
                             '--report', str(self.report), '--no-record')
        metrics = self.read_report()
        self.assertEqual(metrics['mpjpe'], 0.0)
        self.assertEqual(metrics['pck'], 100.0)
        self.assertIn('mpjpe=0.0', output)
        self.assertFalse(MetricRecord.objects.exists())

    def test_saved_predictions_score_like_the_checkpoint(self):
        saved = self.dir / 'saved'
        run_command('eval', '--ckpt', str(self.dir / 'model.ktpf'), '--clips', str(self.clips),
                    '--report', str(self.report), '--save-predictions', str(saved), '--no-record')
        direct = self.read_report()
        run_command('eval', '--predictions', str(saved), '--clips', str(self.clips),
                    '--report', str(self.report), '--no-record')
        self.assertEqual(self.read_report()['mpjpe'], direct['mpjpe'])

    def test_missing_checkpoint(self):
        self.assertFails(3, 'io', 'eval', '--ckpt', str(self.dir / 'absent.ktpf'), '--clips', str(self.clips),
                         '--report', str(self.report))

    def test_truncated_checkpoint(self):
        broken = self.dir / 'broken.ktpf'
        broken.write_bytes((self.dir / 'model.ktpf').read_bytes()[:-5])
        self.assertFails(3, 'format', 'eval', '--ckpt', str(broken), '--clips', str(self.clips),
                         '--report', str(self.report))


class ExportAttentionCommandTests(CommandTestCase):

    def test_maps_are_row_stochastic(self):
        self.synth()
        self.train('model.ktpf', '--no-record')
        prefix = self.dir / 'walk_a'
        run_command('export_attn', '--ckpt', str(self.dir / 'model.ktpf'),
                    '--clip', str(self.clips / 'walk_a.2d.clip'), '--out-prefix', str(prefix))
        spatial = np.loadtxt(f'{prefix}_spatial.csv', delimiter=',')
        temporal = np.loadtxt(f'{prefix}_temporal.csv', delimiter=',')
        self.assertEqual((spatial.shape, temporal.shape), ((5, 5), (4, 4)))
        np.testing.assert_allclose(spatial.sum(axis=1), 1.0, atol=ATTENTION_ROW_TOLERANCE)
        np.testing.assert_allclose(temporal.sum(axis=1), 1.0, atol=ATTENTION_ROW_TOLERANCE)

    def test_clip_shape_mismatch(self):
        self.synth()
        self.train('model.ktpf', '--no-record')
        run_command('synth', '--spec', 'fixture_walk_a.spec', '--out', str(self.dir / 'long'))
        self.assertFails(1, 'validation', 'export_attn', '--ckpt', str(self.dir / 'model.ktpf'),
                         '--clip', str(self.dir / 'long' / 'walk_a.2d.clip'), '--out-prefix', str(self.dir / 'x'))

    def test_missing_config_warns_about_defaults(self):
        self.synth()
        self.train('model.ktpf', '--no-record')
        args = ('--ckpt', str(self.dir / 'model.ktpf'), '--clip', str(self.clips / 'walk_a.2d.clip'),
                '--out-prefix', str(self.dir / 'walk_a'))
        with self.assertLogs('ktpformer.management.base', 'WARNING') as logs:
            run_command('export_attn', *args)
        self.assertIn('skeleton=h36m', logs.output[0])
        with mock.patch.object(base.logger, 'warning') as warning:
            run_command('export_attn', *args, '--config', str(self.config_path))
        warning.assert_not_called()


class GradcheckCommandTests(CommandTestCase):

    def test_passes_and_writes_report(self):
        report = self.dir / 'grad.csv'
        output = run_command('gradcheck', '--config', str(self.config_path), '--max-entries', '4',
                             '--report', str(report))
        self.assertIn('parameter groups within', output)
        with open(report, newline='') as handle:
            rows = list(csv.reader(handle))
        self.assertEqual(rows[0], ['parameter', 'entries', 'max_abs_error', 'max_rel_error', 'passed'])
        self.assertTrue(all(row[4] == '1' for row in rows[1:]))

    def test_wrong_backward_rule_exits_numerical(self):
        def wrong_gelu(node, g):
            return (g,)

        with mock.patch.dict(nx.BACKWARD_RULES, {'gelu': wrong_gelu}):
            self.assertFails(2, 'numerical', 'gradcheck', '--config', str(self.config_path), '--max-entries', '4')

    def test_non_positive_tolerance(self):
        self.assertFails(1, 'validation', 'gradcheck', '--config', str(self.config_path), '--tolerance', '0')


class ParamsCommandTests(CommandTestCase):

    def test_counts_match_closed_form(self):
        output = run_command('params', '--config', str(self.config_path), '--groups')
        config = ModelConfig(**TINY_CONFIG)
        count = analytic_parameter_count(config)
        self.assertIn(f'parameters={count} analytic={count} flops={count_flops(config)}', output)
        self.assertIn('  kpa=', output)

    def test_shipped_configs_by_bare_name(self):
        output = run_command('params', '--config', 'tiny.cfg', 'desk.cfg', 'full.cfg')
        self.assertEqual(output.count('config='), 3)
        self.assertIn('config=full.cfg mode=SMD', output)

    def test_unknown_config(self):
        self.assertFails(3, 'io', 'params', '--config', str(self.dir / 'missing.cfg'))


class UsageErrorTests(SimpleTestCase):

    def parser(self, from_command_line):
        command = TrainCommand()
        command._called_from_command_line = from_command_line
        return command.create_parser('manage.py', 'train')

    def test_command_line_usage_error_exits_validation(self):
        parser = self.parser(True)
        with mock.patch('sys.stderr', new_callable=StringIO) as err:
            with self.assertRaises(SystemExit) as ctx:
                parser.parse_args(['--clips', 'data/clips'])
        self.assertEqual(ctx.exception.code, 1)
        self.assertIn('error=validation command=train detail="', err.getvalue())

    def test_unknown_flag_exits_validation(self):
        with mock.patch('sys.stderr', new_callable=StringIO):
            with self.assertRaises(SystemExit) as ctx:
                self.parser(True).parse_args(['--no-such-flag'])
        self.assertEqual(ctx.exception.code, 1)

    def test_call_command_usage_error_returns_one(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('train', '--clips', 'data/clips', stdout=StringIO(), stderr=StringIO())
        self.assertEqual(ctx.exception.returncode, 1)

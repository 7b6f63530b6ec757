from pathlib import Path

from tqdm import tqdm

from ktpformer.lifting.clips import PoseClip, load_clip, load_clip_pairs, save_clip
from ktpformer.lifting.evaluation import (
    AUC_SWEEP, PCK_THRESHOLD, evaluate_sequences, write_metric_csv, write_per_joint_csv,
)
from ktpformer.lifting.exceptions import ConfigurationError
from ktpformer.lifting.model import Topologies
from ktpformer.lifting.topology import resolve_skeleton
from ktpformer.lifting.training import normalize_input, predict_millimetres, target_millimetres
from ktpformer.management.base import LiftingCommand
from ktpformer.models import ExperimentRun, MetricRecord


class Command(LiftingCommand):
    help = 'Evaluate a checkpoint (or saved predictions) against 3D clips and write a metric report'

    def add_arguments(self, parser):
        source = parser.add_mutually_exclusive_group(required=True)
        source.add_argument('--ckpt', help='Checkpoint to run on every clip')
        source.add_argument('--predictions', help='Directory of <name>.3d.clip predictions to score instead')
        parser.add_argument('--clips', required=True, help='Directory of ground-truth clip pairs')
        parser.add_argument('--report', required=True, help='Metric CSV (metric,value rows)')
        parser.add_argument('--per-joint', help='Per-joint CSV (default: <report stem>_joints.csv)')
        parser.add_argument('--config', help='Run configuration supplying skeleton and joint weights')
        parser.add_argument('--threshold', type=float, default=PCK_THRESHOLD, help='PCK threshold in mm')
        parser.add_argument('--allow-reflection', action='store_true',
                            help='Let the Procrustes alignment use reflections')
        parser.add_argument('--save-predictions', help='Write predicted 3D clips (mm) to this directory')
        parser.add_argument('--run-id', type=int, help='ExperimentRun the metrics belong to')
        parser.add_argument('--no-record', action='store_true', help='Do not store metrics in the database')
        super().add_arguments(parser)

    def run(self, **options):
        report_path = self.require_parent(options['report'], '--report')
        joints_path = Path(options['per_joint']) if options['per_joint'] else \
            report_path.with_name(report_path.stem + '_joints.csv')
        run = None
        if options['run_id'] is not None and not options['no_record']:
            run = ExperimentRun.objects.filter(id=options['run_id']).first()
            if run is None:
                raise ConfigurationError(f"no experiment run with id {options['run_id']}")
        base = self.load_run_config(options['config'])
        pairs = load_clip_pairs(options['clips'])

        if options['ckpt']:
            params = self.load_checkpoint_with_config(options['ckpt'], base)
            config = params.config
            for pair in pairs:
                if (pair.input2d.frames, pair.input2d.joints) != (config.frames, config.joints):
                    raise ConfigurationError(
                        f"clip {pair.name} is {pair.input2d.frames} x {pair.input2d.joints}, "
                        f"checkpoint expects {config.frames} x {config.joints}")
            topologies = Topologies.from_config(config)
            predictions = {
                pair.name: predict_millimetres(params, config, normalize_input(pair.input2d), topologies)
                for pair in tqdm(pairs, disable=options['no_progress'], desc='eval')
            }
        else:
            directory = Path(options['predictions'])
            predictions = {}
            for pair in pairs:
                path = self.require_file(str(directory / f"{pair.name}.3d.clip"), '--predictions')
                predictions[pair.name] = target_millimetres(load_clip(path))

        if options['save_predictions']:
            out = Path(options['save_predictions'])
            out.mkdir(parents=True, exist_ok=True)
            for pair in pairs:
                save_clip(PoseClip(predictions[pair.name], 'mm', pair.name, pair.gt3d.frame_rate),
                          out / f"{pair.name}.3d.clip")

        result = evaluate_sequences(
            ((pair.name, predictions[pair.name], target_millimetres(pair.gt3d)) for pair in pairs),
            threshold=options['threshold'], sweep=AUC_SWEEP, allow_reflection=options['allow_reflection'],
        )
        write_metric_csv(result.overall, report_path)
        skeleton = resolve_skeleton(base.skeleton if base else 'h36m', pairs[0].gt3d.joints)
        write_per_joint_csv(result.overall, joints_path, skeleton.joint_names or None)

        if not options['no_record']:
            records = [MetricRecord(run=run, clip_name='all', metric=metric, value=value)
                       for metric, value in result.overall.to_rows()]
            for name, report in result.per_clip.items():
                records += [MetricRecord(run=run, clip_name=name, metric=metric, value=value)
                            for metric, value in report.to_rows()]
            MetricRecord.objects.bulk_create(records)

        for metric, value in result.overall.to_rows():
            self.stdout.write(f"{metric}={value!r}")
        self.stdout.write(self.style.SUCCESS(f"Report written to {report_path}; per-joint errors {joints_path}"))

import logging
import time
from pathlib import Path

from ktpformer.lifting.checkpoint import load_checkpoint, save_checkpoint
from ktpformer.lifting.clips import load_clip_pairs
from ktpformer.lifting.exceptions import ConfigurationError
from ktpformer.lifting.model import ModelParameters, analytic_parameter_count, count_flops
from ktpformer.lifting.run_config import serialize_record
from ktpformer.lifting.training import OptimizerState, Trainer, prepare_clip
from ktpformer.management.base import LiftingCommand
from ktpformer.models import ExperimentRun

logger = logging.getLogger(__name__)

ARCHITECTURE_FIELDS = ('frames', 'joints', 'channels', 'heads', 'depth', 'mode', 'kpa_variant', 'tpa_variant',
                       'temporal_radius')


class Command(LiftingCommand):
    """
    Train a lifting model on a directory of clip pairs.

    Writes the checkpoint, the per-step loss log (CSV) and, unless disabled,
    the optimizer state and an ExperimentRun registry row.
    """
    help = 'Train a model: train --config <file> --clips <dir> --out <ckpt>'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Run configuration file')
        parser.add_argument('--clips', required=True, help='Directory of <name>.2d.clip/<name>.3d.clip pairs')
        parser.add_argument('--out', required=True, help='Checkpoint path to write')
        parser.add_argument('--log', help='Loss log CSV (default: <out>.log.csv)')
        parser.add_argument('--resume', help='Continue training from this checkpoint (weights, optimizer, epoch)')
        parser.add_argument('--resume-optimizer',
                            help='Optimizer state for --resume (default: <resume>.opt when present)')
        parser.add_argument('--no-optimizer-state', action='store_true',
                            help='Do not write <out>.opt next to the checkpoint')
        parser.add_argument('--name', default='', help='Label stored with the registry row')
        parser.add_argument('--no-record', action='store_true', help='Do not record the run in the database')
        super().add_arguments(parser)

    def starting_point(self, config, options):
        """Fresh weights, or the weights and optimizer state of the checkpoint given to --resume."""
        if not options['resume']:
            if options['resume_optimizer']:
                raise ConfigurationError("--resume-optimizer needs --resume")
            return ModelParameters.initialize(config), None
        loaded = load_checkpoint(self.require_file(options['resume'], '--resume'), config)
        for name in ARCHITECTURE_FIELDS:
            if getattr(loaded.config, name) != getattr(config, name):
                raise ConfigurationError(f"--resume checkpoint has {name}={getattr(loaded.config, name)}, "
                                         f"config has {getattr(config, name)}")
        params = ModelParameters(config, loaded.arrays)
        opt_path = options['resume_optimizer'] or f"{options['resume']}.opt"
        if not options['resume_optimizer'] and not Path(opt_path).is_file():
            logger.warning("no optimizer state next to %s; moments and schedule restart from zero", options['resume'])
            return params, None
        state = OptimizerState.load(self.require_file(opt_path, '--resume-optimizer'), params)
        self.stdout.write(f"Resuming {options['resume']} at epoch {state.epoch}, step {state.step}")
        return params, state

    def run(self, **options):
        config = self.load_run_config(options['config'])
        out = self.require_parent(options['out'], '--out')
        log_path = Path(options['log']) if options['log'] else out.with_name(out.name + '.log.csv')
        self.require_parent(str(log_path), '--log')
        clips = [prepare_clip(pair) for pair in load_clip_pairs(options['clips'])]
        for clip in clips:
            if clip.inputs.shape[:2] != (config.frames, config.joints):
                raise ConfigurationError(
                    f"clip {clip.name} is {clip.inputs.shape[0]} x {clip.inputs.shape[1]}, "
                    f"config expects {config.frames} x {config.joints}")

        params, state = self.starting_point(config, options)

        record = None
        if not options['no_record']:
            record = ExperimentRun.objects.create(
                name=options['name'], mode=config.mode, kpa_variant=config.kpa_variant,
                tpa_variant=config.tpa_variant, config_text=serialize_record(config), seed=config.seed,
                status='running', checkpoint_path=str(out),
                parameter_count=analytic_parameter_count(config), flop_count=count_flops(config),
            )

        self.stdout.write(f"Training {config.mode} on {len(clips)} clip(s), {config.epochs} epoch(s)")
        start_time = time.time()
        try:
            trainer = Trainer(config, params, clips, state=state, log_path=log_path,
                              progress=not options['no_progress'])
            result = trainer.run()
            save_checkpoint(params, out)
            if not options['no_optimizer_state']:
                trainer.state.save(out.with_name(out.name + '.opt'))
        except Exception as e:
            if record:
                record.status = 'failed'
                record.error_message = str(e)
                record.duration_seconds = time.time() - start_time
                record.save()
            self.stdout.write(self.style.ERROR(f'Error during training: {e}'))
            raise

        if record:
            record.status = 'completed'
            record.steps = result.steps
            record.final_loss = result.final_loss
            record.duration_seconds = time.time() - start_time
            record.save()

        self.stdout.write(f"steps={result.steps} final_loss={result.final_loss!r}")
        self.stdout.write(self.style.SUCCESS(f"Checkpoint written to {out}; loss log {log_path}"))

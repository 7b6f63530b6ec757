import csv
from pathlib import Path

import numpy as np

from ktpformer.lifting import numerics as nx
from ktpformer.lifting.clips import load_clip
from ktpformer.lifting.exceptions import ConfigurationError
from ktpformer.lifting.model import extract_attention, forward
from ktpformer.lifting.training import normalize_input
from ktpformer.management.base import LiftingCommand


def write_matrix(matrix: np.ndarray, path: Path) -> None:
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])


class Command(LiftingCommand):
    help = 'Write head-averaged spatial (N x N) and temporal (T x T) attention maps of one clip as CSV'

    def add_arguments(self, parser):
        parser.add_argument('--ckpt', required=True, help='Checkpoint to run')
        parser.add_argument('--clip', required=True, help='2D input clip')
        parser.add_argument('--out-prefix', required=True,
                            help='Writes <prefix>_spatial.csv and <prefix>_temporal.csv')
        parser.add_argument('--config', help='Run configuration supplying the skeleton')
        super().add_arguments(parser)

    def run(self, **options):
        prefix = options['out_prefix']
        spatial_path = self.require_parent(f"{prefix}_spatial.csv", '--out-prefix')
        temporal_path = Path(f"{prefix}_temporal.csv")
        params = self.load_checkpoint_with_config(options['ckpt'], self.load_run_config(options['config']))
        config = params.config
        clip = load_clip(self.require_file(options['clip'], '--clip'))
        if (clip.frames, clip.joints) != (config.frames, config.joints):
            raise ConfigurationError(f"clip is {clip.frames} x {clip.joints}, "
                                     f"checkpoint expects {config.frames} x {config.joints}")

        with nx.no_grad():
            record = forward(normalize_input(clip), params, config)
        spatial, temporal = extract_attention(record)
        write_matrix(spatial, spatial_path)
        write_matrix(temporal, temporal_path)
        self.stdout.write(self.style.SUCCESS(f"Wrote {spatial_path} ({spatial.shape[0]}x{spatial.shape[1]}) "
                                             f"and {temporal_path} ({temporal.shape[0]}x{temporal.shape[1]})"))

from pathlib import Path

from django.conf import settings
from tqdm import tqdm

from ktpformer.lifting.clips import save_clip_pair
from ktpformer.lifting.run_config import load_synth_spec
from ktpformer.lifting.synthesis import synth_pair
from ktpformer.management.base import LiftingCommand


class Command(LiftingCommand):
    help = 'Generate synthetic <name>.2d.clip / <name>.3d.clip pairs from synthesis specs'

    def add_arguments(self, parser):
        parser.add_argument('--spec', nargs='+', required=True, help='One or more synthesis spec files')
        parser.add_argument('--out', required=True, help='Directory receiving the clip pairs')
        super().add_arguments(parser)

    def run(self, **options):
        # every spec is parsed before anything is generated
        specs = [load_synth_spec(self.config_file(path, '--spec'), seed_override=settings.KTP_SEED)
                 for path in options['spec']]
        names = [spec.name for spec in specs]
        if len(set(names)) != len(names):
            raise self.failure('validation', f"duplicate clip names in specs: {', '.join(names)}", 1)
        out = Path(options['out'])
        out.mkdir(parents=True, exist_ok=True)

        for spec in tqdm(specs, disable=options['no_progress'], desc='synth'):
            input_path, target_path = save_clip_pair(synth_pair(spec), out)
            self.stdout.write(f"{spec.name}: {input_path} {target_path}")
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(specs)} clip pair(s) to {out}"))

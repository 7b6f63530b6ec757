import math
from collections import OrderedDict

from ktpformer.lifting.model import analytic_parameter_count, count_flops, parameter_shapes
from ktpformer.management.base import LiftingCommand


class Command(LiftingCommand):
    help = 'Print parameter and FLOP counts of one or more run configurations'

    def add_arguments(self, parser):
        parser.add_argument('--config', nargs='+', required=True, help='Run configuration file(s)')
        parser.add_argument('--groups', action='store_true', help='Also print per-module parameter counts')
        super().add_arguments(parser)

    def run(self, **options):
        configs = [(path, self.load_run_config(path))
                   for path in options['config']]
        for path, config in configs:
            shapes = parameter_shapes(config)
            enumerated = 0
            groups = OrderedDict()
            for name, shape in shapes:
                size = math.prod(shape)
                enumerated += size
                group = name.split('.', 1)[0]
                groups[group] = groups.get(group, 0) + size
            self.stdout.write(
                f"config={path} mode={config.mode} parameters={enumerated} "
                f"analytic={analytic_parameter_count(config)} flops={count_flops(config)}")
            if options['groups']:
                for group, size in groups.items():
                    self.stdout.write(f"  {group}={size}")

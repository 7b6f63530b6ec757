import csv

from ktpformer.lifting.exceptions import NumericalError
from ktpformer.lifting.training import gradcheck
from ktpformer.management.base import LiftingCommand


class Command(LiftingCommand):
    help = 'Compare backward gradients with central finite differences; exits 2 on any mismatch'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Run configuration file')
        parser.add_argument('--tolerance', type=float, default=1e-4, help='Maximum relative error per entry')
        parser.add_argument('--max-entries', type=int,
                            help='Probe a seeded subset of at most this many entries per parameter')
        parser.add_argument('--report', help='Optional CSV with one row per parameter group')
        super().add_arguments(parser)

    def run(self, **options):
        config = self.load_run_config(options['config'])
        if options['report']:
            self.require_parent(options['report'], '--report')
        if options['tolerance'] <= 0:
            raise self.failure('validation', '--tolerance must be positive', 1)

        report = gradcheck(config, tolerance=options['tolerance'], max_entries=options['max_entries'],
                           progress=not options['no_progress'])
        for group in report.groups:
            status = 'ok' if group.passed else 'FAIL'
            self.stdout.write(f"{group.name} entries={group.entries} max_rel={group.max_rel_error:.3e} "
                              f"max_abs={group.max_abs_error:.3e} {status}")
        if options['report']:
            with open(options['report'], 'w', newline='') as handle:
                writer = csv.writer(handle, lineterminator='\n')
                writer.writerow(['parameter', 'entries', 'max_abs_error', 'max_rel_error', 'passed'])
                for group in report.groups:
                    writer.writerow([group.name, group.entries, repr(group.max_abs_error),
                                     repr(group.max_rel_error), int(group.passed)])

        if not report.passed:
            names = ', '.join(group.name for group in report.failures)
            raise NumericalError(f"gradient check failed for {len(report.failures)} group(s): {names}")
        self.stdout.write(self.style.SUCCESS(f"All {len(report.groups)} parameter groups within {report.tolerance}"))

"""
Shared plumbing for the lifting management commands.

Library errors become a single machine-parsable line

    error=<kind> command=<name> detail="<text>"

raised as CommandError with the matching exit code (1 validation,
2 numerical, 3 I/O).
"""

import logging
import sys
from pathlib import Path
from typing import Optional

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from ktpformer.lifting.checkpoint import load_checkpoint
from ktpformer.lifting.exceptions import KTPError
from ktpformer.lifting.model import ModelConfig, ModelParameters
from ktpformer.lifting.run_config import load_config

logger = logging.getLogger(__name__)

VALIDATION_EXIT_CODE = 1
IO_EXIT_CODE = 3


class LiftingCommand(BaseCommand):
    """Base class: subclasses implement `run(**options)` instead of `handle`."""

    def add_arguments(self, parser):
        parser.add_argument(
            '--no-progress',
            action='store_true',
            help='Disable progress bars (useful for logging)',
        )

    def create_parser(self, prog_name, subcommand, **kwargs):
        """Usage errors exit 1 with the standard failure line instead of argparse's 2."""
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        fallback = parser.error

        def usage_error(message):
            if not parser.called_from_command_line:
                fallback(message)
            parser.print_usage(sys.stderr)
            parser.exit(VALIDATION_EXIT_CODE, f"{self.failure('validation', message, VALIDATION_EXIT_CODE)}\n")

        parser.error = usage_error
        return parser

    @property
    def command_name(self) -> str:
        return self.__module__.rsplit('.', 1)[-1]

    def failure(self, kind: str, detail: str, returncode: int) -> CommandError:
        detail = ' '.join(str(detail).split()).replace('"', "'")
        return CommandError(f'error={kind} command={self.command_name} detail="{detail}"', returncode=returncode)

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except CommandError:
            raise
        except KTPError as exc:
            logger.debug("command failed", exc_info=True)
            raise self.failure(exc.kind, str(exc), exc.exit_code) from exc
        except OSError as exc:
            raise self.failure('io', str(exc), IO_EXIT_CODE) from exc

    def run(self, **options):
        raise NotImplementedError

    def config_file(self, path: str, flag: str) -> Path:
        """An existing file, or a bare name shipped in KTP_CONFIG_DIR."""
        candidate = Path(path)
        shipped = Path(settings.KTP_CONFIG_DIR) / candidate.name
        if not candidate.is_file() and candidate.name == path and shipped.is_file():
            return shipped
        return self.require_file(path, flag)

    def load_run_config(self, path: Optional[str]) -> Optional[ModelConfig]:
        if not path:
            return None
        config = load_config(self.config_file(path, '--config'), seed_override=settings.KTP_SEED)
        if settings.KTP_WORKERS > config.workers:
            config = config.with_overrides(workers=settings.KTP_WORKERS)
        return config

    def load_checkpoint_with_config(self, ckpt: str, base: Optional[ModelConfig]) -> ModelParameters:
        """
        The header carries the architecture only. Skeleton, joint weights and
        layer_norm_eps come from `--config`, or fall back to the defaults.
        """
        params = load_checkpoint(self.require_file(ckpt, '--ckpt'), base)
        if base is None:
            logger.warning(
                "no --config given: skeleton=%s layer_norm_eps=%g are defaults, not values read from %s",
                params.config.skeleton, params.config.layer_norm_eps, ckpt)
        return params

    def require_file(self, path: str, flag: str) -> Path:
        candidate = Path(path)
        if not candidate.is_file():
            raise self.failure('io', f"{flag} {path} does not exist", IO_EXIT_CODE)
        return candidate

    def require_parent(self, path: str, flag: str) -> Path:
        candidate = Path(path)
        if not candidate.parent.is_dir():
            raise self.failure('io', f"{flag} directory {candidate.parent} does not exist", IO_EXIT_CODE)
        return candidate

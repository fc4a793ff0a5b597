"""
Shared plumbing for the experiment commands: the global flags, config
loading and output directories.
"""
import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand

from nsn.forms import load_run_config, validate_run_config


def parse_int_list(value):
    return [int(v) for v in value.split(',') if v.strip()]


class ExperimentCommand(BaseCommand):
    """BaseCommand with --config, --seed, --out and --quiet."""

    # Whether --config falls back to settings.NSN_DEFAULT_CONFIG.
    default_config = True

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.add_argument('--config', help='Run configuration (JSON).')
        parser.add_argument('--seed', type=int, help='Unsigned 64-bit seed overriding the config.')
        parser.add_argument('--out', help='Output directory.')
        parser.add_argument('--quiet', action='store_true', help='Only log warnings and errors.')
        return parser

    def setup(self, options):
        """Apply --quiet and return the validated RunConfig."""
        logging.getLogger('nsn').setLevel(logging.WARNING if options.get('quiet') else logging.INFO)
        path = options.get('config')
        if path is None and self.default_config:
            path = settings.NSN_DEFAULT_CONFIG
        if path is None:
            document = {} if options.get('seed') is None else {'seed': options['seed']}
            return validate_run_config(document)
        return load_run_config(path, seed=options.get('seed'))

    def output_dir(self, options, config, fallback=None) -> Path:
        out = options.get('out') or config.output_dir or fallback or settings.NSN_DEFAULT_OUTPUT_DIR
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        return out

    def success(self, message):
        self.stdout.write(self.style.SUCCESS(message))

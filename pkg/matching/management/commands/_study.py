# File: matching/management/commands/_study.py
# Shared options and error handling of the study commands

from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from matching.config import load_study_config, parse_study_config
from matching.exceptions import MultimatchError


class StudyCommand(BaseCommand):
    """
    Base for commands driven by a study config. Errors from the matching
    app leave the command with their documented exit code.
    """
    requires_system_checks = []
    config_required = True

    def add_arguments(self, parser):
        parser.add_argument(
            '--config',
            required=self.config_required,
            help='Study configuration (JSON)',
        )
        parser.add_argument(
            '--out',
            help='Output directory (default: output_dir from the config)',
        )
        parser.add_argument(
            '--approximate',
            action='store_true',
            help='Solve the integer programs by LP relaxation and rounding',
        )
        parser.add_argument(
            '--seed',
            type=int,
            help='Seed for every randomized step (default: seed from the config)',
        )
        self.add_study_arguments(parser)

    def add_study_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            if options['config']:
                config = load_study_config(options['config'])
            else:
                config = parse_study_config({}, Path.cwd())
            config = config.with_overrides(
                out=options['out'], approximate=options['approximate'], seed=options['seed'],
            )
            self.run(config, options)
        except MultimatchError as exc:
            raise CommandError(str(exc), returncode=exc.exit_code) from exc

    def run(self, config, options):
        raise NotImplementedError

    def written(self, *paths):
        for path in paths:
            self.stdout.write(f'  {path}')

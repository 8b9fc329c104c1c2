# File: matching/management/commands/balance.py
# Run with: multimatch balance --config study.json [--sample out/]

from matching.balance import balance_report, build_context, describe_samples
from matching.exports import read_matched_sample, write_balance_tables

from ._study import StudyCommand


class Command(StudyCommand):
    help = 'Balance tables and the before/after description of the samples'

    def add_study_arguments(self, parser):
        parser.add_argument(
            '--sample',
            help='Directory holding cluster_pairs.csv and unit_pairs.csv (default: the output directory)',
        )

    def run(self, config, options):
        dataset = config.load_dataset()
        sample = read_matched_sample(options['sample'] or config.output_dir, dataset)
        context = build_context(dataset, config.spec)
        report = balance_report(sample, dataset, config.spec, context)
        description = describe_samples(sample, dataset, context)

        paths = write_balance_tables(report, description, config.output_dir)
        if report.violation_count:
            self.stdout.write(self.style.WARNING(f'{report.violation_count} balance constraint(s) violated'))
        self.stdout.write(self.style.SUCCESS('Files written:'))
        self.written(*paths)

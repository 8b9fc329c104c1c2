# File: matching/management/commands/compare.py
# Run with: multimatch compare --config study.json

from matching.balance import balance_report
from matching.exports import comparison_row, write_comparison
from matching.matcher import run_strategy
from matching.models import Strategy

from ._study import StudyCommand


class Command(StudyCommand):
    help = 'Compare dynamic matching with the myopic cardinality and myopic optimal baselines'

    def add_study_arguments(self, parser):
        parser.add_argument(
            '--no-timing',
            action='store_true',
            help=('Leave the time column blank. Only then are two runs with the same seed '
                  'byte-identical, since wall-clock times differ between runs'),
        )

    def run(self, config, options):
        dataset = config.load_dataset()
        self.stdout.write(self.style.WARNING('\nComparison of matching methods'))

        rows = []
        for strategy in (Strategy.DYNAMIC, Strategy.MYOPIC_CARDINALITY, Strategy.MYOPIC_OPTIMAL):
            sample = run_strategy(strategy, dataset, config.spec, config.matcher, config.distance)
            report = balance_report(sample, dataset, config.spec)
            row = comparison_row(sample, report, config.imbalance_threshold, timing=not options['no_timing'])
            rows.append(row)
            self.stdout.write(f'  {row["method"]}: {row["clusters"]} cluster pairs, {row["units"]} units')

        paths = write_comparison(rows, config.output_dir, config.imbalance_threshold)
        self.stdout.write(self.style.SUCCESS('Files written:'))
        self.written(*paths)

# File: matching/management/commands/analyze.py
# Run with: multimatch analyze --config study.json [--sample out/]

from matching.exports import read_matched_sample, write_inference
from matching.inference import PairedOutcomes, run_inference

from ._study import StudyCommand


class Command(StudyCommand):
    help = 'Randomization tests, effect estimate, equivalence tests and sensitivity analysis'

    def add_study_arguments(self, parser):
        parser.add_argument(
            '--sample',
            help='Directory holding cluster_pairs.csv and unit_pairs.csv (default: the output directory)',
        )

    def run(self, config, options):
        dataset = config.load_dataset()
        sample = read_matched_sample(options['sample'] or config.output_dir, dataset)
        data = PairedOutcomes.from_sample(sample, dataset, config.inference.covariates)
        result = run_inference(data, config.inference)

        self.stdout.write(self.style.WARNING(f'\nOutcome analysis of {dataset.outcome_name}'))
        self.stdout.write(f'One-sided p-value: {result.p_one_sided:.4f}')
        if result.tau_hat is not None:
            self.stdout.write(f'Effect estimate: {result.tau_hat:.4f}')
        if result.ci is not None:
            self.stdout.write(f'Interval: [{result.ci[0]:.4f}, {result.ci[1]:.4f}]')
        self.stdout.write(f'Gamma*: {result.gamma_star.display}')
        for flag in result.flags:
            self.stdout.write(self.style.WARNING(f'Flag: {flag}'))

        paths = write_inference(result, config.output_dir, dataset.outcome_name)
        self.stdout.write(self.style.SUCCESS('Files written:'))
        self.written(*paths)

# File: matching/management/commands/match.py
# Run with: multimatch match --config study.json

import time
from dataclasses import replace

from matching.balance import balance_report
from matching.distance import LevelDistances
from matching.exceptions import InfeasibleMatchError
from matching.exports import write_balance_report, write_json, write_matched_sample
from matching.matcher import multilevel_match
from matching.models import Level

from ._study import StudyCommand


class Command(StudyCommand):
    help = 'Optimal multilevel cardinality matching of clusters and their units'

    def add_study_arguments(self, parser):
        parser.add_argument(
            '--dump-distances',
            action='store_true',
            help='Write the unit distance block of every matched cluster pair to distances/',
        )
        parser.add_argument(
            '--dump-programs',
            action='store_true',
            help='Write every integer program in LP format to programs/',
        )

    def run(self, config, options):
        out = config.output_dir
        started = time.monotonic()
        dataset = config.load_dataset()
        loaded = time.monotonic()

        matcher_options = config.matcher
        if options['dump_programs']:
            matcher_options = replace(matcher_options, program_dir=str(out / 'programs'))

        self.stdout.write(self.style.WARNING('\nMultilevel matching'))
        self.stdout.write(f'Clusters: {len(dataset.treated_clusters)} treated, {len(dataset.control_clusters)} control')
        self.stdout.write(f'Objective: {matcher_options.objective}, lambda {matcher_options.cluster_weight:g}'
                          f'{", approximate" if matcher_options.approximate else ""}')

        sample = multilevel_match(dataset, config.spec, matcher_options, config.distance)
        if sample.is_empty:
            report = list(sample.infeasibility)
            write_json(out / 'infeasibility.json', {
                'message': 'No cluster pair satisfies the balance requirements',
                'violated_constraints': report,
                'statuses': sample.statuses,
            })
            detail = '; '.join(report) if report else 'no admissible cluster pair'
            raise InfeasibleMatchError(f'No feasible match: {detail}', report)

        report = balance_report(sample, dataset, config.spec)
        paths = list(write_matched_sample(sample, out))
        paths += write_balance_report(report, out)

        if options['dump_distances']:
            distances = LevelDistances.fit(dataset, config.distance, Level.UNIT)
            for pair in sample.cluster_pairs:
                treated = dataset.cluster_by_id[pair.treated_cluster]
                control = dataset.cluster_by_id[pair.control_cluster]
                block = distances.block([u.unit_id for u in treated.units], [u.unit_id for u in control.units])
                target = out / 'distances' / f'{pair.treated_cluster}__{pair.control_cluster}.csv'
                target.parent.mkdir(parents=True, exist_ok=True)
                block.write_csv(target)

        summary = {
            'strategy': str(sample.strategy),
            'objective': str(matcher_options.objective),
            'lambda': matcher_options.cluster_weight,
            'approximate': matcher_options.approximate,
            'seed': config.seed,
            'cluster_pairs': sample.n_cluster_pairs,
            'unit_pairs': sample.n_unit_pairs,
            'units': sample.n_units,
            'total_distance': sample.total_distance,
            'subproblems': sample.subproblems,
            'statuses': sample.statuses,
            'violations': report.violation_count,
            'timings': {**sample.timings, 'load': loaded - started},
        }
        paths.append(write_json(out / 'run_summary.json', summary))

        self.stdout.write(f'Matched {sample.n_cluster_pairs} cluster pairs and {sample.n_unit_pairs} unit pairs')
        if report.violation_count:
            self.stdout.write(self.style.WARNING(f'{report.violation_count} balance constraint(s) violated'))
        self.stdout.write(self.style.SUCCESS('Files written:'))
        self.written(*paths)

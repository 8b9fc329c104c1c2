# File: matching/management/commands/simulate.py
# Run with: multimatch simulate --out sim/ [--config study.json] [--seed N]

from dataclasses import replace

from matching.simulation import write_simulation

from ._study import StudyCommand

# Flag name -> SimulationParams field
PARAMETERS = {
    'clusters_per_arm': int,
    'units_per_cluster': int,
    'covariate_dims': int,
    'icc': float,
    'true_effect': float,
    'n_strata': int,
}


class Command(StudyCommand):
    help = 'Write a synthetic clustered study (units, clusters and a study config)'
    config_required = False

    def add_study_arguments(self, parser):
        for name, cast in PARAMETERS.items():
            parser.add_argument(f'--{name.replace("_", "-")}', dest=name, type=cast)

    def run(self, config, options):
        overrides = {name: options[name] for name in PARAMETERS if options.get(name) is not None}
        params = replace(config.simulation, **overrides)
        out = config.output_dir
        units, clusters = write_simulation(params, out)

        self.stdout.write(self.style.SUCCESS(
            f'Simulated {len(clusters)} clusters and {len(units)} units (seed {params.seed})'
        ))
        self.written(out / 'units.csv', out / 'clusters.csv', out / 'simulation.json', out / 'study.json')

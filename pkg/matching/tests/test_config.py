import json
import tempfile
from pathlib import Path

from django.test import SimpleTestCase, override_settings

from matching.config import load_study_config, parse_study_config
from matching.exceptions import ConfigError
from matching.inference import InferenceMode, WeightRule
from matching.models import ConstraintKind, Level, Objective

from .oracles import FIXTURES


class ParseStudyConfigTests(SimpleTestCase):

    @override_settings(MULTIMATCH_TIME_LIMIT=12.0, MULTIMATCH_WORKERS=3)
    def test_defaults(self):
        config = parse_study_config({}, '/data')
        self.assertIsNone(config.units_file)
        self.assertEqual(config.output_dir, Path('/data/out'))
        self.assertEqual(config.seed, 0)
        self.assertEqual(config.distance.caliper, 0.2)
        self.assertEqual(config.matcher.objective, Objective.MAX_CARDINALITY)
        self.assertEqual(config.matcher.cluster_weight, 0.0)
        self.assertFalse(config.matcher.approximate)
        self.assertEqual(config.matcher.time_limit, 12.0)
        self.assertEqual(config.matcher.workers, 3)
        self.assertEqual(config.inference.weight_rule, WeightRule.CONSTANT)
        self.assertEqual(config.inference.mode, InferenceMode.NORMAL)
        self.assertEqual(config.inference.deltas, ())
        self.assertEqual(config.imbalance_threshold, 0.1)

    def test_unknown_keys(self):
        for document in ({'colour': 1}, {'matcher': {'lambada': 1}}, {'balance': {'school': []}}):
            with self.subTest(document=document), self.assertRaises(ConfigError):
                parse_study_config(document)

    def test_sections(self):
        config = parse_study_config({
            'seed': 4,
            'schema': [{'name': 'x', 'kind': 'continuous', 'level': 'unit'},
                       {'name': 'c', 'kind': 'continuous', 'level': 'cluster'}],
            'balance': {'cluster': [{'kind': 'ks', 'covariate': 'c', 'max_gap': 0.3, 'grid_size': 5}]},
            'distance': {'caliper': None, 'covariates': ['x']},
            'matcher': {'lambda': 2.5, 'objective': 'min-distance'},
            'inference': {'gammas': [2, 1], 'weight_rule': 'size-proportional'},
            'simulation': {'clusters_per_arm': 4},
        }, '/data')
        self.assertEqual(config.seed, 4)
        self.assertEqual([s.name for s in config.schema], ['x', 'c'])
        constraint, = config.spec.cluster_constraints
        self.assertEqual((constraint.kind, constraint.level), (ConstraintKind.KS, Level.CLUSTER))
        self.assertEqual((constraint.max_gap, constraint.grid_size), (0.3, 5))
        self.assertIsNone(config.distance.caliper)
        self.assertEqual(config.distance.covariates, ('x',))
        self.assertEqual(config.matcher.cluster_weight, 2.5)
        self.assertEqual(config.matcher.objective, Objective.MIN_DISTANCE)
        self.assertEqual(config.inference.gammas, (1.0, 2.0))
        self.assertEqual(config.simulation.clusters_per_arm, 4)
        self.assertEqual(config.simulation.seed, 4)

    def test_invalid_values(self):
        for document in (
            {'seed': 'abc'},
            {'schema': [{'name': 'x', 'kind': 'ordinal', 'level': 'unit'}]},
            {'balance': {'unit': [{'kind': 'mean', 'covariate': 'x', 'level': 'cluster'}]}},
            {'balance': {'unit': {'kind': 'mean'}}},
            {'matcher': {'lambda': -1}},
            {'inference': {'alpha': 1.5}},
            {'inference': {'gammas': [0.5]}},
            {'inference': {'deltas': [0]}},
            {'simulation': {'icc': 1.0}},
            {'distance': 'far'},
        ):
            with self.subTest(document=document), self.assertRaises(ConfigError):
                parse_study_config(document)

    def test_error_names_the_field(self):
        with self.assertRaisesMessage(ConfigError, 'inference.alpha'):
            parse_study_config({'inference': {'alpha': 2}})

    def test_overrides(self):
        config = parse_study_config({'seed': 1}, '/data').with_overrides(out='/tmp/run', approximate=True, seed=9)
        self.assertEqual(config.output_dir, Path('/tmp/run'))
        self.assertTrue(config.matcher.approximate)
        self.assertEqual((config.seed, config.simulation.seed), (9, 9))

    def test_dataset_needs_files(self):
        with self.assertRaises(ConfigError):
            parse_study_config({}).load_dataset()


class LoadStudyConfigTests(SimpleTestCase):

    def test_fixture(self):
        config = load_study_config(FIXTURES / 'study.json')
        self.assertEqual(config.units_file, FIXTURES / 'units.csv')
        self.assertEqual(config.output_dir, FIXTURES / 'out')
        self.assertEqual(config.seed, 7)
        self.assertEqual(len(config.spec.unit_constraints), 2)
        self.assertEqual(config.matcher.workers, 1)
        self.assertEqual(config.inference.deltas, (1.0,))
        dataset = config.load_dataset()
        self.assertEqual(len(dataset.clusters), 4)

    def test_invalid_json(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'study.json'
            path.write_text('{\n  "seed": 1,\n}\n')
            with self.assertRaisesMessage(ConfigError, 'line 3'):
                load_study_config(path)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_study_config('/nonexistent/study.json')

    def test_written_config_round_trips(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'study.json'
            path.write_text(json.dumps({'units_file': 'u.csv', 'clusters_file': '/abs/c.csv'}))
            config = load_study_config(path)
        self.assertEqual(config.units_file, path.resolve().parent / 'u.csv')
        self.assertEqual(config.clusters_file, Path('/abs/c.csv'))

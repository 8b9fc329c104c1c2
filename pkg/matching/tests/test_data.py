import math
import shutil
import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from matching.data import (
    expand_schema, load_dataset, pooled_std_of, save_dataset, standardized_difference,
)
from matching.exceptions import (
    ParseError, ReferentialError, SpecError, StructuralError, UndefinedSampleError,
)
from matching.models import CovariateKind, CovariateSchema, Level, MissingPolicy, Role

from .oracles import FIXTURES


def study_schema(missing_policy=MissingPolicy.ERROR):
    return (
        CovariateSchema('x', CovariateKind.CONTINUOUS, Level.UNIT, missing_policy=missing_policy),
        CovariateSchema('grp', CovariateKind.NOMINAL, Level.UNIT, categories=('a', 'b'), missing_policy=missing_policy),
        CovariateSchema('c', CovariateKind.CONTINUOUS, Level.CLUSTER),
        CovariateSchema('y', CovariateKind.CONTINUOUS, Level.UNIT, role=Role.OUTCOME),
    )


class PooledStdTests(SimpleTestCase):

    def test_equal_groups(self):
        self.assertAlmostEqual(pooled_std_of([0, 2], [0, 2]), math.sqrt(2))

    def test_constant_group_counts_as_zero(self):
        # s_t^2 = 4, s_c^2 = 0
        self.assertAlmostEqual(pooled_std_of([1, 3, 5], [2, 2, 2]), math.sqrt(2))

    def test_singleton_group(self):
        self.assertAlmostEqual(pooled_std_of([4], [0, 2]), 1.0)

    def test_standardized_difference(self):
        self.assertAlmostEqual(standardized_difference([1], [0], 2.0), 0.5)

    def test_weighted_means(self):
        value = standardized_difference([0, 4], [1], 1.0, treated_weights=[3, 1], control_weights=[1])
        self.assertAlmostEqual(value, 0.0)

    def test_zero_sd(self):
        self.assertEqual(standardized_difference([1, 1], [1], 0.0), 0.0)
        self.assertEqual(standardized_difference([2], [1], 0.0), math.inf)
        self.assertEqual(standardized_difference([0], [1], 0.0), -math.inf)

    def test_empty_group(self):
        with self.assertRaises(UndefinedSampleError):
            standardized_difference([], [1.0], 1.0)


class SchemaTests(SimpleTestCase):

    def test_indicator_added_for_imputed_columns(self):
        schema = expand_schema(study_schema(MissingPolicy.IMPUTE))
        names = [s.name for s in schema]
        self.assertEqual(names[-2:], ['x_missing', 'grp_missing'])
        self.assertTrue(all(s.generated and s.kind == CovariateKind.BINARY for s in schema[-2:]))

    def test_expansion_is_idempotent(self):
        once = expand_schema(study_schema(MissingPolicy.IMPUTE))
        self.assertEqual(expand_schema(once), once)

    def test_duplicate_names(self):
        x = CovariateSchema('x', CovariateKind.CONTINUOUS, Level.UNIT)
        with self.assertRaises(SpecError):
            expand_schema((x, x))

    def test_single_outcome(self):
        y1 = CovariateSchema('y1', CovariateKind.CONTINUOUS, Level.UNIT, role=Role.OUTCOME)
        y2 = CovariateSchema('y2', CovariateKind.CONTINUOUS, Level.UNIT, role=Role.OUTCOME)
        with self.assertRaises(SpecError):
            expand_schema((y1, y2))

    def test_nominal_needs_categories(self):
        with self.assertRaises(SpecError):
            CovariateSchema('g', CovariateKind.NOMINAL, Level.UNIT)


class LoadDatasetTests(SimpleTestCase):

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.tmp, ignore_errors=True)

    def write(self, name, text):
        path = self.tmp / name
        path.write_text(text, encoding='utf-8')
        return path

    def units_with(self, old, new):
        text = (FIXTURES / 'units.csv').read_text(encoding='utf-8').replace(old, new, 1)
        return self.write('units.csv', text)

    def test_fixture(self):
        dataset = load_dataset(FIXTURES / 'units.csv', FIXTURES / 'clusters.csv', study_schema())
        self.assertEqual([c.cluster_id for c in dataset.treated_clusters], ['T1', 'T2'])
        self.assertEqual([c.cluster_id for c in dataset.control_clusters], ['C1', 'C2'])
        self.assertEqual(len(dataset.units), 12)
        self.assertEqual([u.unit_id for u in dataset.cluster_by_id['C2'].units], ['C2-1', 'C2-2', 'C2-3'])
        self.assertEqual(dataset.outcome_name, 'y')
        self.assertEqual(dataset.unit_by_id['T2-3'].outcome, 4.5)
        self.assertEqual(dataset.unit_value(dataset.unit_by_id['C1-2'], 'grp'), 'b')
        self.assertAlmostEqual(dataset.pooled_sd['x'], math.sqrt(8.3))

    def test_unknown_cluster(self):
        units = self.units_with('C2-3,C2,', 'C2-3,C9,')
        with self.assertRaises(ReferentialError) as caught:
            load_dataset(units, FIXTURES / 'clusters.csv', study_schema())
        self.assertEqual(caught.exception.cluster_id, 'C9')
        self.assertEqual(caught.exception.row, 13)

    def test_missing_value_without_imputation(self):
        with self.assertRaises(ParseError) as caught:
            load_dataset(FIXTURES / 'units_missing.csv', FIXTURES / 'clusters.csv', study_schema())
        self.assertEqual(caught.exception.row, 3)
        self.assertEqual(caught.exception.column, 'x')

    def test_imputation(self):
        dataset = load_dataset(FIXTURES / 'units_missing.csv', FIXTURES / 'clusters.csv',
                               study_schema(MissingPolicy.IMPUTE))
        observed = [0.0, 2.0, 5.0, 6.0, 7.0, 0.1, 1.1, 2.1, 5.1, 6.1, 7.1]
        unit = dataset.unit_by_id['T1-2']
        self.assertAlmostEqual(dataset.unit_value(unit, 'x'), sum(observed) / len(observed))
        self.assertEqual(dataset.unit_value(unit, 'x_missing'), 1.0)
        self.assertEqual(dataset.unit_value(unit, 'grp_missing'), 0.0)
        self.assertEqual(unit.imputed, frozenset({'x'}))

        other = dataset.unit_by_id['T1-3']
        self.assertEqual(dataset.unit_value(other, 'grp'), 'missing')
        self.assertEqual(dataset.unit_value(other, 'grp_missing'), 1.0)

    def test_bad_number(self):
        units = self.units_with('T2-2,T2,6.0', 'T2-2,T2,six')
        with self.assertRaises(ParseError) as caught:
            load_dataset(units, FIXTURES / 'clusters.csv', study_schema())
        self.assertEqual(caught.exception.column, 'x')

    def test_unknown_category(self):
        units = self.units_with('T2-2,T2,6.0,a', 'T2-2,T2,6.0,z')
        with self.assertRaises(ParseError):
            load_dataset(units, FIXTURES / 'clusters.csv', study_schema())

    def test_missing_column(self):
        clusters = self.write('clusters.csv', 'cluster_id,treated\nT1,1\nC1,0\n')
        with self.assertRaises(StructuralError):
            load_dataset(FIXTURES / 'units.csv', clusters, study_schema())

    def test_needs_both_arms(self):
        clusters = self.write('clusters.csv', 'cluster_id,treated,c\nT1,1,0\nT2,1,1\nC1,1,0\nC2,1,1\n')
        with self.assertRaises(StructuralError):
            load_dataset(FIXTURES / 'units.csv', clusters, study_schema())

    def test_treatment_varies_within_cluster(self):
        units = self.write('units.csv', 'unit_id,cluster_id,treated,x,grp\nu1,T1,1,0,a\nu2,T1,0,1,a\nu3,C1,0,0,a\n')
        clusters = self.write('clusters.csv', 'cluster_id,treated,c\nT1,1,0\nC1,0,1\n')
        with self.assertRaises(StructuralError):
            load_dataset(units, clusters, study_schema()[:3])

    def test_empty_cluster(self):
        clusters = self.write('clusters.csv', 'cluster_id,treated,c\nT1,1,0\nT2,1,1\nC1,0,0\nC2,0,1\nC3,0,2\n')
        with self.assertRaises(StructuralError):
            load_dataset(FIXTURES / 'units.csv', clusters, study_schema())

    def test_duplicate_unit(self):
        units = self.units_with('T1-2,', 'T1-1,')
        with self.assertRaises(StructuralError):
            load_dataset(units, FIXTURES / 'clusters.csv', study_schema())

    def test_save_writes_imputed_cells_as_missing(self):
        schema = study_schema(MissingPolicy.IMPUTE)
        dataset = load_dataset(FIXTURES / 'units_missing.csv', FIXTURES / 'clusters.csv', schema)
        save_dataset(dataset, self.tmp / 'units.csv', self.tmp / 'clusters.csv')
        lines = (self.tmp / 'units.csv').read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines[0], 'unit_id,cluster_id,x,grp,y')
        self.assertTrue(lines[2].startswith('T1-2,T1,NA,b,'))
        self.assertTrue(lines[3].startswith('T1-3,T1,2.0,NA,'))

        again = load_dataset(self.tmp / 'units.csv', self.tmp / 'clusters.csv', schema)
        self.assertEqual(again.clusters, dataset.clusters)

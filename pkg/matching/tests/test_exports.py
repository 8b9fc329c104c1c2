import csv
import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from matching.balance import balance_report
from matching.exceptions import DataError, ParseError, StructuralError
from matching.exports import (
    UNIT_PAIRS_HEADER, fmt, mean_imbalances, read_matched_sample, write_balance_report,
    write_matched_sample, write_rows,
)
from matching.inference import GammaThreshold
from matching.models import BalanceConstraint, BalanceSpec, ClusterPair, ConstraintKind, Level, MatchedSample, UnitPair
from matching.templatetags.report_filters import gamma, pad, pvalue, rpad, signed, stat

from .oracles import make_dataset


def sample():
    return MatchedSample(cluster_pairs=(
        ClusterPair(1, 'T1', 'C1', 2, 1.5, (UnitPair('T1-1', 'C1-1', 0.5), UnitPair('T1-2', 'C1-2', 1.0))),
        ClusterPair(2, 'T2', 'C2', 0, 0.0, ()),
    ))


class FormatTests(SimpleTestCase):

    def test_fmt(self):
        self.assertEqual(fmt(None), '')
        self.assertEqual(fmt(float('nan')), '')
        self.assertEqual(fmt(3), '3')
        self.assertEqual(fmt(True), '1')
        self.assertEqual(fmt(0.25, 2), '0.25')
        self.assertEqual(fmt(float('-inf')), '-inf')

    def test_report_filters(self):
        self.assertEqual(stat(245.714), '245.71')
        self.assertEqual(stat(None), '-')
        self.assertEqual(signed(0.02), '+0.02')
        self.assertEqual(signed(-0.094), '-0.09')
        self.assertEqual(pvalue(0.04321), '0.0432')
        self.assertEqual(pvalue(1e-9), '<0.0001')
        self.assertEqual(gamma(GammaThreshold(float('inf'), 'beyond-range')), '>100')
        self.assertEqual(gamma(GammaThreshold(1.504)), '1.50')
        self.assertEqual(pad('ab', 4), 'ab  ')
        self.assertEqual(rpad('ab', 4), '  ab')


class MatchedSampleFileTests(SimpleTestCase):

    def setUp(self):
        self.dataset = make_dataset([[0.0, 1.0], [2.0]], [[0.0, 1.0], [2.0]])
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.out = Path(self.tmp.name)

    def test_written_sample_reads_back(self):
        write_matched_sample(sample(), self.out)
        with open(self.out / 'cluster_pairs.csv', newline='') as handle:
            rows = list(csv.reader(handle))
        self.assertEqual(rows[0], ['pair_id', 'treated_cluster', 'control_cluster', 'm', 'total_distance'])
        self.assertEqual(rows[2], ['2', 'T2', 'C2', '0', '0.000000'])
        self.assertEqual(read_matched_sample(self.out, self.dataset), sample())

    def test_missing_files(self):
        with self.assertRaises(DataError):
            read_matched_sample(self.out, self.dataset)

    def test_declared_size_must_match(self):
        write_matched_sample(sample(), self.out)
        write_rows(self.out / 'unit_pairs.csv', UNIT_PAIRS_HEADER, [[1, 'T1-1', 'C1-1', '0.5']])
        with self.assertRaises(StructuralError):
            read_matched_sample(self.out, self.dataset)

    def test_bad_number(self):
        write_matched_sample(sample(), self.out)
        write_rows(self.out / 'unit_pairs.csv', UNIT_PAIRS_HEADER,
                   [[1, 'T1-1', 'C1-1', 'far'], [1, 'T1-2', 'C1-2', '1.0']])
        with self.assertRaises(ParseError) as caught:
            read_matched_sample(self.out, self.dataset)
        self.assertEqual((caught.exception.row, caught.exception.column), (2, 'distance'))

    def test_blank_number(self):
        write_matched_sample(sample(), self.out)
        write_rows(self.out / 'unit_pairs.csv', UNIT_PAIRS_HEADER,
                   [[1, 'T1-1', 'C1-1', ''], [1, 'T1-2', 'C1-2', '1.0']])
        with self.assertRaises(ParseError) as caught:
            read_matched_sample(self.out, self.dataset)
        self.assertEqual((caught.exception.row, caught.exception.column), (2, 'distance'))

    def test_units_outside_their_pair(self):
        write_matched_sample(sample(), self.out)
        write_rows(self.out / 'unit_pairs.csv', UNIT_PAIRS_HEADER,
                   [[1, 'T1-1', 'C2-1', '0.5'], [1, 'T1-2', 'C1-2', '1.0']])
        with self.assertRaises(StructuralError):
            read_matched_sample(self.out, self.dataset)

    def test_orphan_unit_pairs(self):
        write_matched_sample(sample(), self.out)
        write_rows(self.out / 'unit_pairs.csv', UNIT_PAIRS_HEADER,
                   [[1, 'T1-1', 'C1-1', '0.5'], [1, 'T1-2', 'C1-2', '1.0'], [9, 'T2-1', 'C2-1', '0.0']])
        with self.assertRaises(StructuralError):
            read_matched_sample(self.out, self.dataset)


class BalanceExportTests(SimpleTestCase):

    def test_report_files(self):
        dataset = make_dataset([[0.0, 1.0], [2.0]], [[0.0, 1.0], [2.0]], cluster_values=[0.0, 5.0, 1.0, 5.0])
        spec = BalanceSpec(unit_constraints=(BalanceConstraint(ConstraintKind.MEAN, 'x', Level.UNIT, tolerance=0.1),))
        report = balance_report(sample(), dataset, spec)
        with tempfile.TemporaryDirectory() as tmp:
            csv_path, txt_path = write_balance_report(report, tmp)
            with open(csv_path, newline='') as handle:
                rows = {(r['level'], r['covariate']): r for r in csv.DictReader(handle)}
            text = txt_path.read_text()
        self.assertEqual(rows[('unit', 'x')]['violated'], '0')
        self.assertEqual(rows[('unit', 'x')]['constraints'], 'mean(x <= 0.1 SD)')
        self.assertIn('x', text)
        self.assertEqual(mean_imbalances(report, 0.1), 1)

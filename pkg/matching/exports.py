# File: matching/exports.py
# RESULT FILES: CSV, JSON AND PLAIN-TEXT REPORTS

import csv
import json
import logging
import math
from collections import defaultdict
from pathlib import Path

from django.template.loader import render_to_string

from .exceptions import DataError, ParseError, StructuralError
from .models import ClusterPair, CovariateKind, Level, MatchedSample, UnitPair

logger = logging.getLogger(__name__)

CLUSTER_PAIRS_HEADER = ['pair_id', 'treated_cluster', 'control_cluster', 'm', 'total_distance']
UNIT_PAIRS_HEADER = ['pair_id', 'treated_unit', 'control_unit', 'distance']
BALANCE_REPORT_HEADER = [
    'level', 'covariate', 'kind', 'mean_treated', 'mean_control', 'std_dif',
    'weighted_mean_treated', 'weighted_mean_control', 'weighted_std_dif',
    'fine_deviation', 'ks', 'constraints', 'violated',
]
TABLE1_HEADER = ['covariate', 'mean_treated', 'mean_control', 'std_dif']
TABLE2_HEADER = ['covariate', 'category', 'count_treated', 'count_control']
TABLE3_HEADER = [
    'covariate', 'mean_treated', 'mean_control', 'std_dif',
    'mean_treated_unweighted', 'mean_control_unweighted', 'std_dif_unweighted',
]
TABLE5_HEADER = [
    'covariate', 'treated_all', 'treated_unmatched', 'treated_matched',
    'control_matched', 'control_unmatched', 'control_all',
]
COMPARISON_HEADER = [
    'method', 'clusters', 'units', 'mean_imbalances', 'tv_distance',
    'tv_distance_sum', 'subproblems', 'time_min',
]
GAMMA_SWEEP_HEADER = ['gamma', 'p_upper']


def fmt(value, digits=6):
    """CSV cell for a number; blank when undefined."""
    if value is None:
        return ''
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    value = float(value)
    if math.isnan(value):
        return ''
    if math.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return f'{value:.{digits}f}'


def write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)
    logger.debug('Wrote %s', path)
    return path


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True, default=_json_default)
        handle.write('\n')
    return path


def _json_default(value):
    if hasattr(value, 'item'):
        return value.item()
    if isinstance(value, (set, frozenset, tuple)):
        return list(value)
    return str(value)


def write_text(path, template_name, context):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_to_string(template_name, context), encoding='utf-8')
    return path


# ═══════════════════════════════════════════════════════════════
# MATCHED SAMPLE
# ═══════════════════════════════════════════════════════════════

def write_matched_sample(sample, out_dir):
    out_dir = Path(out_dir)
    cluster_rows = [
        [p.pair_id, p.treated_cluster, p.control_cluster, p.m, fmt(p.total_distance)]
        for p in sample.cluster_pairs
    ]
    unit_rows = [
        [p.pair_id, u.treated_unit, u.control_unit, fmt(u.distance)]
        for p in sample.cluster_pairs for u in p.unit_pairs
    ]
    return (
        write_rows(out_dir / 'cluster_pairs.csv', CLUSTER_PAIRS_HEADER, cluster_rows),
        write_rows(out_dir / 'unit_pairs.csv', UNIT_PAIRS_HEADER, unit_rows),
    )


def _read_table(path, header):
    if not path.exists():
        raise DataError(f'Matched sample file not found: {path}')
    with open(path, newline='', encoding='utf-8') as handle:
        reader = csv.DictReader(handle)
        missing = [name for name in header if name not in (reader.fieldnames or [])]
        if missing:
            raise StructuralError(f'{path.name} is missing column(s): {", ".join(missing)}')
        # Line 1 is the header
        return [(line, row) for line, row in enumerate(reader, start=2)]


def _to_number(raw, cast, line, column):
    if raw is None or not raw.strip():
        raise ParseError('Empty cell where a number is required', line, column)
    try:
        return cast(raw)
    except ValueError:
        raise ParseError(f'"{raw}" is not a number', line, column) from None


def read_matched_sample(directory, dataset):
    """
    Rebuild the MatchedSample written by ``write_matched_sample`` and check
    it against the dataset it was matched on.
    """
    directory = Path(directory)
    units_by_pair = defaultdict(list)
    for line, row in _read_table(directory / 'unit_pairs.csv', UNIT_PAIRS_HEADER):
        pair_id = _to_number(row['pair_id'], int, line, 'pair_id')
        units_by_pair[pair_id].append(UnitPair(
            treated_unit=row['treated_unit'],
            control_unit=row['control_unit'],
            distance=_to_number(row['distance'], float, line, 'distance'),
        ))

    cluster_pairs = []
    for line, row in _read_table(directory / 'cluster_pairs.csv', CLUSTER_PAIRS_HEADER):
        pair_id = _to_number(row['pair_id'], int, line, 'pair_id')
        unit_pairs = tuple(units_by_pair.pop(pair_id, ()))
        m = _to_number(row['m'], int, line, 'm')
        if m != len(unit_pairs):
            raise StructuralError(f'Cluster pair {pair_id} declares m={m} but lists {len(unit_pairs)} unit pairs')
        cluster_pairs.append(ClusterPair(
            pair_id=pair_id,
            treated_cluster=row['treated_cluster'],
            control_cluster=row['control_cluster'],
            m=m,
            total_distance=_to_number(row['total_distance'], float, line, 'total_distance'),
            unit_pairs=unit_pairs,
        ))
    if units_by_pair:
        orphans = ', '.join(str(k) for k in sorted(units_by_pair))
        raise StructuralError(f'unit_pairs.csv references unknown pair_id(s): {orphans}')

    sample = MatchedSample(cluster_pairs=tuple(cluster_pairs))
    sample.validate(dataset)
    logger.info('Read %d cluster pairs and %d unit pairs from %s',
                sample.n_cluster_pairs, sample.n_unit_pairs, directory)
    return sample


# ═══════════════════════════════════════════════════════════════
# BALANCE
# ═══════════════════════════════════════════════════════════════

def balance_report_rows(report):
    rows = []
    for r in report.rows:
        rows.append([
            r.level, r.covariate, r.kind,
            fmt(r.mean_treated), fmt(r.mean_control), fmt(r.std_dif),
            fmt(r.weighted_mean_treated), fmt(r.weighted_mean_control), fmt(r.weighted_std_dif),
            fmt(r.fine_deviation), fmt(r.ks),
            '; '.join(r.constraints), int(r.violated),
        ])
    return rows


def write_balance_report(report, out_dir):
    out_dir = Path(out_dir)
    csv_path = write_rows(out_dir / 'balance_report.csv', BALANCE_REPORT_HEADER, balance_report_rows(report))
    txt_path = write_text(out_dir / 'balance_report.txt', 'matching/balance_report.txt', {
        'report': report,
        'unit_rows': report.rows_at(Level.UNIT),
        'cluster_rows': report.rows_at(Level.CLUSTER),
    })
    return csv_path, txt_path


def unit_means_rows(report):
    return [
        [r.covariate, fmt(r.mean_treated), fmt(r.mean_control), fmt(r.std_dif)]
        for r in report.rows_at(Level.UNIT) if r.kind != CovariateKind.NOMINAL
    ]


def unit_fine_rows(report):
    rows = []
    for r in report.rows_at(Level.UNIT):
        if r.kind != CovariateKind.NOMINAL:
            continue
        for category in r.counts_treated:
            rows.append([r.covariate, category, r.counts_treated[category], r.counts_control.get(category, 0)])
    return rows


def cluster_means_rows(report):
    return [
        [r.covariate,
         fmt(r.weighted_mean_treated), fmt(r.weighted_mean_control), fmt(r.weighted_std_dif),
         fmt(r.mean_treated), fmt(r.mean_control), fmt(r.std_dif)]
        for r in report.rows_at(Level.CLUSTER) if r.kind != CovariateKind.NOMINAL
    ]


def sample_rows(description):
    return [[d['covariate']] + [fmt(d[column]) for column in TABLE5_HEADER[1:]] for d in description]


def write_balance_tables(report, description, out_dir):
    """The unit means, unit fine balance, cluster means and sample description tables."""
    out_dir = Path(out_dir)
    tables = {
        'unit_means': unit_means_rows(report),
        'unit_fine': unit_fine_rows(report),
        'cluster_means': cluster_means_rows(report),
        'samples': sample_rows(description),
    }
    paths = [
        write_rows(out_dir / 'table1_unit_means.csv', TABLE1_HEADER, tables['unit_means']),
        write_rows(out_dir / 'table2_unit_fine.csv', TABLE2_HEADER, tables['unit_fine']),
        write_rows(out_dir / 'table3_cluster_means.csv', TABLE3_HEADER, tables['cluster_means']),
        write_rows(out_dir / 'table5_samples.csv', TABLE5_HEADER, tables['samples']),
    ]
    paths.append(write_text(out_dir / 'balance_tables.txt', 'matching/balance_tables.txt', {
        'report': report,
        'unit_means': report.rows_at(Level.UNIT),
        'cluster_means': report.rows_at(Level.CLUSTER),
        'fine': tables['unit_fine'],
        'samples': description,
    }))
    return paths


# ═══════════════════════════════════════════════════════════════
# COMPARISON
# ═══════════════════════════════════════════════════════════════

def mean_imbalances(report, threshold):
    """Cluster-level covariates whose unweighted standardized difference exceeds threshold."""
    return sum(
        1 for r in report.rows_at(Level.CLUSTER)
        if r.std_dif is not None and abs(r.std_dif) > threshold
    )


def comparison_row(sample, report, threshold, timing=True):
    return {
        'method': str(sample.strategy),
        'clusters': sample.n_cluster_pairs,
        'units': sample.n_units,
        'mean_imbalances': mean_imbalances(report, threshold),
        'tv_distance': report.tv_distance,
        'tv_distance_sum': report.tv_distance_raw,
        'subproblems': sample.subproblems,
        'time_min': sample.timings.get('total', 0.0) / 60.0 if timing else None,
    }


def write_comparison(rows, out_dir, threshold):
    out_dir = Path(out_dir)
    csv_rows = [
        [r['method'], r['clusters'], r['units'], r['mean_imbalances'],
         fmt(r['tv_distance'], 4), fmt(r['tv_distance_sum'], 4), r['subproblems'], fmt(r['time_min'], 4)]
        for r in rows
    ]
    return (
        write_rows(out_dir / 'comparison.csv', COMPARISON_HEADER, csv_rows),
        write_text(out_dir / 'comparison.txt', 'matching/comparison.txt', {'rows': rows, 'threshold': threshold}),
    )


# ═══════════════════════════════════════════════════════════════
# INFERENCE
# ═══════════════════════════════════════════════════════════════

def write_inference(result, out_dir, outcome=None):
    out_dir = Path(out_dir)
    payload = result.to_dict()
    if outcome:
        payload['outcome'] = outcome
    return (
        write_json(out_dir / 'inference_report.json', payload),
        write_text(out_dir / 'inference_report.txt', 'matching/inference_report.txt',
                   {'result': result, 'outcome': outcome}),
        write_rows(out_dir / 'gamma_sweep.csv', GAMMA_SWEEP_HEADER,
                   [[fmt(g, 4), fmt(p, 6)] for g, p in result.sensitivity]),
    )

# File: matching/data.py
# LOADING, VALIDATING AND SAVING THE TWO-LEVEL DATASET

import csv
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd

from .exceptions import (
    DataError, ParseError, ReferentialError, SpecError, StructuralError,
    UndefinedSampleError,
)
from .models import (
    INDICATOR_SUFFIX, MISSING_CATEGORY, Cluster, CovariateKind, CovariateSchema,
    Dataset, Level, MissingPolicy, Role, Unit,
)

logger = logging.getLogger(__name__)

MISSING_TOKENS = frozenset({'', 'NA'})


# ═══════════════════════════════════════════════════════════════
# SCHEMA
# ═══════════════════════════════════════════════════════════════

def expand_schema(schema):
    """
    Append a binary ``<name>_missing`` indicator for every covariate that is
    imputed. Indicators inherit the balance/distance role of their source.
    """
    schema = tuple(s for s in schema if not s.generated)
    names = [s.name for s in schema]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise SpecError(f'Duplicate covariate names: {", ".join(duplicates)}')

    outcomes = [s for s in schema if s.is_outcome]
    if len(outcomes) > 1:
        raise SpecError('At most one outcome column may be declared')
    if outcomes and (outcomes[0].level != Level.UNIT or outcomes[0].is_nominal):
        raise SpecError(f'Outcome "{outcomes[0].name}" must be a numeric unit-level column')

    indicators = []
    for s in schema:
        if s.missing_policy != MissingPolicy.IMPUTE or s.is_outcome:
            continue
        name = s.name + INDICATOR_SUFFIX
        if name in names:
            raise SpecError(f'"{name}" clashes with the missingness indicator of "{s.name}"')
        role = s.role if s.role in (Role.BALANCE, Role.DISTANCE_ONLY) else Role.IGNORE
        indicators.append(CovariateSchema(
            name=name, kind=CovariateKind.BINARY, level=s.level, role=role, generated=True,
        ))
    return schema + tuple(indicators)


# ═══════════════════════════════════════════════════════════════
# POOLED STANDARD DEVIATIONS
# ═══════════════════════════════════════════════════════════════

def _group_sd(values):
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 0.0
    return float(np.std(values, ddof=1))


def pooled_std_of(treated_values, control_values):
    """sqrt((s_t^2 + s_c^2) / 2); a group with fewer than two values counts as SD 0."""
    s_t = _group_sd(treated_values)
    s_c = _group_sd(control_values)
    return math.sqrt((s_t ** 2 + s_c ** 2) / 2.0)


def pooled_std(dataset, covariate):
    """Pre-match pooled SD of a numeric covariate, fixed when the dataset was loaded."""
    spec = dataset.covariate(covariate)
    if not spec.is_numeric:
        raise SpecError(f'Pooled SD is undefined for nominal covariate "{covariate}"')
    return dataset.pooled_sd[covariate]


def standardized_difference(treated_values, control_values, pooled_sd,
                            treated_weights=None, control_weights=None):
    """
    (mean_t - mean_c) / pooled_sd, optionally with weighted means.

    A zero pooled SD yields 0 when the means agree and +/-inf otherwise.
    """
    treated_values = np.asarray(treated_values, dtype=float)
    control_values = np.asarray(control_values, dtype=float)
    if treated_values.size == 0 or control_values.size == 0:
        raise UndefinedSampleError('Standardized difference needs at least one treated and one control value')

    mean_t = float(np.average(treated_values, weights=treated_weights))
    mean_c = float(np.average(control_values, weights=control_weights))
    diff = mean_t - mean_c
    if pooled_sd == 0:
        if math.isclose(diff, 0.0, abs_tol=1e-12):
            return 0.0
        return math.copysign(math.inf, diff)
    return diff / pooled_sd


def _pooled_sds(schema, clusters):
    unit_schema = [s for s in schema if s.level == Level.UNIT and not s.is_outcome]
    cluster_schema = [s for s in schema if s.level == Level.CLUSTER and not s.is_outcome]
    pooled, degenerate = {}, set()

    for i, s in enumerate(cluster_schema):
        if not s.is_numeric:
            continue
        treated = [c.covariates[i] for c in clusters if c.treated]
        control = [c.covariates[i] for c in clusters if not c.treated]
        pooled[s.name] = pooled_std_of(treated, control)

    for i, s in enumerate(unit_schema):
        if not s.is_numeric:
            continue
        treated = [u.covariates[i] for c in clusters if c.treated for u in c.units]
        control = [u.covariates[i] for c in clusters if not c.treated for u in c.units]
        pooled[s.name] = pooled_std_of(treated, control)

    for name, sd in pooled.items():
        if sd == 0:
            degenerate.add(name)
            logger.warning('Covariate "%s" has zero pooled SD; mean balance on it requires equal means', name)
    return pooled, frozenset(degenerate)


def build_dataset(schema, clusters):
    """Dataset over clusters already in memory; pooled SDs taken over all of them."""
    clusters = tuple(clusters)
    pooled, degenerate = _pooled_sds(schema, clusters)
    return Dataset(schema=tuple(schema), clusters=clusters, pooled_sd=pooled, degenerate=degenerate)


# ═══════════════════════════════════════════════════════════════
# LOADING
# ═══════════════════════════════════════════════════════════════

def _read_csv(path):
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding='utf-8')
    except FileNotFoundError:
        raise DataError(f'File not found: {path}') from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f'Cannot read {path.name}: {exc}') from None
    frame.columns = [str(c).strip() for c in frame.columns]
    return frame


def _require_columns(frame, columns, filename):
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise StructuralError(f'{filename} is missing column(s): {", ".join(missing)}')


def _parse_value(raw, spec, row):
    """Parse one cell. Returns None for a missing cell."""
    raw = raw.strip()
    if raw in MISSING_TOKENS:
        if spec.missing_policy != MissingPolicy.IMPUTE and not spec.is_outcome:
            raise ParseError('missing value', row, spec.name)
        return None
    if spec.is_nominal:
        if raw not in spec.categories:
            raise ParseError(f'"{raw}" is not one of {list(spec.categories)}', row, spec.name)
        return raw
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(f'"{raw}" is not a number', row, spec.name) from None
    if not math.isfinite(value):
        raise ParseError(f'"{raw}" is not finite', row, spec.name)
    if spec.kind == CovariateKind.BINARY and value not in (0.0, 1.0):
        raise ParseError(f'"{raw}" is not 0 or 1', row, spec.name)
    return value


def _impute(records, base_schema, filename):
    """
    Fill missing cells in place. Numeric columns take the full-sample mean,
    nominal columns the "missing" category. Returns the indicator columns.
    """
    indicators = []
    for i, spec in enumerate(base_schema):
        if spec.missing_policy != MissingPolicy.IMPUTE:
            continue
        flags = [values[i] is None for values in records]
        if spec.is_nominal:
            fill = MISSING_CATEGORY
        else:
            observed = [values[i] for values in records if values[i] is not None]
            if not observed:
                raise DataError(f'{filename}: every value of "{spec.name}" is missing; nothing to impute from')
            fill = float(np.mean(observed))
        n_missing = sum(flags)
        if n_missing:
            logger.info('Imputed %d missing value(s) of "%s"', n_missing, spec.name)
        for values, flag in zip(records, flags):
            if flag:
                values[i] = fill
        indicators.append([1.0 if flag else 0.0 for flag in flags])
    return indicators


def _parse_treated(raw, row):
    raw = raw.strip()
    if raw in ('1', '1.0', 'true', 'True'):
        return True
    if raw in ('0', '0.0', 'false', 'False'):
        return False
    raise ParseError(f'"{raw}" is not a treatment indicator (0/1)', row, 'treated')


def _load_clusters(path, schema):
    frame = _read_csv(path)
    filename = Path(path).name
    base = [s for s in schema if s.level == Level.CLUSTER and not s.generated]
    _require_columns(frame, ['cluster_id', 'treated'] + [s.name for s in base], filename)
    has_stratum = 'stratum' in frame.columns

    ids, treated, strata, records = [], [], [], []
    for index, row in enumerate(frame.to_dict('records')):
        line = index + 2
        cluster_id = row['cluster_id'].strip()
        if not cluster_id:
            raise ParseError('empty cluster_id', line, 'cluster_id')
        z = _parse_treated(row['treated'], line)
        if cluster_id in ids:
            previous = treated[ids.index(cluster_id)]
            if previous != z:
                raise StructuralError(f'Treatment varies within cluster "{cluster_id}" (line {line})')
            raise StructuralError(f'Duplicate cluster_id "{cluster_id}" (line {line})')
        ids.append(cluster_id)
        treated.append(z)
        stratum = row['stratum'].strip() if has_stratum else ''
        strata.append(stratum or None)
        records.append([_parse_value(row[s.name], s, line) for s in base])

    indicators = _impute(records, base, filename)
    for values, extra in zip(records, zip(*indicators) if indicators else [()] * len(records)):
        values.extend(extra)
    return ids, treated, strata, records, base


def load_dataset(units_file, clusters_file, schema):
    """
    Read and validate the units and clusters CSV files.

    Clusters keep their file order; units keep their file order within
    each cluster.
    """
    schema = expand_schema(schema)
    ids, treated, strata, cluster_records, cluster_base = _load_clusters(clusters_file, schema)
    if not any(treated) or all(treated):
        raise StructuralError('Need at least one treated and one control cluster')

    frame = _read_csv(units_file)
    filename = Path(units_file).name
    unit_base = [s for s in schema if s.level == Level.UNIT and not s.generated and not s.is_outcome]
    outcome = next((s for s in schema if s.is_outcome), None)
    _require_columns(frame, ['unit_id', 'cluster_id'] + [s.name for s in unit_base], filename)
    has_outcome = outcome is not None and outcome.name in frame.columns
    has_treated = 'treated' in frame.columns
    treated_by_cluster = dict(zip(ids, treated))

    unit_ids, owners, records, outcomes, missing_cells = [], [], [], [], []
    seen = set()
    for index, row in enumerate(frame.to_dict('records')):
        line = index + 2
        unit_id = row['unit_id'].strip()
        cluster_id = row['cluster_id'].strip()
        if not unit_id:
            raise ParseError('empty unit_id', line, 'unit_id')
        if unit_id in seen:
            raise StructuralError(f'Duplicate unit_id "{unit_id}" (line {line})')
        seen.add(unit_id)
        if cluster_id not in treated_by_cluster:
            raise ReferentialError(cluster_id, line)
        if has_treated and _parse_treated(row['treated'], line) != treated_by_cluster[cluster_id]:
            raise StructuralError(f'Treatment varies within cluster "{cluster_id}" (line {line})')

        values = [_parse_value(row[s.name], s, line) for s in unit_base]
        missing_cells.append(frozenset(s.name for s, v in zip(unit_base, values) if v is None))
        unit_ids.append(unit_id)
        owners.append(cluster_id)
        records.append(values)
        outcomes.append(_parse_value(row[outcome.name], outcome, line) if has_outcome else None)

    indicators = _impute(records, unit_base, filename)
    for values, extra in zip(records, zip(*indicators) if indicators else [()] * len(records)):
        values.extend(extra)

    members = {cid: [] for cid in ids}
    for unit_id, cluster_id, values, y, imputed in zip(unit_ids, owners, records, outcomes, missing_cells):
        members[cluster_id].append(Unit(
            unit_id=unit_id, cluster_id=cluster_id, covariates=tuple(values),
            outcome=y, imputed=imputed,
        ))

    empty = [cid for cid in ids if not members[cid]]
    if empty:
        raise StructuralError(f'{len(empty)} cluster(s) have no units: {", ".join(empty[:10])}')

    clusters = tuple(
        Cluster(cluster_id=cid, treated=z, covariates=tuple(values), stratum=stratum, units=tuple(members[cid]))
        for cid, z, stratum, values in zip(ids, treated, strata, cluster_records)
    )
    dataset = build_dataset(schema, clusters)
    logger.info(
        'Loaded %d clusters (%d treated) and %d units',
        len(clusters), len(dataset.treated_clusters), len(dataset.units),
    )
    return dataset


# ═══════════════════════════════════════════════════════════════
# SAVING
# ═══════════════════════════════════════════════════════════════

def _format_value(value, spec, imputed):
    if imputed:
        return 'NA'
    if value is None:
        return 'NA'
    if spec.is_nominal:
        return value
    if spec.kind == CovariateKind.BINARY:
        return str(int(value))
    return repr(float(value))


def save_dataset(dataset, units_file, clusters_file):
    """
    Write the dataset back out so that ``load_dataset`` with the same schema
    reproduces it. Imputed cells are written as NA and generated indicator
    columns are left out.
    """
    cluster_base = [s for s in dataset.cluster_schema if not s.generated]
    unit_base = [s for s in dataset.unit_schema if not s.generated]
    outcome = next((s for s in dataset.schema if s.is_outcome), None)
    has_stratum = any(c.stratum is not None for c in dataset.clusters)

    with open(clusters_file, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(['cluster_id', 'treated'] + (['stratum'] if has_stratum else []) + [s.name for s in cluster_base])
        for cluster in dataset.clusters:
            row = [cluster.cluster_id, int(cluster.treated)]
            if has_stratum:
                row.append(cluster.stratum or '')
            for s in cluster_base:
                index = dataset.cluster_index(s.name)
                flag_name = s.name + INDICATOR_SUFFIX
                imputed = (s.missing_policy == MissingPolicy.IMPUTE
                           and cluster.covariates[dataset.cluster_index(flag_name)] == 1.0)
                row.append(_format_value(cluster.covariates[index], s, imputed))
            writer.writerow(row)

    with open(units_file, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(['unit_id', 'cluster_id'] + [s.name for s in unit_base] + ([outcome.name] if outcome else []))
        for unit in dataset.units:
            row = [unit.unit_id, unit.cluster_id]
            for s in unit_base:
                row.append(_format_value(unit.covariates[dataset.unit_index(s.name)], s, s.name in unit.imputed))
            if outcome:
                row.append('NA' if unit.outcome is None else repr(float(unit.outcome)))
            writer.writerow(row)

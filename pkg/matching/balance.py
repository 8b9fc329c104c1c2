# File: matching/balance.py
# BALANCE CONSTRAINTS AND POST-MATCH DIAGNOSTICS
#
# A constraint is written once, as a function of the per-pair values of the
# treated side and the control side. The same formulas generate the linear
# rows handed to the solver and the checks run by the balance report, so a
# feasible selection always reports zero violations.

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ks_2samp

from .data import standardized_difference
from .exceptions import SpecError, UndefinedSampleError
from .models import (
    STRATUM, BalanceSpec, ConstraintKind, Level, MISSING_CATEGORY, MissingPolicy, Role,
)
from .solver import IntegerProgram, LinearConstraint, Relation

logger = logging.getLogger(__name__)

CHECK_TOL = 1e-7


# ═══════════════════════════════════════════════════════════════
# DIAGNOSTIC STATISTICS
# ═══════════════════════════════════════════════════════════════

def ks_statistic(treated_values, control_values):
    """Largest gap between the two empirical CDFs."""
    treated_values = np.asarray(treated_values, dtype=float)
    control_values = np.asarray(control_values, dtype=float)
    if treated_values.size == 0 or control_values.size == 0:
        raise UndefinedSampleError('KS statistic needs two non-empty samples')
    return float(ks_2samp(treated_values, control_values, method='asymp').statistic)


def ks_gap_at(treated_values, control_values, cutpoints):
    """Largest ECDF gap restricted to the given cut-points."""
    treated_values = np.asarray(treated_values, dtype=float)
    control_values = np.asarray(control_values, dtype=float)
    if treated_values.size == 0 or control_values.size == 0:
        return 0.0
    cuts = np.asarray(cutpoints, dtype=float)
    if cuts.size == 0:
        return 0.0
    ecdf_t = (treated_values[None, :] <= cuts[:, None]).mean(axis=1)
    ecdf_c = (control_values[None, :] <= cuts[:, None]).mean(axis=1)
    return float(np.abs(ecdf_t - ecdf_c).max())


def category_counts(values, categories=None):
    counts = Counter(values)
    if categories is None:
        categories = sorted(counts)
    return {c: counts.get(c, 0) for c in categories}


def fine_balance_deviation(treated_values, control_values):
    """
    Half the summed category count gaps: the units that would have to
    change category for the marginals to agree. A half unit is left when
    the groups differ in size by an odd number.
    """
    counts_t = Counter(treated_values)
    counts_c = Counter(control_values)
    total = sum(abs(counts_t.get(c, 0) - counts_c.get(c, 0)) for c in set(counts_t) | set(counts_c))
    return total // 2 if total % 2 == 0 else total / 2


def total_variation_distance(treated, control, covariates, raw=False):
    """
    Sum over nominal covariates of 1/2 sum |p_t - p_c|. ``treated`` and
    ``control`` map covariate name to the matched values. With ``raw`` the
    1/2 factor is dropped.
    """
    factor = 1.0 if raw else 0.5
    total = 0.0
    for name in covariates:
        values_t, values_c = list(treated[name]), list(control[name])
        if not values_t or not values_c:
            continue
        counts_t, counts_c = Counter(values_t), Counter(values_c)
        categories = set(counts_t) | set(counts_c)
        total += factor * sum(
            abs(counts_t.get(c, 0) / len(values_t) - counts_c.get(c, 0) / len(values_c))
            for c in categories
        )
    return total


# ═══════════════════════════════════════════════════════════════
# PRE-MATCH CONTEXT
# ═══════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class BalanceContext:
    """
    Everything the constraints need from the pre-match sample. Small and
    picklable so it can travel to pair-table workers.
    """
    pooled_sd: dict
    kinds: dict
    categories: dict
    unit_positions: dict
    cluster_positions: dict
    cutpoints: dict = field(default_factory=dict)

    def sd(self, name):
        return self.pooled_sd.get(name, 0.0)

    def unit_values(self, units, name):
        i = self.unit_positions[name]
        return _as_array([u.covariates[i] for u in units], self.kinds[name])

    def cluster_values(self, clusters, name):
        if name == STRATUM:
            return np.array([c.stratum for c in clusters], dtype=object)
        i = self.cluster_positions[name]
        return _as_array([c.covariates[i] for c in clusters], self.kinds[name])

    def cuts(self, constraint):
        return self.cutpoints.get((constraint.level, constraint.covariate, constraint.grid_size), np.array([]))


def _as_array(values, kind):
    if kind == 'nominal':
        return np.array(values, dtype=object)
    return np.asarray(values, dtype=float)


def ks_cutpoints(values, grid_size):
    """grid_size equiprobable cut-points of the pooled distribution, deduplicated."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return np.array([])
    probabilities = np.arange(1, grid_size + 1) / (grid_size + 1)
    return np.unique(np.quantile(values, probabilities))


def validate_spec(spec, dataset):
    """Reject constraints that do not fit the dataset's schema."""
    for constraint in spec.unit_constraints + spec.cluster_constraints:
        name = constraint.covariate
        if constraint.level == Level.CLUSTER and name == STRATUM:
            if constraint.kind != ConstraintKind.EXACT:
                raise SpecError(f'{constraint.describe()}: the stratum can only be matched exactly')
            continue
        covariate = dataset.covariate(name)
        if covariate.is_outcome:
            raise SpecError(f'{constraint.describe()}: "{name}" is the outcome')
        if covariate.level != constraint.level:
            raise SpecError(f'{constraint.describe()}: "{name}" is a {covariate.level}-level covariate')
        if constraint.kind == ConstraintKind.FINE and not covariate.is_nominal:
            raise SpecError(f'{constraint.describe()}: fine balance needs a nominal covariate')
        if constraint.kind in (ConstraintKind.MEAN, ConstraintKind.KS) and not covariate.is_numeric:
            raise SpecError(f'{constraint.describe()}: needs a numeric covariate')
        if (constraint.kind == ConstraintKind.MEAN and constraint.tolerance == 0
                and not dataset.is_degenerate(name)):
            raise SpecError(f'{constraint.describe()}: tolerance must be positive')
    return spec


def build_context(dataset, spec=None):
    spec = spec or BalanceSpec()
    categories = {}
    for s in dataset.schema:
        if s.is_nominal:
            extra = (MISSING_CATEGORY,) if s.missing_policy == MissingPolicy.IMPUTE and MISSING_CATEGORY not in s.categories else ()
            categories[s.name] = tuple(s.categories) + extra

    cutpoints = {}
    for constraint in spec.unit_constraints + spec.cluster_constraints:
        if constraint.kind != ConstraintKind.KS:
            continue
        if constraint.level == Level.UNIT:
            i = dataset.unit_index(constraint.covariate)
            pooled = [u.covariates[i] for u in dataset.units]
        else:
            i = dataset.cluster_index(constraint.covariate)
            pooled = [c.covariates[i] for c in dataset.clusters]
        key = (constraint.level, constraint.covariate, constraint.grid_size)
        cutpoints[key] = ks_cutpoints(pooled, constraint.grid_size)

    return BalanceContext(
        pooled_sd=dict(dataset.pooled_sd),
        kinds={s.name: s.kind for s in dataset.schema},
        categories=categories,
        unit_positions={s.name: i for i, s in enumerate(dataset.unit_schema)},
        cluster_positions={s.name: i for i, s in enumerate(dataset.cluster_schema)},
        cutpoints=cutpoints,
    )


# ═══════════════════════════════════════════════════════════════
# CONSTRAINT ROWS
# ═══════════════════════════════════════════════════════════════

def _coefficient_terms(constraint, left, right, context, weights):
    """
    (coefficients, allowance) pairs: each pair defines the requirement
    |sum_p coef_p * s_p| <= sum_p allowance_p * s_p + constant over a
    selection s. Returned as (coef, allowance, constant, label).
    """
    name = constraint.covariate
    terms = []
    if constraint.kind == ConstraintKind.MEAN:
        w = weights if weights is not None else np.ones(len(left))
        allowance = constraint.tolerance * context.sd(name) * w
        terms.append(((left - right) * w, allowance, 0.0, 'mean'))
    elif constraint.kind == ConstraintKind.FINE:
        for category in context.categories.get(name, ()):
            coef = (left == category).astype(float) - (right == category).astype(float)
            terms.append((coef, np.zeros(len(left)), float(constraint.slack), f'fine[{category}]'))
    elif constraint.kind == ConstraintKind.KS:
        for k, cut in enumerate(context.cuts(constraint)):
            coef = (left <= cut).astype(float) - (right <= cut).astype(float)
            terms.append((coef, np.full(len(left), constraint.max_gap), 0.0, f'ks[{k}]'))
    return terms


def _rows_for(constraint, left, right, context, weights, tag):
    rows = []
    for coef, allowance, constant, label in _coefficient_terms(constraint, left, right, context, weights):
        for sign, side in ((1.0, 'upper'), (-1.0, 'lower')):
            row = sign * coef - allowance
            # Redundant when no selection can push the activity above the constant
            if constant >= 0 and np.all(row <= 0):
                continue
            coefficients = {int(p): float(v) for p, v in enumerate(row) if v != 0}
            rows.append(LinearConstraint(
                coefficients, Relation.LE, constant,
                name=f'{tag}{constraint.covariate}:{label}:{side}',
            ))
    return rows


def constraint_holds(constraint, left, right, context, weights=None):
    """
    Evaluate one constraint on the selected pairs (per-pair values of the
    treated and control sides). Returns (holds, worst excess).
    """
    if constraint.kind == ConstraintKind.EXACT:
        mismatches = int(np.sum(left != right))
        return mismatches == 0, float(mismatches)
    worst = 0.0
    for coef, allowance, constant, _ in _coefficient_terms(constraint, left, right, context, weights):
        excess = abs(float(coef.sum())) - float(allowance.sum()) - constant
        worst = max(worst, excess)
    return worst <= CHECK_TOL * max(1.0, float(len(left))), worst


@dataclass
class ConstraintSet:
    """Edge variables plus the linear rows over them."""
    edges: list
    excluded: list
    degree_rows: list
    rows: list
    tag: str = ''

    @property
    def has_balance_rows(self):
        return bool(self.rows)

    def allows(self, edge):
        return edge in set(self.edges)

    def program(self, objective, label=''):
        names = tuple(f'{self.tag}{i}_{j}' for i, j in self.edges)
        return IntegerProgram(
            n_vars=len(self.edges),
            objective=np.asarray(objective, dtype=float),
            constraints=self.degree_rows + self.rows,
            names=names,
            label=label,
        )


def _degree_rows(edges, tag):
    left, right = {}, {}
    for e, (i, j) in enumerate(edges):
        left.setdefault(i, {})[e] = 1.0
        right.setdefault(j, {})[e] = 1.0
    rows = [LinearConstraint(coefs, Relation.LE, 1.0, f'{tag}treated_{i}') for i, coefs in sorted(left.items()) if len(coefs) > 1]
    rows += [LinearConstraint(coefs, Relation.LE, 1.0, f'{tag}control_{j}') for j, coefs in sorted(right.items()) if len(coefs) > 1]
    return rows


def _build(constraints, treated_values, control_values, candidate_edges, context, weight_fn, tag):
    exact = [c for c in constraints if c.kind == ConstraintKind.EXACT]
    balance = [c for c in constraints if c.kind != ConstraintKind.EXACT]

    edges, excluded = [], []
    for edge in candidate_edges:
        i, j = edge
        if all(treated_values(c.covariate)[i] == control_values(c.covariate)[j] for c in exact):
            edges.append(edge)
        else:
            excluded.append(edge)

    rows = []
    if edges:
        t_index = np.array([i for i, _ in edges])
        c_index = np.array([j for _, j in edges])
        for constraint in balance:
            left = treated_values(constraint.covariate)[t_index]
            right = control_values(constraint.covariate)[c_index]
            weights = weight_fn(edges) if constraint.weight_by_cluster_size else None
            rows.extend(_rows_for(constraint, left, right, context, weights, tag))
    return ConstraintSet(edges=edges, excluded=excluded, degree_rows=_degree_rows(edges, tag), rows=rows, tag=tag)


def build_unit_constraints(spec, treated_units, control_units, candidate_edges=None, context=None):
    """
    Linear constraint set over unit-pair variables b. Exact constraints drop
    edges; mean, fine and KS constraints become rows.
    """
    if context is None:
        raise SpecError('Unit constraints need the pre-match balance context')
    if candidate_edges is None:
        candidate_edges = [(i, j) for i in range(len(treated_units)) for j in range(len(control_units))]
    cache = {}

    def values(units, side):
        def get(name):
            key = (side, name)
            if key not in cache:
                if name not in context.unit_positions:
                    raise SpecError(f'Unknown unit-level covariate "{name}"')
                cache[key] = context.unit_values(units, name)
            return cache[key]
        return get

    return _build(spec.unit_constraints, values(treated_units, 't'), values(control_units, 'c'),
                  list(candidate_edges), context, None, 'b')


def pair_weights(treated_clusters, control_clusters, edges):
    return np.array([treated_clusters[i].size + control_clusters[j].size for i, j in edges], dtype=float)


def build_cluster_constraints(spec, treated_clusters, control_clusters, candidate_pairs, context):
    """Linear constraint set over cluster-pair variables a."""
    cache = {}

    def values(clusters, side):
        def get(name):
            key = (side, name)
            if key not in cache:
                if name != STRATUM and name not in context.cluster_positions:
                    raise SpecError(f'Unknown cluster-level covariate "{name}"')
                cache[key] = context.cluster_values(clusters, name)
            return cache[key]
        return get

    def weights(edges):
        return pair_weights(treated_clusters, control_clusters, edges)

    return _build(spec.cluster_constraints, values(treated_clusters, 't'), values(control_clusters, 'c'),
                  list(candidate_pairs), context, weights, 'a')


def admissible_cluster_pair(spec, treated, control, context):
    """Cluster exact constraints (strata and nominal keys) hold for the pair."""
    for constraint in spec.cluster_exact_constraints:
        left = context.cluster_values([treated], constraint.covariate)[0]
        right = context.cluster_values([control], constraint.covariate)[0]
        if left != right:
            return False
    return True


# ═══════════════════════════════════════════════════════════════
# BALANCE REPORT
# ═══════════════════════════════════════════════════════════════

@dataclass
class BalanceRow:
    level: str
    covariate: str
    kind: str
    mean_treated: float | None = None
    mean_control: float | None = None
    std_dif: float | None = None
    weighted_mean_treated: float | None = None
    weighted_mean_control: float | None = None
    weighted_std_dif: float | None = None
    fine_deviation: float | None = None
    ks: float | None = None
    counts_treated: dict = field(default_factory=dict)
    counts_control: dict = field(default_factory=dict)
    constraints: list = field(default_factory=list)
    violated: bool = False


@dataclass
class Violation:
    level: str
    constraint: str
    covariate: str
    excess: float


@dataclass
class BalanceReport:
    rows: list
    violations: list
    tv_distance: float
    tv_distance_raw: float
    n_cluster_pairs: int
    n_unit_pairs: int

    @property
    def violation_count(self):
        return len(self.violations)

    def rows_at(self, level):
        return [r for r in self.rows if r.level == level]

    def row(self, level, covariate):
        for r in self.rows:
            if r.level == level and r.covariate == covariate:
                return r
        raise KeyError(covariate)


def _safe_mean(values, weights=None):
    if len(values) == 0:
        return None
    return float(np.average(np.asarray(values, dtype=float), weights=weights))


def _safe_std_dif(treated, control, sd, weights_t=None, weights_c=None):
    try:
        return standardized_difference(treated, control, sd, weights_t, weights_c)
    except UndefinedSampleError:
        return None


def _relevant(dataset, spec, level):
    named = {c.covariate for c in spec.unit_constraints + spec.cluster_constraints if c.level == level}
    schema = dataset.unit_schema if level == Level.UNIT else dataset.cluster_schema
    return [s for s in schema if s.role == Role.BALANCE or s.name in named]


def _numeric_or_nominal_row(level, spec_entry, left, right, context, weights=None):
    name = spec_entry.name
    row = BalanceRow(level=level, covariate=name, kind=spec_entry.kind)
    if spec_entry.is_nominal:
        categories = context.categories.get(name)
        row.counts_treated = category_counts(left.tolist(), categories)
        row.counts_control = category_counts(right.tolist(), categories)
        row.fine_deviation = fine_balance_deviation(left.tolist(), right.tolist())
        return row
    sd = context.sd(name)
    row.mean_treated = _safe_mean(left)
    row.mean_control = _safe_mean(right)
    row.std_dif = _safe_std_dif(left, right, sd)
    if len(left) and len(right):
        row.ks = ks_statistic(left, right)
    if weights is not None and len(weights):
        row.weighted_mean_treated = _safe_mean(left, weights)
        row.weighted_mean_control = _safe_mean(right, weights)
        row.weighted_std_dif = _safe_std_dif(left, right, sd, weights, weights)
    return row


def balance_report(sample, dataset, spec, context=None):
    """
    Balance of the matched sample: one row per balance-relevant covariate at
    each level, plus a check of every declared constraint.
    """
    context = context or build_context(dataset, spec)
    unit_pairs = list(sample.unit_pairs())
    treated_units = [dataset.unit_by_id[p.treated_unit] for p in unit_pairs]
    control_units = [dataset.unit_by_id[p.control_unit] for p in unit_pairs]
    treated_clusters = [dataset.cluster_by_id[p.treated_cluster] for p in sample.cluster_pairs]
    control_clusters = [dataset.cluster_by_id[p.control_cluster] for p in sample.cluster_pairs]
    weights = np.array([t.size + c.size for t, c in zip(treated_clusters, control_clusters)], dtype=float)

    def unit_sides(name):
        return context.unit_values(treated_units, name), context.unit_values(control_units, name)

    def cluster_sides(name):
        return context.cluster_values(treated_clusters, name), context.cluster_values(control_clusters, name)

    rows = []
    for entry in _relevant(dataset, spec, Level.UNIT):
        left, right = unit_sides(entry.name)
        rows.append(_numeric_or_nominal_row(Level.UNIT, entry, left, right, context))
    for entry in _relevant(dataset, spec, Level.CLUSTER):
        left, right = cluster_sides(entry.name)
        rows.append(_numeric_or_nominal_row(Level.CLUSTER, entry, left, right, context, weights))
    by_key = {(r.level, r.covariate): r for r in rows}

    violations = []
    for constraint in spec.unit_constraints + spec.cluster_constraints:
        if constraint.level == Level.UNIT:
            left, right = unit_sides(constraint.covariate)
            pair_w = None
        else:
            left, right = cluster_sides(constraint.covariate)
            pair_w = weights if constraint.weight_by_cluster_size else None
        holds, excess = constraint_holds(constraint, left, right, context, pair_w)
        row = by_key.get((constraint.level, constraint.covariate))
        if row is not None:
            row.constraints.append(constraint.describe())
        if not holds:
            violations.append(Violation(constraint.level, constraint.describe(), constraint.covariate, excess))
            if row is not None:
                row.violated = True

    nominal = [s.name for s in _relevant(dataset, spec, Level.UNIT) if s.is_nominal]
    treated_map = {name: unit_sides(name)[0].tolist() for name in nominal}
    control_map = {name: unit_sides(name)[1].tolist() for name in nominal}

    report = BalanceReport(
        rows=rows,
        violations=violations,
        tv_distance=total_variation_distance(treated_map, control_map, nominal),
        tv_distance_raw=total_variation_distance(treated_map, control_map, nominal, raw=True),
        n_cluster_pairs=len(sample.cluster_pairs),
        n_unit_pairs=len(unit_pairs),
    )
    if violations:
        logger.warning('%d balance constraint(s) violated: %s', len(violations),
                       '; '.join(v.constraint for v in violations))
    return report


# ═══════════════════════════════════════════════════════════════
# SAMPLE DESCRIPTION
# ═══════════════════════════════════════════════════════════════

def describe_samples(sample, dataset, context=None):
    """
    Unit-level covariate means for all, unmatched and matched units of each
    group. Nominal covariates contribute one proportion row per category.
    """
    context = context or build_context(dataset)
    matched_t, matched_c = (set(ids) for ids in sample.matched_unit_ids())
    treated_all = [u for c in dataset.treated_clusters for u in c.units]
    control_all = [u for c in dataset.control_clusters for u in c.units]
    groups = {
        'treated_all': treated_all,
        'treated_unmatched': [u for u in treated_all if u.unit_id not in matched_t],
        'treated_matched': [u for u in treated_all if u.unit_id in matched_t],
        'control_matched': [u for u in control_all if u.unit_id in matched_c],
        'control_unmatched': [u for u in control_all if u.unit_id not in matched_c],
        'control_all': control_all,
    }

    rows = [{'covariate': 'n', **{g: float(len(units)) for g, units in groups.items()}}]
    for entry in dataset.unit_schema:
        if entry.role == Role.IGNORE or entry.generated:
            continue
        if entry.is_nominal:
            for category in context.categories[entry.name]:
                row = {'covariate': f'{entry.name}={category}'}
                for g, units in groups.items():
                    values = context.unit_values(units, entry.name)
                    row[g] = float(np.mean(values == category)) if len(values) else math.nan
                rows.append(row)
        else:
            row = {'covariate': entry.name}
            for g, units in groups.items():
                mean = _safe_mean(context.unit_values(units, entry.name))
                row[g] = math.nan if mean is None else mean
            rows.append(row)
    return rows

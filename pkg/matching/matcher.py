# File: matching/matcher.py
# MULTILEVEL CARDINALITY MATCHING
#
# Work backwards: solve every treated-by-control cluster pair's unit
# matching first, record how many balanced unit pairs it yields, then pick
# the cluster pairs that maximize the total. Myopic baselines pair clusters
# first and only then look inside them.

import logging
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .balance import (
    admissible_cluster_pair, build_cluster_constraints, build_context,
    build_unit_constraints, constraint_holds, pair_weights, validate_spec,
)
from .distance import DistanceConfig, DistanceMatrix, LevelDistances
from .models import (
    ClusterPair, Level, MatchedSample, Objective, Strategy, UnitPair,
)
from .solver import Relation, SolveStatus, relax_and_round, solve_ip, to_lp_format

logger = logging.getLogger(__name__)

# Pair-table tasks handed to the process pool per round
_BATCH_PER_WORKER = 32
# Absolute slack when the first-stage optimum is pinned for the tie-break
PIN_SLACK = 1e-9


@dataclass(frozen=True)
class MatcherOptions:
    objective: str = Objective.MAX_CARDINALITY
    cluster_weight: float = 0.0
    approximate: bool = False
    time_limit: float | None = 10.0
    cluster_time_limit: float | None = None
    gap_tolerance: float = 0.0
    workers: int = 1
    program_dir: str | None = None


@dataclass(frozen=True)
class Assignment:
    """Optimal assignment: row/column index pairs plus the unmatched indices."""
    pairs: tuple
    total: float
    unmatched_rows: tuple = ()
    unmatched_cols: tuple = ()


@dataclass(frozen=True)
class UnitMatch:
    """Result of one unit-level subproblem; pairs are (i, j, distance) indices."""
    m: int
    pairs: tuple
    total_distance: float
    status: str = SolveStatus.OPTIMAL
    below_optimal: bool = False


@dataclass
class PairTable:
    treated: tuple
    control: tuple
    m: np.ndarray
    d: np.ndarray
    admissible: np.ndarray
    matches: dict = field(default_factory=dict)
    statuses: Counter = field(default_factory=Counter)
    below_optimal: int = 0

    @property
    def shape(self):
        return self.m.shape

    @property
    def subproblems(self):
        return len(self.matches)


@dataclass(frozen=True)
class ClusterAssignment:
    pairs: tuple
    objective: float
    total_distance: float
    status: str
    infeasibility: tuple = ()


# ═══════════════════════════════════════════════════════════════
# ASSIGNMENT
# ═══════════════════════════════════════════════════════════════

def min_distance_assignment(distances):
    """
    Minimum-total-distance pairing of every row or column of the smaller
    side. Forbidden (+inf) entries are used only when nothing else is left,
    and then dropped from the result.
    """
    values = distances.values if isinstance(distances, DistanceMatrix) else np.asarray(distances, dtype=float)
    n_rows, n_cols = values.shape
    if n_rows == 0 or n_cols == 0:
        return Assignment((), 0.0, tuple(range(n_rows)), tuple(range(n_cols)))
    finite = np.isfinite(values)
    if not finite.any():
        return Assignment((), 0.0, tuple(range(n_rows)), tuple(range(n_cols)))

    big = (np.abs(values[finite]).max() + 1.0) * (min(n_rows, n_cols) + 1)
    cost = np.where(finite, values, big)
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple((int(r), int(c)) for r, c in zip(rows, cols) if finite[r, c])
    matched_rows = {r for r, _ in pairs}
    matched_cols = {c for _, c in pairs}
    return Assignment(
        pairs=pairs,
        total=float(sum(values[r, c] for r, c in pairs)),
        unmatched_rows=tuple(r for r in range(n_rows) if r not in matched_rows),
        unmatched_cols=tuple(c for c in range(n_cols) if c not in matched_cols),
    )


# ═══════════════════════════════════════════════════════════════
# UNIT SUBPROBLEM
# ═══════════════════════════════════════════════════════════════

def _dump(program, options, suffix=''):
    if not options.program_dir:
        return
    directory = Path(options.program_dir)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f'{program.label}{suffix}.lp').write_text(to_lp_format(program), encoding='utf-8')


def _unit_match(edges, x, values, status, below_optimal):
    chosen = [edges[k] for k in np.flatnonzero(np.asarray(x) > 0.5)]
    pairs = tuple(sorted((i, j, float(values[i, j])) for i, j in chosen))
    return UnitMatch(
        m=len(pairs), pairs=pairs, total_distance=float(sum(p[2] for p in pairs)),
        status=status, below_optimal=below_optimal,
    )


def _assignment_match(constraint_set, values):
    allowed = np.full(values.shape, np.inf)
    for i, j in constraint_set.edges:
        allowed[i, j] = values[i, j]
    assignment = min_distance_assignment(allowed)
    pairs = tuple((i, j, float(values[i, j])) for i, j in assignment.pairs)
    return UnitMatch(m=len(pairs), pairs=pairs, total_distance=assignment.total)


def _full_pairing(constraint_set, values, cost, required, options, label):
    """Pair every unit of the smaller side at minimum distance, or report m = 0."""
    edges = constraint_set.edges
    if not constraint_set.has_balance_rows:
        match = _assignment_match(constraint_set, values)
        if match.m < required:
            return UnitMatch(0, (), 0.0, SolveStatus.INFEASIBLE)
        return match

    program = constraint_set.program(-cost, label).with_constraint(
        {k: 1.0 for k in range(len(edges))}, Relation.EQ, required, 'full_pairing',
    )
    _dump(program, options)
    if options.approximate:
        solution = relax_and_round(program)
    else:
        solution = solve_ip(program, options.time_limit, options.gap_tolerance)
    if not solution.is_usable:
        return UnitMatch(0, (), 0.0, solution.status)
    return _unit_match(edges, solution.values, values, solution.status,
                       solution.status != SolveStatus.OPTIMAL)


def cardinality_match_units(treated, control, spec, distances, context, options=None):
    """
    Largest set of unit pairs between two clusters that satisfies the unit
    constraints; among those, the one with the smallest total distance.
    """
    options = options or MatcherOptions()
    values = distances.values
    candidates = [(i, j) for i in range(treated.size) for j in range(control.size) if np.isfinite(values[i, j])]
    constraint_set = build_unit_constraints(spec, treated.units, control.units, candidates, context)
    edges = constraint_set.edges
    if not edges:
        return UnitMatch(0, (), 0.0)

    label = f'{treated.cluster_id}__{control.cluster_id}'
    cost = np.array([values[i, j] for i, j in edges])

    if options.objective == Objective.MIN_DISTANCE:
        return _full_pairing(constraint_set, values, cost, min(treated.size, control.size), options, label)

    if not constraint_set.has_balance_rows and not options.approximate:
        return _assignment_match(constraint_set, values)

    program = constraint_set.program(np.ones(len(edges)), label)
    _dump(program, options)
    if options.approximate:
        first = relax_and_round(program)
    else:
        first = solve_ip(program, options.time_limit, options.gap_tolerance)

    if not first.is_usable:
        logger.debug('%s: %s', label, first.status)
        return UnitMatch(0, (), 0.0, first.status, below_optimal=first.status != SolveStatus.INFEASIBLE)

    below_optimal = first.status != SolveStatus.OPTIMAL
    m = int(round(first.objective_value))
    if m == 0:
        return UnitMatch(0, (), 0.0, first.status, below_optimal)

    x = first.values
    if not options.approximate:
        pinned = program.with_constraint({k: 1.0 for k in range(len(edges))}, Relation.EQ, m, 'cardinality', objective=-cost)
        _dump(pinned, options, '_distance')
        second = solve_ip(pinned, options.time_limit, options.gap_tolerance, start=x)
        if second.is_usable:
            x = second.values
            below_optimal = below_optimal or second.status != SolveStatus.OPTIMAL
        else:
            below_optimal = True
    logger.debug('%s: m=%d (%s)', label, m, first.status)
    return _unit_match(edges, x, values, first.status, below_optimal)


def _solve_pair(task):
    """Pool worker: one cluster pair's unit subproblem."""
    treated, control, spec, block, context, options, ignore_balance = task
    if ignore_balance:
        assignment = min_distance_assignment(block)
        pairs = tuple((i, j, float(block.values[i, j])) for i, j in assignment.pairs)
        return UnitMatch(m=len(pairs), pairs=pairs, total_distance=assignment.total)
    return cardinality_match_units(treated, control, spec, block, context, options)


def _run_tasks(tasks, workers):
    """Results in task order whatever the completion order."""
    if workers <= 1 or len(tasks) <= 1:
        return [_solve_pair(task) for task in tasks]
    results = []
    batch = workers * _BATCH_PER_WORKER
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for start in range(0, len(tasks), batch):
            chunk = tasks[start:start + batch]
            results.extend(pool.map(_solve_pair, chunk, chunksize=max(1, len(chunk) // (workers * 4))))
    return results


def _pair_tasks(pairs, treated, control, spec, distances, context, options, ignore_balance=False):
    for a, b in pairs:
        t, c = treated[a], control[b]
        block = distances.block([u.unit_id for u in t.units], [u.unit_id for u in c.units])
        yield (t, c, spec, block, context, options, ignore_balance)


def compute_pair_table(dataset, spec, distances, options, context):
    """
    Unit subproblem for every admissible treated-by-control cluster pair.
    Inadmissible pairs (different strata) stay at m = 0 without a solve.
    """
    treated, control = dataset.treated_clusters, dataset.control_clusters
    shape = (len(treated), len(control))
    admissible = np.zeros(shape, dtype=bool)
    for a, t in enumerate(treated):
        for b, c in enumerate(control):
            admissible[a, b] = admissible_cluster_pair(spec, t, c, context)
    pairs = [tuple(int(v) for v in p) for p in np.argwhere(admissible)]
    logger.info('Pair table: %d x %d clusters, %d admissible subproblems', shape[0], shape[1], len(pairs))

    tasks = list(_pair_tasks(pairs, treated, control, spec, distances, context, options))
    results = _run_tasks(tasks, options.workers)

    table = PairTable(treated=treated, control=control, m=np.zeros(shape, dtype=int),
                      d=np.zeros(shape), admissible=admissible)
    for (a, b), result in zip(pairs, results):
        table.matches[(a, b)] = result
        table.m[a, b] = result.m
        table.d[a, b] = result.total_distance if result.m else 0.0
        table.statuses[str(result.status)] += 1
        table.below_optimal += int(result.below_optimal)
    if table.below_optimal:
        logger.warning('%d unit subproblem(s) solved below optimality', table.below_optimal)
    return table


# ═══════════════════════════════════════════════════════════════
# CLUSTER STAGE
# ═══════════════════════════════════════════════════════════════

def _infeasibility_report(spec, treated, control, constraint_set, weights, context):
    """Cluster constraints broken by the best selection that ignores them."""
    degree_only = constraint_set.program(weights, 'cluster-degree-only')
    degree_only.constraints = list(constraint_set.degree_rows)
    solution = solve_ip(degree_only)
    chosen = [constraint_set.edges[k] for k in solution.selected()]
    if not chosen:
        return ()
    left_clusters = [treated[a] for a, _ in chosen]
    right_clusters = [control[b] for _, b in chosen]
    report = []
    for constraint in spec.cluster_balance_constraints:
        left = context.cluster_values(left_clusters, constraint.covariate)
        right = context.cluster_values(right_clusters, constraint.covariate)
        w = pair_weights(treated, control, chosen) if constraint.weight_by_cluster_size else None
        holds, excess = constraint_holds(constraint, left, right, context, w)
        if not holds:
            report.append(f'{constraint.describe()} (excess {excess:.4g} at the unconstrained optimum)')
    return tuple(report)


def select_cluster_pairs(treated, control, candidates, weights, costs, spec, context, options):
    """
    Lexicographic cluster-stage solve: maximize the weighted count of
    selected pairs under the cluster constraints, then minimize total cost
    with that optimum pinned.
    """
    if not candidates:
        return ClusterAssignment((), 0.0, 0.0, SolveStatus.OPTIMAL)
    constraint_set = build_cluster_constraints(spec, treated, control, candidates, context)
    position = {edge: k for k, edge in enumerate(candidates)}
    edges = constraint_set.edges
    if not edges:
        return ClusterAssignment((), 0.0, 0.0, SolveStatus.OPTIMAL)
    w = np.array([weights[position[e]] for e in edges], dtype=float)
    c = np.array([costs[position[e]] for e in edges], dtype=float)

    program = constraint_set.program(w, 'cluster_stage')
    _dump(program, options)
    if options.approximate:
        first = relax_and_round(program)
    else:
        first = solve_ip(program, options.cluster_time_limit, options.gap_tolerance)
    if not first.is_usable:
        report = _infeasibility_report(spec, treated, control, constraint_set, w, context)
        return ClusterAssignment((), 0.0, 0.0, first.status, report)

    x = first.values
    optimum = first.objective_value
    if not options.approximate and optimum > 0:
        pinned = program.with_constraint({k: float(v) for k, v in enumerate(w) if v != 0}, Relation.GE,
                                         optimum - PIN_SLACK, 'objective', objective=-c)
        second = solve_ip(pinned, options.cluster_time_limit, options.gap_tolerance, start=x)
        # The row tolerance is relative; the pinned optimum is checked exactly
        if second.is_usable and float(w @ second.values) >= optimum - PIN_SLACK:
            x = second.values
        elif second.is_usable:
            logger.warning('Cluster stage: distance tie-break lost the optimum; keeping the first solution')

    chosen = [k for k in np.flatnonzero(np.asarray(x) > 0.5)]
    pairs = tuple(sorted(edges[k] for k in chosen))
    report = ()
    if not pairs and np.any(w > 0):
        report = _infeasibility_report(spec, treated, control, constraint_set, w, context)
    return ClusterAssignment(
        pairs=pairs,
        objective=float(sum(w[k] for k in chosen)),
        total_distance=float(sum(c[k] for k in chosen)),
        status=first.status,
        infeasibility=report,
    )


def cluster_match(table, spec, cluster_weight, context, options=None):
    """
    Pick cluster pairs maximizing sum(m * a) + cluster_weight * sum(a) under
    the cluster constraints, ties broken by total unit distance. Under the
    min-distance objective the number of usable pairs is maximized instead.
    """
    options = options or MatcherOptions()
    # Empty pairs can still be needed to satisfy cluster balance rows; they
    # then enter at zero weight and the highest tie-break cost.
    keep_empty = bool(spec.cluster_balance_constraints)
    empty_cost = float(table.d.max(initial=0.0)) * table.d.size + 1.0
    candidates, weights, costs = [], [], []
    for a, b in np.argwhere(table.admissible):
        a, b = int(a), int(b)
        m = int(table.m[a, b])
        cost = float(table.d[a, b])
        if options.objective == Objective.MIN_DISTANCE:
            if m == 0:
                continue
            weight = 1.0
        elif m == 0 and cluster_weight <= 0:
            if not keep_empty:
                continue
            weight, cost = 0.0, empty_cost
        else:
            weight = m + cluster_weight
        candidates.append((a, b))
        weights.append(weight)
        costs.append(cost)
    logger.info('Cluster stage: %d candidate pairs', len(candidates))
    result = select_cluster_pairs(table.treated, table.control, candidates, weights, costs, spec, context, options)
    return replace(result, total_distance=float(sum(table.d[a, b] for a, b in result.pairs)))


# ═══════════════════════════════════════════════════════════════
# END TO END
# ═══════════════════════════════════════════════════════════════

def _materialize(pairs, treated, control, matches, strategy, **extra):
    cluster_pairs = []
    for pair_id, (a, b) in enumerate(pairs, start=1):
        t, c = treated[a], control[b]
        match = matches.get((a, b)) or UnitMatch(0, (), 0.0)
        unit_pairs = tuple(UnitPair(t.units[i].unit_id, c.units[j].unit_id, dist) for i, j, dist in match.pairs)
        cluster_pairs.append(ClusterPair(
            pair_id=pair_id, treated_cluster=t.cluster_id, control_cluster=c.cluster_id,
            m=match.m, total_distance=match.total_distance, unit_pairs=unit_pairs,
        ))
    return MatchedSample(cluster_pairs=tuple(cluster_pairs), strategy=strategy, **extra)


def multilevel_match(dataset, spec, options=None, distance_config=None):
    """
    Optimal multilevel cardinality matching: the pair table first, then the
    cluster stage, then the cached unit pairings of the chosen pairs.
    """
    options = options or MatcherOptions()
    distance_config = distance_config or DistanceConfig()
    validate_spec(spec, dataset)
    context = build_context(dataset, spec)

    started = time.monotonic()
    distances = LevelDistances.fit(dataset, distance_config, Level.UNIT)
    table = compute_pair_table(dataset, spec, distances, options, context)
    table_done = time.monotonic()
    assignment = cluster_match(table, spec, options.cluster_weight, context, options)
    finished = time.monotonic()

    sample = _materialize(
        assignment.pairs, table.treated, table.control, table.matches, Strategy.DYNAMIC,
        subproblems=table.subproblems,
        statuses={'unit': dict(table.statuses), 'cluster': str(assignment.status), 'below_optimal': table.below_optimal},
        timings={'pair_table': table_done - started, 'cluster_stage': finished - table_done, 'total': finished - started},
        infeasibility=assignment.infeasibility,
    )
    logger.info('Dynamic matching: %d cluster pairs, %d unit pairs', sample.n_cluster_pairs, sample.n_unit_pairs)
    return sample


def myopic_match(dataset, spec, mode, options=None, distance_config=None):
    """
    Cluster pairs first, from cluster covariates alone; units matched only
    inside the chosen pairs.

    mode "optimal": minimum robust-Mahalanobis cluster assignment (with the
    propensity caliper) and full minimum-distance unit pairing, ignoring the
    unit constraints. mode "cardinality": most cluster pairs under the
    cluster constraints, then cardinality matching within each pair.
    """
    options = options or MatcherOptions()
    distance_config = distance_config or DistanceConfig()
    validate_spec(spec, dataset)
    context = build_context(dataset, spec)
    treated, control = dataset.treated_clusters, dataset.control_clusters

    started = time.monotonic()
    unit_distances = LevelDistances.fit(dataset, distance_config, Level.UNIT)
    cluster_distances = LevelDistances.fit(dataset, distance_config, Level.CLUSTER)
    block = cluster_distances.block([c.cluster_id for c in treated], [c.cluster_id for c in control])
    values = block.values.copy()
    for a, t in enumerate(treated):
        for b, c in enumerate(control):
            if not admissible_cluster_pair(spec, t, c, context):
                values[a, b] = np.inf

    if mode == 'optimal':
        strategy = Strategy.MYOPIC_OPTIMAL
        assignment = min_distance_assignment(values)
        pairs, cluster_status, report = tuple(sorted(assignment.pairs)), SolveStatus.OPTIMAL, ()
    elif mode == 'cardinality':
        strategy = Strategy.MYOPIC_CARDINALITY
        candidates = [tuple(int(v) for v in p) for p in np.argwhere(np.isfinite(values))]
        chosen = select_cluster_pairs(
            treated, control, candidates, [1.0] * len(candidates),
            [float(values[a, b]) for a, b in candidates], spec, context, options,
        )
        pairs, cluster_status, report = chosen.pairs, chosen.status, chosen.infeasibility
    else:
        raise ValueError(f'Unknown myopic mode {mode!r}')
    stage_one = time.monotonic()

    tasks = list(_pair_tasks(pairs, treated, control, spec, unit_distances, context, options,
                             ignore_balance=(mode == 'optimal')))
    results = _run_tasks(tasks, options.workers)
    matches = dict(zip(pairs, results))
    finished = time.monotonic()

    statuses = Counter(str(r.status) for r in results)
    sample = _materialize(
        pairs, treated, control, matches, strategy,
        subproblems=len(pairs),
        statuses={'unit': dict(statuses), 'cluster': str(cluster_status),
                  'below_optimal': sum(int(r.below_optimal) for r in results)},
        timings={'cluster_stage': stage_one - started, 'pair_table': finished - stage_one, 'total': finished - started},
        infeasibility=report,
    )
    logger.info('Myopic %s matching: %d cluster pairs, %d unit pairs', mode, sample.n_cluster_pairs, sample.n_unit_pairs)
    return sample


def run_strategy(strategy, dataset, spec, options=None, distance_config=None):
    if strategy == Strategy.DYNAMIC:
        return multilevel_match(dataset, spec, options, distance_config)
    if strategy == Strategy.MYOPIC_CARDINALITY:
        return myopic_match(dataset, spec, 'cardinality', options, distance_config)
    if strategy == Strategy.MYOPIC_OPTIMAL:
        return myopic_match(dataset, spec, 'optimal', options, distance_config)
    raise ValueError(f'Unknown strategy {strategy!r}')

# File: matching/solver.py
# LINEAR / INTEGER PROGRAMMING FOR THE MATCHING SUBPROBLEMS
#
# Every program here is a maximization over 0/1 variables. The relaxation is
# solved with a dense bounded-variable simplex and integrality is recovered
# by best-first branch and bound whose nodes restart from the parent basis.
# Problems are one cluster pair or the cluster stage, so dense numpy
# arithmetic is enough.

import heapq
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from django.db import models

logger = logging.getLogger(__name__)

INTEGRALITY_TOL = 1e-6
FEASIBILITY_TOL = 1e-7
_PIVOT_TOL = 1e-9
_COST_TOL = 1e-9
_DEGENERATE_SWITCH = 50
# Pivots between deadline checks
_DEADLINE_EVERY = 16


class Relation(models.TextChoices):
    LE = '<=', 'at most'
    GE = '>=', 'at least'
    EQ = '=', 'equal to'


class SolveStatus(models.TextChoices):
    OPTIMAL = 'optimal', 'Optimal'
    FEASIBLE = 'feasible', 'Feasible (time limit)'
    INFEASIBLE = 'infeasible', 'Infeasible'
    INFEASIBLE_UNPROVEN = 'infeasible-unproven', 'No solution found (time limit)'
    RELAXATION_FRACTIONAL = 'relaxation-fractional', 'Fractional relaxation'


@dataclass(frozen=True)
class LinearConstraint:
    coefficients: dict
    relation: str
    rhs: float
    name: str = ''

    def __post_init__(self):
        if self.relation not in Relation.values:
            raise ValueError(f'Unknown relation {self.relation!r}')


@dataclass
class IntegerProgram:
    """maximize c.x subject to linear constraints, x in {0,1}^n."""
    n_vars: int
    objective: np.ndarray
    constraints: list = field(default_factory=list)
    names: tuple = None
    label: str = ''

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        if self.objective.shape != (self.n_vars,):
            raise ValueError('Objective length does not match the number of variables')
        if not np.all(np.isfinite(self.objective)):
            raise ValueError('Objective coefficients must be finite')
        for constraint in self.constraints:
            self._check(constraint)

    def _check(self, constraint):
        for index, value in constraint.coefficients.items():
            if not 0 <= index < self.n_vars:
                raise ValueError(f'Constraint {constraint.name!r} references variable {index}')
            if not np.isfinite(value):
                raise ValueError(f'Constraint {constraint.name!r} has a non-finite coefficient')
        if not np.isfinite(constraint.rhs):
            raise ValueError(f'Constraint {constraint.name!r} has a non-finite right-hand side')

    def add(self, coefficients, relation, rhs, name=''):
        constraint = LinearConstraint(dict(coefficients), relation, float(rhs), name)
        self._check(constraint)
        self.constraints.append(constraint)
        self.__dict__.pop('dense', None)
        self.__dict__.pop('empty_rows_feasible', None)
        return constraint

    def with_constraint(self, coefficients, relation, rhs, name='', objective=None):
        """Copy of the program with one more row and, optionally, a new objective."""
        program = IntegerProgram(
            n_vars=self.n_vars,
            objective=self.objective if objective is None else objective,
            constraints=list(self.constraints),
            names=self.names,
            label=self.label,
        )
        program.add(coefficients, relation, rhs, name)
        return program

    @cached_property
    def dense(self):
        """(A, relations, b) with empty rows removed."""
        rows, relations, rhs = [], [], []
        for constraint in self.constraints:
            if not any(v != 0 for v in constraint.coefficients.values()):
                continue
            row = np.zeros(self.n_vars)
            for index, value in constraint.coefficients.items():
                row[index] += value
            rows.append(row)
            relations.append(constraint.relation)
            rhs.append(constraint.rhs)
        matrix = np.vstack(rows) if rows else np.zeros((0, self.n_vars))
        return matrix, tuple(relations), np.asarray(rhs, dtype=float)

    @cached_property
    def empty_rows_feasible(self):
        for constraint in self.constraints:
            if any(v != 0 for v in constraint.coefficients.values()):
                continue
            if not _holds(0.0, constraint.relation, constraint.rhs):
                return False
        return True

    def value(self, x):
        return float(self.objective @ np.asarray(x, dtype=float))

    def violations(self, x, tol=FEASIBILITY_TOL):
        """Names (or indices) of the constraints that x breaks."""
        x = np.asarray(x, dtype=float)
        broken = []
        for i, constraint in enumerate(self.constraints):
            activity = sum(v * x[j] for j, v in constraint.coefficients.items())
            if not _holds(activity, constraint.relation, constraint.rhs, tol):
                broken.append(constraint.name or f'c{i}')
        return broken

    def is_feasible(self, x, tol=FEASIBILITY_TOL):
        x = np.asarray(x, dtype=float)
        if np.any(x < -tol) or np.any(x > 1 + tol):
            return False
        if not self.empty_rows_feasible:
            return False
        matrix, relations, rhs = self.dense
        return _rows_hold(matrix @ x, relations, rhs, tol)

    def variable_name(self, index):
        if self.names:
            return self.names[index]
        return f'x{index}'


@dataclass(frozen=True)
class Solution:
    status: str
    values: np.ndarray
    objective_value: float
    bound_gap: float = 0.0
    nodes: int = 0

    @property
    def is_usable(self):
        return self.status in (SolveStatus.OPTIMAL, SolveStatus.FEASIBLE)

    def selected(self):
        return [int(i) for i in np.flatnonzero(np.asarray(self.values) > 0.5)]


def _holds(activity, relation, rhs, tol=FEASIBILITY_TOL):
    scale = tol * max(1.0, abs(rhs))
    if relation == Relation.LE:
        return activity <= rhs + scale
    if relation == Relation.GE:
        return activity >= rhs - scale
    return abs(activity - rhs) <= scale


def _rows_hold(activity, relations, rhs, tol=FEASIBILITY_TOL):
    return all(_holds(a, r, b, tol) for a, r, b in zip(activity, relations, rhs))


def _is_integral(x):
    return bool(np.all(np.abs(x - np.round(x)) <= INTEGRALITY_TOL))


# ═══════════════════════════════════════════════════════════════
# BOUNDED-VARIABLE SIMPLEX
# ═══════════════════════════════════════════════════════════════

def _deadline_passed(deadline):
    return deadline is not None and time.monotonic() > deadline


def _basic_values(tableau, basis, at_upper, lower, upper):
    n = tableau.shape[1] - 1
    x = np.where(at_upper, upper, lower)
    x[basis] = 0.0
    return tableau[:, -1] - tableau[:, :n] @ x


def _current_point(tableau, basis, at_upper, lower, upper):
    x = np.where(at_upper, upper, lower)
    x[basis] = _basic_values(tableau, basis, at_upper, lower, upper)
    return x


def _pivot(tableau, row, column):
    pivot_row = tableau[row] / tableau[row, column]
    tableau -= np.outer(tableau[:, column], pivot_row)
    tableau[row] = pivot_row


def _iterate(tableau, basis, at_upper, lower, upper, cost, max_iter, deadline=None):
    """
    Primal simplex on an explicit tableau [B^-1 A | B^-1 b].
    Nonbasic variables sit at their lower or (finite) upper bound.
    """
    m = tableau.shape[0]
    n = tableau.shape[1] - 1
    width = upper - lower
    bland = False
    degenerate_run = 0

    for iteration in range(max_iter):
        if iteration % _DEADLINE_EVERY == 0 and _deadline_passed(deadline):
            return 'time-limit'
        x_basic = _basic_values(tableau, basis, at_upper, lower, upper)

        reduced = cost - cost[basis] @ tableau[:, :n]
        reduced[basis] = 0.0
        eligible = ((~at_upper) & (width > _PIVOT_TOL) & (reduced > _COST_TOL)) | (at_upper & (reduced < -_COST_TOL))
        eligible[basis] = False
        if not eligible.any():
            return 'optimal'

        if bland:
            entering = int(np.flatnonzero(eligible)[0])
        else:
            entering = int(np.argmax(np.where(eligible, np.abs(reduced), -1.0)))

        direction = -1.0 if at_upper[entering] else 1.0
        alpha = tableau[:, entering] * direction
        step = width[entering]
        lower_basic, upper_basic = lower[basis], upper[basis]

        ratios = np.full(m, np.inf)
        down = alpha > _PIVOT_TOL
        ratios[down] = np.maximum(x_basic[down] - lower_basic[down], 0.0) / alpha[down]
        up = (alpha < -_PIVOT_TOL) & np.isfinite(upper_basic)
        ratios[up] = np.maximum(upper_basic[up] - x_basic[up], 0.0) / -alpha[up]

        leave = -1
        if m and ratios.min() < step:
            best = ratios.min()
            ties = np.flatnonzero(ratios <= best + 1e-12)
            if bland:
                leave = int(ties[np.argmin(basis[ties])])
            else:
                leave = int(ties[np.argmax(np.abs(alpha[ties]))])
            step = ratios[leave]

        if not np.isfinite(step):
            return 'unbounded'

        if step <= _PIVOT_TOL:
            degenerate_run += 1
            if degenerate_run >= _DEGENERATE_SWITCH:
                bland = True
        else:
            degenerate_run = 0

        if leave < 0:
            at_upper[entering] = not at_upper[entering]
            continue

        leaving = basis[leave]
        to_upper = alpha[leave] < 0
        _pivot(tableau, leave, entering)
        basis[leave] = entering
        at_upper[entering] = False
        at_upper[leaving] = to_upper

    return 'iteration-limit'


def _dual_iterate(tableau, basis, at_upper, lower, upper, cost, max_iter, deadline=None):
    """
    Dual simplex from a dual feasible basis whose basic values may break
    their bounds, as after a branching variable is fixed.
    """
    m = tableau.shape[0]
    n = tableau.shape[1] - 1
    movable = upper - lower > _PIVOT_TOL

    for iteration in range(max_iter):
        if m == 0:
            return 'optimal'
        if iteration % _DEADLINE_EVERY == 0 and _deadline_passed(deadline):
            return 'time-limit'
        x_basic = _basic_values(tableau, basis, at_upper, lower, upper)
        above = x_basic - upper[basis]
        below = lower[basis] - x_basic
        violation = np.maximum(above, below)
        row_index = int(np.argmax(violation))
        if violation[row_index] <= FEASIBILITY_TOL * max(1.0, abs(x_basic[row_index])):
            return 'optimal'

        decrease = above[row_index] > below[row_index]
        row = tableau[row_index, :n]
        candidates = movable.copy()
        candidates[basis] = False
        if decrease:
            candidates &= ((~at_upper) & (row > _PIVOT_TOL)) | (at_upper & (row < -_PIVOT_TOL))
        else:
            candidates &= ((~at_upper) & (row < -_PIVOT_TOL)) | (at_upper & (row > _PIVOT_TOL))
        if not candidates.any():
            return 'infeasible'

        reduced = cost - cost[basis] @ tableau[:, :n]
        ratios = np.full(n, np.inf)
        ratios[candidates] = np.abs(reduced[candidates]) / np.abs(row[candidates])
        ties = np.flatnonzero(ratios <= ratios.min() + 1e-12)
        entering = int(ties[np.argmax(np.abs(row[ties]))])

        leaving = basis[row_index]
        _pivot(tableau, row_index, entering)
        basis[row_index] = entering
        at_upper[entering] = False
        at_upper[leaving] = decrease

    return 'iteration-limit'


@dataclass(frozen=True)
class _NodeSolution:
    """LP optimum at one node, with the basis that produced it."""
    status: str
    x: np.ndarray = None
    value: float = None
    basis: np.ndarray = None
    at_upper: np.ndarray = None

    @property
    def feasible(self):
        return self.status == 'optimal'


_INFEASIBLE = _NodeSolution('infeasible')
_TIMED_OUT = _NodeSolution('time-limit')


class _Relaxation:
    """
    Standard form of a program's LP relaxation: structural columns, one
    slack per inequality and an artificial for every row no slack can
    start. One instance serves a whole branch-and-bound tree, so a node is
    re-solved from its parent's basis instead of from scratch.
    """

    def __init__(self, program, lower, upper):
        matrix, relations, rhs = program.dense
        m, n = matrix.shape
        self.program = program
        self.n = n
        self.structural_lower = np.asarray(lower, dtype=float)
        self.structural_upper = np.asarray(upper, dtype=float)

        slack_rows = [i for i, r in enumerate(relations) if r != Relation.EQ]
        slacks = np.zeros((m, len(slack_rows)))
        for k, i in enumerate(slack_rows):
            slacks[i, k] = 1.0 if relations[i] == Relation.LE else -1.0

        # Rows are signed so the starting point, every variable at its lower
        # bound, leaves a non-negative right-hand side.
        body = np.hstack([matrix, slacks])
        b = np.array(rhs, dtype=float)
        flip = b - matrix @ self.structural_lower < 0
        body[flip] *= -1.0
        b[flip] *= -1.0

        basis = np.full(m, -1, dtype=int)
        for k, i in enumerate(slack_rows):
            if body[i, n + k] > 0:
                basis[i] = n + k
        needs_artificial = np.flatnonzero(basis < 0)
        artificials = np.zeros((m, len(needs_artificial)))
        self.first_artificial = n + len(slack_rows)
        for k, i in enumerate(needs_artificial):
            artificials[i, k] = 1.0
            basis[i] = self.first_artificial + k

        self.columns = np.hstack([body, artificials])
        self.b = b
        self.start = basis
        total = self.columns.shape[1]
        self.cost = np.concatenate([program.objective, np.zeros(total - n)])
        self.lower = np.concatenate([self.structural_lower, np.zeros(total - n)])
        self.upper = np.concatenate([self.structural_upper, np.full(total - n, np.inf)])
        self.max_iter = 50 * (m + total) + 1000

    def _bounds(self, lower, upper):
        full_lower, full_upper = self.lower.copy(), self.upper.copy()
        full_lower[:self.n] = lower
        full_upper[:self.n] = upper
        return full_lower, full_upper

    def _finish(self, tableau, basis, at_upper, lower, upper, deadline):
        outcome = _iterate(tableau, basis, at_upper, lower, upper, self.cost, self.max_iter, deadline)
        if outcome == 'time-limit':
            return _TIMED_OUT
        if outcome == 'iteration-limit':
            logger.warning('Simplex hit the iteration limit (%d rows, %d columns)', *self.columns.shape)
        x = _current_point(tableau, basis, at_upper, lower, upper)[:self.n]
        x = np.clip(x, lower[:self.n], upper[:self.n])
        return _NodeSolution('optimal', x, float(self.program.objective @ x), basis.copy(), at_upper.copy())

    def solve(self, deadline=None):
        """Two-phase solve from the slack/artificial basis."""
        if np.any(self.structural_upper < self.structural_lower - FEASIBILITY_TOL):
            return _INFEASIBLE
        tableau = np.hstack([self.columns, self.b[:, None]])
        basis = self.start.copy()
        at_upper = np.zeros(self.columns.shape[1], dtype=bool)

        if self.first_artificial < self.columns.shape[1]:
            phase_one = np.zeros(self.columns.shape[1])
            phase_one[self.first_artificial:] = -1.0
            outcome = _iterate(tableau, basis, at_upper, self.lower, self.upper, phase_one, self.max_iter, deadline)
            if outcome == 'time-limit':
                return _TIMED_OUT
            x = _current_point(tableau, basis, at_upper, self.lower, self.upper)
            infeasibility = x[self.first_artificial:].sum()
            if infeasibility > FEASIBILITY_TOL * max(1.0, np.abs(self.b).max(initial=0.0)):
                return _INFEASIBLE
            # Artificials stay at zero for every later solve on this tree
            self.upper[self.first_artificial:] = 0.0

        return self._finish(tableau, basis, at_upper, self.lower, self.upper, deadline)

    def tableau(self, basis):
        """[B^-1 A | B^-1 b] for a basis of this relaxation, or None if it is singular."""
        full = np.hstack([self.columns, self.b[:, None]])
        if not len(basis):
            return full
        try:
            return np.linalg.solve(self.columns[:, basis], full)
        except np.linalg.LinAlgError:
            return None

    def reoptimize(self, tableau, parent, lower, upper, deadline=None):
        """
        Child node: the parent's optimal basis with new structural bounds.
        Returns None when the warm start fails and a cold solve is needed.
        """
        if np.any(upper < lower - FEASIBILITY_TOL):
            return _INFEASIBLE
        full_lower, full_upper = self._bounds(lower, upper)
        tableau = tableau.copy()
        basis, at_upper = parent.basis.copy(), parent.at_upper.copy()
        outcome = _dual_iterate(tableau, basis, at_upper, full_lower, full_upper, self.cost, self.max_iter, deadline)
        if outcome == 'infeasible':
            return _INFEASIBLE
        if outcome == 'time-limit':
            return _TIMED_OUT
        if outcome != 'optimal':
            return None
        return self._finish(tableau, basis, at_upper, full_lower, full_upper, deadline)


def _relax(program, lower, upper, deadline=None):
    if not program.empty_rows_feasible:
        return None, _INFEASIBLE
    relaxation = _Relaxation(program, lower, upper)
    return relaxation, relaxation.solve(deadline)


def solve_lp(program, lower=None, upper=None):
    """Solve the LP relaxation (0 <= x <= 1 unless bounds are given)."""
    lower = np.zeros(program.n_vars) if lower is None else np.asarray(lower, dtype=float)
    upper = np.ones(program.n_vars) if upper is None else np.asarray(upper, dtype=float)
    _, node = _relax(program, lower, upper)
    if not node.feasible:
        return Solution(SolveStatus.INFEASIBLE, np.zeros(program.n_vars), float('nan'))
    x = node.x
    if _is_integral(x) and program.is_feasible(np.round(x)):
        x = np.round(x)
        return Solution(SolveStatus.OPTIMAL, x, program.value(x))
    return Solution(SolveStatus.RELAXATION_FRACTIONAL, x, node.value)


# ═══════════════════════════════════════════════════════════════
# ROUNDING HEURISTIC
# ═══════════════════════════════════════════════════════════════

def _greedy_round(program, lp_values):
    """
    Build a feasible 0/1 point from LP values: keep the LP's ones when that
    is feasible, then switch on fractional variables in decreasing LP value
    as long as every row still holds.
    """
    matrix, relations, rhs = program.dense
    x = np.where(lp_values >= 1 - INTEGRALITY_TOL, 1.0, 0.0)
    if not _rows_hold(matrix @ x, relations, rhs):
        x = np.zeros(program.n_vars)
        if not _rows_hold(np.zeros(len(rhs)), relations, rhs):
            return None
        candidates = np.flatnonzero(lp_values > INTEGRALITY_TOL)
    else:
        candidates = np.flatnonzero((lp_values > INTEGRALITY_TOL) & (x == 0))

    order = sorted(candidates, key=lambda j: (-lp_values[j], j))
    activity = matrix @ x
    for j in order:
        trial = activity + matrix[:, j]
        if _rows_hold(trial, relations, rhs):
            x[j] = 1.0
            activity = trial
    return x


def relax_and_round(program):
    """
    LP relaxation followed by greedy rounding. The gap to the LP bound is
    reported in ``bound_gap``.
    """
    lp = solve_lp(program)
    if lp.status == SolveStatus.INFEASIBLE:
        return lp
    if lp.status == SolveStatus.OPTIMAL:
        return lp
    x = _greedy_round(program, lp.values)
    if x is None:
        return Solution(SolveStatus.INFEASIBLE_UNPROVEN, np.zeros(program.n_vars), float('nan'),
                        bound_gap=float('inf'))
    value = program.value(x)
    gap = max(lp.objective_value - value, 0.0)
    status = SolveStatus.OPTIMAL if gap <= 1e-9 else SolveStatus.FEASIBLE
    return Solution(status, x, value, bound_gap=gap)


# ═══════════════════════════════════════════════════════════════
# BRANCH AND BOUND
# ═══════════════════════════════════════════════════════════════

def _branching_variable(x, lower, upper):
    free = upper - lower > 0.5
    fractionality = np.where(free, np.abs(x - np.round(x)), 0.0)
    if fractionality.max(initial=0.0) <= INTEGRALITY_TOL:
        return None
    distance_to_half = np.abs(x - 0.5)
    distance_to_half[fractionality <= INTEGRALITY_TOL] = np.inf
    return int(np.argmin(distance_to_half))


class _Incumbent:
    """Best integer point so far and the pruning rule it implies."""

    def __init__(self, program, gap_tolerance):
        self.program = program
        self.gap_tolerance = gap_tolerance
        # Integer objective coefficients give integer optima: a bound only
        # matters if it reaches the next integer above the incumbent.
        self.integral = bool(np.all(program.objective == np.round(program.objective)))
        self.x = None
        self.value = -np.inf

    def offer(self, candidate):
        if candidate is None or not self.program.is_feasible(candidate):
            return
        value = self.program.value(candidate)
        if value > self.value + 1e-9:
            self.x, self.value = np.asarray(candidate, dtype=float), value

    def best_possible(self, bound):
        return math.floor(bound + 1e-6) if self.integral else bound

    def prunes(self, bound):
        if self.x is None:
            return False
        bound = self.best_possible(bound)
        slack = max(1e-9 * (1 + abs(self.value)), self.gap_tolerance * max(1.0, abs(self.value)))
        return bound <= self.value + slack


def solve_ip(program, time_limit=None, gap_tolerance=0.0, start=None):
    """
    Best-first branch and bound. Children are re-solved from the parent's
    basis with the dual simplex, and greedy rounding of every node's LP
    point feeds the incumbent. ``start``, a known feasible 0/1 point, seeds
    the incumbent. With a time limit the best incumbent is returned as
    FEASIBLE together with the gap to the best open bound.
    """
    deadline = None if time_limit is None else time.monotonic() + time_limit
    n = program.n_vars
    lower0, upper0 = np.zeros(n), np.ones(n)
    label = program.label or 'program'

    incumbent = _Incumbent(program, gap_tolerance)
    if start is not None:
        incumbent.offer(np.round(np.asarray(start, dtype=float)))

    relaxation, root = _relax(program, lower0, upper0, deadline)
    if root.status == 'time-limit':
        logger.warning('%s: time limit reached while solving the root relaxation', label)
        if incumbent.x is None:
            return Solution(SolveStatus.INFEASIBLE_UNPROVEN, np.zeros(n), float('nan'), bound_gap=float('inf'))
        return Solution(SolveStatus.FEASIBLE, incumbent.x, incumbent.value, bound_gap=float('inf'))
    if not root.feasible:
        return Solution(SolveStatus.INFEASIBLE, np.zeros(n), float('nan'))
    if _is_integral(root.x) and program.is_feasible(np.round(root.x)):
        x = np.round(root.x)
        return Solution(SolveStatus.OPTIMAL, x, program.value(x), nodes=1)
    incumbent.offer(_greedy_round(program, root.x))

    counter = itertools.count()
    heap = [(-root.value, next(counter), lower0, upper0, root, relaxation)]
    nodes = 1
    open_bounds = []

    while heap:
        if _deadline_passed(deadline):
            break
        negative_bound, _, lower, upper, node, owner = heapq.heappop(heap)
        if incumbent.prunes(-negative_bound):
            continue
        j = _branching_variable(node.x, lower, upper)
        if j is None:
            continue
        tableau = owner.tableau(node.basis)
        for fixed in (1.0, 0.0):
            child_lower, child_upper = lower.copy(), upper.copy()
            child_lower[j] = child_upper[j] = fixed
            child_owner, child = owner, None
            if tableau is not None:
                child = owner.reoptimize(tableau, node, child_lower, child_upper, deadline)
            if child is None:
                child_owner, child = _relax(program, child_lower, child_upper, deadline)
            nodes += 1
            if child.status == 'time-limit':
                open_bounds.append(-negative_bound)
                break
            if not child.feasible or incumbent.prunes(child.value):
                continue
            if _is_integral(child.x):
                incumbent.offer(np.round(child.x))
                continue
            incumbent.offer(_greedy_round(program, child.x))
            heapq.heappush(heap, (-child.value, next(counter), child_lower, child_upper, child, child_owner))
        if open_bounds:
            break

    timed_out = bool(open_bounds) or (bool(heap) and _deadline_passed(deadline))
    if timed_out:
        open_bound = max([-item[0] for item in heap] + open_bounds, default=-np.inf)
        if incumbent.x is None:
            logger.warning('%s: time limit reached before any integer solution (%d nodes)', label, nodes)
            return Solution(SolveStatus.INFEASIBLE_UNPROVEN, np.zeros(n), float('nan'),
                            bound_gap=float('inf'), nodes=nodes)
        gap = max(incumbent.best_possible(open_bound) - incumbent.value, 0.0)
        logger.info('%s: time limit reached, gap %.4g after %d nodes', label, gap, nodes)
        status = SolveStatus.OPTIMAL if gap <= 1e-9 else SolveStatus.FEASIBLE
        return Solution(status, incumbent.x, incumbent.value, bound_gap=gap, nodes=nodes)

    if incumbent.x is None:
        return Solution(SolveStatus.INFEASIBLE, np.zeros(n), float('nan'), nodes=nodes)
    logger.debug('%s: optimal after %d nodes', label, nodes)
    return Solution(SolveStatus.OPTIMAL, incumbent.x, incumbent.value, nodes=nodes)


# ═══════════════════════════════════════════════════════════════
# TEXT DUMP
# ═══════════════════════════════════════════════════════════════

def _linear_expression(coefficients, program):
    terms = []
    for index in sorted(coefficients):
        value = coefficients[index]
        if value == 0:
            continue
        sign = '-' if value < 0 else '+'
        terms.append(f'{sign} {abs(value):.12g} {program.variable_name(index)}')
    if not terms:
        return '0'
    text = ' '.join(terms)
    return text[2:] if text.startswith('+ ') else text


def to_lp_format(program):
    """Render the program in CPLEX LP text format."""
    objective = {i: v for i, v in enumerate(program.objective)}
    lines = [f'\\ {program.label or "program"}', 'Maximize', f' obj: {_linear_expression(objective, program)}', 'Subject To']
    for i, constraint in enumerate(program.constraints):
        name = constraint.name or f'c{i}'
        lines.append(f' {name}: {_linear_expression(constraint.coefficients, program)} {constraint.relation} {constraint.rhs:.12g}')
    lines.append('Binaries')
    names = [program.variable_name(i) for i in range(program.n_vars)]
    for start in range(0, len(names), 10):
        lines.append(' ' + ' '.join(names[start:start + 10]))
    lines.append('End')
    return '\n'.join(lines) + '\n'

# File: matching/models.py
# Domain types shared by every stage of the pipeline.
# Nothing here is persisted: choices are Django enumerations, records are
# frozen dataclasses.

from dataclasses import dataclass, field
from functools import cached_property

from django.db import models

from .exceptions import SpecError


class CovariateKind(models.TextChoices):
    CONTINUOUS = 'continuous', 'Continuous'
    NOMINAL = 'nominal', 'Nominal'
    BINARY = 'binary', 'Binary'


class Level(models.TextChoices):
    UNIT = 'unit', 'Unit'
    CLUSTER = 'cluster', 'Cluster'


class Role(models.TextChoices):
    BALANCE = 'balance', 'Balance'
    DISTANCE_ONLY = 'distance-only', 'Distance only'
    OUTCOME = 'outcome', 'Outcome'
    IGNORE = 'ignore', 'Ignore'


class MissingPolicy(models.TextChoices):
    IMPUTE = 'mean-impute-with-indicator', 'Mean impute with indicator'
    ERROR = 'error', 'Error'


class ConstraintKind(models.TextChoices):
    MEAN = 'mean', 'Mean balance'
    FINE = 'fine', 'Fine balance'
    KS = 'ks', 'Kolmogorov-Smirnov balance'
    EXACT = 'exact', 'Exact matching'


class Strategy(models.TextChoices):
    DYNAMIC = 'dynamic', 'Dynamic cardinality matching'
    MYOPIC_CARDINALITY = 'myopic-cardinality', 'Myopic cardinality matching'
    MYOPIC_OPTIMAL = 'myopic-optimal', 'Myopic optimal matching'


class Objective(models.TextChoices):
    MAX_CARDINALITY = 'max-cardinality', 'Maximum cardinality'
    MIN_DISTANCE = 'min-distance', 'Minimum distance'


# Cluster attribute usable as an exact-matching key
STRATUM = 'stratum'
MISSING_CATEGORY = 'missing'
INDICATOR_SUFFIX = '_missing'


@dataclass(frozen=True)
class CovariateSchema:
    """One column of the two-level dataset."""
    name: str
    kind: str
    level: str
    role: str = Role.BALANCE
    missing_policy: str = MissingPolicy.ERROR
    categories: tuple = ()
    generated: bool = False

    def __post_init__(self):
        if not self.name:
            raise SpecError('Covariate name must not be empty')
        if self.kind == CovariateKind.NOMINAL and not self.categories:
            raise SpecError(f'Nominal covariate "{self.name}" needs at least one category')

    @property
    def is_numeric(self):
        return self.kind in (CovariateKind.CONTINUOUS, CovariateKind.BINARY)

    @property
    def is_nominal(self):
        return self.kind == CovariateKind.NOMINAL

    @property
    def is_outcome(self):
        return self.role == Role.OUTCOME


@dataclass(frozen=True)
class Unit:
    unit_id: str
    cluster_id: str
    covariates: tuple
    outcome: float | None = None
    imputed: frozenset = frozenset()


@dataclass(frozen=True)
class Cluster:
    cluster_id: str
    treated: bool
    covariates: tuple
    stratum: str | None = None
    units: tuple = ()

    @property
    def size(self):
        return len(self.units)


@dataclass(frozen=True)
class Dataset:
    """Validated two-level sample. Pooled SDs are fixed at load time."""
    schema: tuple
    clusters: tuple
    pooled_sd: dict = field(default_factory=dict)
    degenerate: frozenset = frozenset()

    @cached_property
    def unit_schema(self):
        return tuple(s for s in self.schema if s.level == Level.UNIT and not s.is_outcome)

    @cached_property
    def cluster_schema(self):
        return tuple(s for s in self.schema if s.level == Level.CLUSTER and not s.is_outcome)

    @cached_property
    def outcome_name(self):
        names = [s.name for s in self.schema if s.is_outcome]
        return names[0] if names else None

    @cached_property
    def _unit_positions(self):
        return {s.name: i for i, s in enumerate(self.unit_schema)}

    @cached_property
    def _cluster_positions(self):
        return {s.name: i for i, s in enumerate(self.cluster_schema)}

    @cached_property
    def _by_name(self):
        return {s.name: s for s in self.schema}

    def covariate(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise SpecError(f'Unknown covariate "{name}"') from None

    def unit_index(self, name):
        try:
            return self._unit_positions[name]
        except KeyError:
            raise SpecError(f'"{name}" is not a unit-level covariate') from None

    def cluster_index(self, name):
        try:
            return self._cluster_positions[name]
        except KeyError:
            raise SpecError(f'"{name}" is not a cluster-level covariate') from None

    @cached_property
    def units(self):
        return tuple(u for c in self.clusters for u in c.units)

    @cached_property
    def cluster_by_id(self):
        return {c.cluster_id: c for c in self.clusters}

    @cached_property
    def unit_by_id(self):
        return {u.unit_id: u for u in self.units}

    @cached_property
    def treated_clusters(self):
        return tuple(c for c in self.clusters if c.treated)

    @cached_property
    def control_clusters(self):
        return tuple(c for c in self.clusters if not c.treated)

    def is_treated_unit(self, unit):
        return self.cluster_by_id[unit.cluster_id].treated

    def unit_value(self, unit, name):
        return unit.covariates[self.unit_index(name)]

    def cluster_value(self, cluster, name):
        if name == STRATUM:
            return cluster.stratum
        return cluster.covariates[self.cluster_index(name)]

    def is_degenerate(self, name):
        return name in self.degenerate


@dataclass(frozen=True)
class BalanceConstraint:
    kind: str
    covariate: str
    level: str = Level.UNIT
    tolerance: float = 0.1
    slack: int = 0
    max_gap: float = 0.1
    grid_size: int = 10
    weight_by_cluster_size: bool = False

    def __post_init__(self):
        if self.kind == ConstraintKind.KS and not 0 < self.max_gap <= 1:
            raise SpecError(f'KS max_gap for "{self.covariate}" must lie in (0, 1]')
        if self.kind == ConstraintKind.FINE and self.slack < 0:
            raise SpecError(f'Fine-balance slack for "{self.covariate}" must be >= 0')
        if self.kind == ConstraintKind.MEAN and self.tolerance < 0:
            raise SpecError(f'Mean tolerance for "{self.covariate}" must be >= 0')
        if self.weight_by_cluster_size and self.level != Level.CLUSTER:
            raise SpecError('Size weighting applies to cluster-level constraints only')

    def describe(self):
        if self.kind == ConstraintKind.MEAN:
            weighted = ', weighted' if self.weight_by_cluster_size else ''
            return f'mean({self.covariate} <= {self.tolerance:g} SD{weighted})'
        if self.kind == ConstraintKind.FINE:
            return f'fine({self.covariate}, slack {self.slack})'
        if self.kind == ConstraintKind.KS:
            return f'ks({self.covariate} <= {self.max_gap:g}, grid {self.grid_size})'
        return f'exact({self.covariate})'


@dataclass(frozen=True)
class BalanceSpec:
    """The unit-level set and the cluster-level set of balance requirements."""
    unit_constraints: tuple = ()
    cluster_constraints: tuple = ()

    def __post_init__(self):
        for c in self.unit_constraints:
            if c.level != Level.UNIT:
                raise SpecError(f'{c.describe()} is listed with the unit constraints but is cluster-level')
        for c in self.cluster_constraints:
            if c.level != Level.CLUSTER:
                raise SpecError(f'{c.describe()} is listed with the cluster constraints but is unit-level')

    @property
    def unit_balance_constraints(self):
        return tuple(c for c in self.unit_constraints if c.kind != ConstraintKind.EXACT)

    @property
    def unit_exact_constraints(self):
        return tuple(c for c in self.unit_constraints if c.kind == ConstraintKind.EXACT)

    @property
    def cluster_exact_constraints(self):
        return tuple(c for c in self.cluster_constraints if c.kind == ConstraintKind.EXACT)

    @property
    def cluster_balance_constraints(self):
        return tuple(c for c in self.cluster_constraints if c.kind != ConstraintKind.EXACT)


@dataclass(frozen=True)
class UnitPair:
    treated_unit: str
    control_unit: str
    distance: float = 0.0


@dataclass(frozen=True)
class ClusterPair:
    pair_id: int
    treated_cluster: str
    control_cluster: str
    m: int
    total_distance: float
    unit_pairs: tuple = ()


@dataclass(frozen=True)
class MatchedSample:
    """Matched cluster pairs and, inside each, the matched unit pairs."""
    cluster_pairs: tuple
    strategy: str = Strategy.DYNAMIC
    subproblems: int = field(default=0, compare=False)
    statuses: dict = field(default_factory=dict, compare=False)
    timings: dict = field(default_factory=dict, compare=False)
    infeasibility: tuple = field(default=(), compare=False)

    @property
    def n_cluster_pairs(self):
        return len(self.cluster_pairs)

    @property
    def n_unit_pairs(self):
        return sum(len(p.unit_pairs) for p in self.cluster_pairs)

    @property
    def n_units(self):
        return 2 * self.n_unit_pairs

    @property
    def total_distance(self):
        return sum(p.total_distance for p in self.cluster_pairs)

    @property
    def is_empty(self):
        return not self.cluster_pairs

    def unit_pairs(self):
        for pair in self.cluster_pairs:
            yield from pair.unit_pairs

    def matched_unit_ids(self):
        treated = [u.treated_unit for u in self.unit_pairs()]
        control = [u.control_unit for u in self.unit_pairs()]
        return treated, control

    def matched_cluster_ids(self):
        return ([p.treated_cluster for p in self.cluster_pairs],
                [p.control_cluster for p in self.cluster_pairs])

    def validate(self, dataset):
        """Check the pairing invariants against the dataset."""
        from .exceptions import StructuralError

        seen_clusters, seen_units = set(), set()
        for pair in self.cluster_pairs:
            treated = dataset.cluster_by_id.get(pair.treated_cluster)
            control = dataset.cluster_by_id.get(pair.control_cluster)
            if treated is None or control is None:
                raise StructuralError(f'Cluster pair {pair.pair_id} references an unknown cluster')
            if not treated.treated or control.treated:
                raise StructuralError(f'Cluster pair {pair.pair_id} must hold one treated and one control cluster')
            for cid in (pair.treated_cluster, pair.control_cluster):
                if cid in seen_clusters:
                    raise StructuralError(f'Cluster "{cid}" appears in more than one pair')
                seen_clusters.add(cid)
            for up in pair.unit_pairs:
                t = dataset.unit_by_id.get(up.treated_unit)
                c = dataset.unit_by_id.get(up.control_unit)
                if t is None or c is None:
                    raise StructuralError(f'Cluster pair {pair.pair_id} references an unknown unit')
                if t.cluster_id != pair.treated_cluster or c.cluster_id != pair.control_cluster:
                    raise StructuralError(f'Unit pair ({up.treated_unit}, {up.control_unit}) lies outside its cluster pair')
                for uid in (up.treated_unit, up.control_unit):
                    if uid in seen_units:
                        raise StructuralError(f'Unit "{uid}" appears in more than one pair')
                    seen_units.add(uid)
        return True

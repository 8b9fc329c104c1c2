# File: matching/distance.py
# ROBUST MAHALANOBIS DISTANCES, PROPENSITY SCORES AND CALIPERS

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit, log_expit
from scipy.stats import rankdata

from .exceptions import SpecError
from .models import Level, Role

logger = logging.getLogger(__name__)

RIDGE = 1e-8
CALIPER_PENALTY = 1000.0
SCORE_CLAMP = 1e-6
IRLS_MAX_ITER = 25
IRLS_TOL = 1e-8


@dataclass(frozen=True)
class DistanceMatrix:
    """Treated ids by control ids; +inf marks a forbidden edge."""
    rows: tuple
    cols: tuple
    values: np.ndarray
    flags: frozenset = frozenset()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(self.rows), len(self.cols)):
            raise ValueError('Distance matrix shape does not match its labels')
        finite = values[np.isfinite(values)]
        if np.any(finite < 0):
            raise ValueError('Distances must be non-negative')
        object.__setattr__(self, 'values', values)

    @property
    def shape(self):
        return self.values.shape

    def entry(self, i, j):
        return float(self.values[i, j])

    def write_csv(self, path):
        """Dump for debugging: one row per treated id, one column per control id."""
        with open(path, 'w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle)
            writer.writerow(['treated'] + list(self.cols))
            for label, row in zip(self.rows, self.values):
                writer.writerow([label] + [repr(float(v)) for v in row])


# ═══════════════════════════════════════════════════════════════
# RANK-BASED MAHALANOBIS
# ═══════════════════════════════════════════════════════════════

class RankMahalanobis:
    """
    Rank-based Mahalanobis distance fitted once on a pooled sample.

    Each covariate is replaced by its average ranks. The rank covariance is
    rescaled on both sides so every diagonal entry equals the variance of
    untied ranks 1..n; ties then do not inflate a covariate's weight and the
    correlations between covariates are kept.
    """

    def __init__(self, matrix, names=None):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim == 1:
            matrix = matrix[:, None]
        n, p = matrix.shape
        names = list(names) if names is not None else [f'x{k}' for k in range(p)]
        self.flags = set()

        keep = []
        for k in range(p):
            if np.unique(matrix[:, k]).size >= 2:
                keep.append(k)
            else:
                logger.warning('Dropping covariate "%s" from the distance: fewer than two distinct values', names[k])
        self.names = [names[k] for k in keep]
        self.dropped = [names[k] for k in range(p) if k not in keep]

        if not keep or n < 2:
            self.flags.add('no-covariates')
            self.ranks = np.zeros((n, 0))
            self.inverse = np.zeros((0, 0))
            return

        ranks = np.column_stack([rankdata(matrix[:, k]) for k in keep])
        covariance = np.atleast_2d(np.cov(ranks, rowvar=False))
        untied = np.var(np.arange(1, n + 1), ddof=1)
        ratio = np.diag(np.sqrt(untied / np.diag(covariance)))
        covariance = ratio @ covariance @ ratio

        if np.linalg.matrix_rank(covariance) < covariance.shape[0]:
            logger.warning('Rank covariance is singular; adding a ridge of %g x trace', RIDGE)
            covariance = covariance + RIDGE * np.trace(covariance) * np.eye(covariance.shape[0])
            self.flags.add('ridge')

        self.ranks = ranks
        self.inverse = np.linalg.inv(covariance)

    def distances(self, rows, cols):
        """Squared distances between pooled rows ``rows`` and ``cols``."""
        rows, cols = list(rows), list(cols)
        if self.ranks.shape[1] == 0:
            return np.zeros((len(rows), len(cols)))
        if not rows or not cols:
            return np.zeros((len(rows), len(cols)))
        return cdist(self.ranks[rows], self.ranks[cols], 'mahalanobis', VI=self.inverse) ** 2


def robust_mahalanobis(treated_values, control_values, treated_ids=None, control_ids=None, names=None):
    """
    Robust Mahalanobis distances between two groups, ranks taken over the
    two groups pooled.
    """
    treated_values = np.atleast_2d(np.asarray(treated_values, dtype=float))
    control_values = np.atleast_2d(np.asarray(control_values, dtype=float))
    n_t, n_c = treated_values.shape[0], control_values.shape[0]
    model = RankMahalanobis(np.vstack([treated_values, control_values]), names)
    values = model.distances(range(n_t), range(n_t, n_t + n_c))
    return DistanceMatrix(
        rows=tuple(treated_ids) if treated_ids is not None else tuple(range(n_t)),
        cols=tuple(control_ids) if control_ids is not None else tuple(range(n_c)),
        values=values,
        flags=frozenset(model.flags),
    )


# ═══════════════════════════════════════════════════════════════
# PROPENSITY SCORE
# ═══════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class PropensityFit:
    scores: np.ndarray
    coefficients: np.ndarray
    converged: bool
    iterations: int
    dropped: tuple = ()


def independent_columns(design):
    """Indices of a maximal set of linearly independent columns, left to right."""
    keep = []
    for k in range(design.shape[1]):
        trial = keep + [k]
        if np.linalg.matrix_rank(design[:, trial]) == len(trial):
            keep.append(k)
    return keep


def _log_likelihood(design, z, beta):
    eta = design @ beta
    return float(np.sum(z * log_expit(eta) + (1 - z) * log_expit(-eta)))


def fit_logistic(covariates, treated, max_iter=IRLS_MAX_ITER, tol=IRLS_TOL):
    """
    Logistic regression of ``treated`` on an intercept plus ``covariates``,
    fitted by iteratively reweighted least squares. Collinear columns are
    dropped and reported with coefficient 0.
    """
    z = np.asarray(treated, dtype=float)
    n = z.size
    covariates = np.asarray(covariates, dtype=float)
    covariates = np.zeros((n, 0)) if covariates.size == 0 else covariates.reshape(n, -1)
    design = np.column_stack([np.ones(n), covariates])
    keep = independent_columns(design)
    dropped = tuple(k - 1 for k in range(design.shape[1]) if k not in keep)
    if dropped:
        logger.warning('Propensity model: dropped %d collinear column(s)', len(dropped))
    reduced = design[:, keep]

    beta = np.zeros(reduced.shape[1])
    previous = _log_likelihood(reduced, z, beta)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        eta = reduced @ beta
        p = expit(eta)
        w = np.maximum(p * (1 - p), 1e-10)
        working = eta + (z - p) / w
        sqrt_w = np.sqrt(w)
        beta, *_ = np.linalg.lstsq(reduced * sqrt_w[:, None], working * sqrt_w, rcond=None)
        current = _log_likelihood(reduced, z, beta)
        if abs(current - previous) <= tol * max(abs(previous), 1e-300):
            converged = True
            break
        previous = current

    if not converged:
        logger.warning('Propensity model did not converge in %d iterations (separation?)', max_iter)

    coefficients = np.zeros(design.shape[1])
    coefficients[keep] = beta
    scores = np.clip(expit(reduced @ beta), SCORE_CLAMP, 1 - SCORE_CLAMP)
    return PropensityFit(scores=scores, coefficients=coefficients, converged=converged,
                         iterations=iterations, dropped=dropped)


def estimate_propensity(dataset, covariates, level=Level.UNIT):
    """Propensity scores for every unit (or cluster) in dataset order."""
    matrix, _ = design_matrix(dataset, covariates, level)
    if level == Level.UNIT:
        treated = [dataset.is_treated_unit(u) for u in dataset.units]
    else:
        treated = [c.treated for c in dataset.clusters]
    return fit_logistic(matrix, treated)


def apply_caliper(matrix, treated_scores, control_scores, width, sd=None):
    """
    Soft caliper: entries whose score gap exceeds width * SD(score) get
    1000 * excess / SD added.
    """
    if width is None or math.isinf(width):
        return matrix
    if width <= 0:
        raise SpecError('Caliper width must be positive')
    treated_scores = np.asarray(treated_scores, dtype=float)
    control_scores = np.asarray(control_scores, dtype=float)
    if sd is None:
        pooled = np.concatenate([treated_scores, control_scores])
        sd = float(np.std(pooled, ddof=1)) if pooled.size > 1 else 0.0
    if sd == 0:
        return matrix
    gap = np.abs(treated_scores[:, None] - control_scores[None, :])
    excess = np.maximum(gap - width * sd, 0.0)
    values = matrix.values + CALIPER_PENALTY * excess / sd
    return DistanceMatrix(rows=matrix.rows, cols=matrix.cols, values=values, flags=matrix.flags)


# ═══════════════════════════════════════════════════════════════
# STUDY-WIDE DISTANCE MODELS
# ═══════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class DistanceConfig:
    covariates: tuple = None
    propensity_covariates: tuple = None
    caliper: float | None = 0.2
    cluster_covariates: tuple = None


def _default_covariates(schema):
    return tuple(s.name for s in schema if s.role in (Role.BALANCE, Role.DISTANCE_ONLY))


def design_matrix(dataset, covariates, level=Level.UNIT):
    """
    Numeric matrix for the named covariates; nominal covariates expand to
    one indicator per category (first category dropped).
    """
    records = dataset.units if level == Level.UNIT else dataset.clusters
    columns, names = [], []
    for name in covariates:
        spec = dataset.covariate(name)
        if spec.level != level or spec.is_outcome:
            raise SpecError(f'"{name}" is not a {level}-level covariate')
        index = dataset.unit_index(name) if level == Level.UNIT else dataset.cluster_index(name)
        values = [r.covariates[index] for r in records]
        if spec.is_nominal:
            observed = sorted(set(values), key=lambda v: (v not in spec.categories, str(v)))
            for category in observed[1:]:
                columns.append([1.0 if v == category else 0.0 for v in values])
                names.append(f'{name}={category}')
        else:
            columns.append([float(v) for v in values])
            names.append(name)
    if not columns:
        return np.zeros((len(records), 0)), names
    return np.column_stack(columns), names


@dataclass
class LevelDistances:
    """
    Distance model for one level: ranks, inverse covariance and propensity
    scores are fitted once on the whole pre-match sample, then sliced into
    per-pair blocks.
    """
    ids: list
    position: dict
    model: RankMahalanobis
    scores: np.ndarray | None
    score_sd: float
    caliper: float | None
    flags: set = field(default_factory=set)

    @classmethod
    def fit(cls, dataset, config, level=Level.UNIT):
        schema = dataset.unit_schema if level == Level.UNIT else dataset.cluster_schema
        if level == Level.UNIT:
            covariates = config.covariates if config.covariates is not None else _default_covariates(schema)
            ids = [u.unit_id for u in dataset.units]
        else:
            covariates = config.cluster_covariates if config.cluster_covariates is not None else _default_covariates(schema)
            ids = [c.cluster_id for c in dataset.clusters]
        matrix, names = design_matrix(dataset, covariates, level)
        model = RankMahalanobis(matrix, names)
        flags = set(model.flags)

        scores, score_sd = None, 0.0
        if config.caliper is not None and not math.isinf(config.caliper):
            propensity = config.propensity_covariates if (config.propensity_covariates is not None and level == Level.UNIT) else covariates
            fit = estimate_propensity(dataset, propensity, level)
            if not fit.converged:
                flags.add('propensity-not-converged')
            scores = fit.scores
            score_sd = float(np.std(scores, ddof=1)) if scores.size > 1 else 0.0

        logger.info('Fitted %s-level distance on %d covariate column(s)', level, len(model.names))
        return cls(ids=ids, position={i: k for k, i in enumerate(ids)}, model=model,
                   scores=scores, score_sd=score_sd, caliper=config.caliper, flags=flags)

    def block(self, treated_ids, control_ids):
        rows = [self.position[i] for i in treated_ids]
        cols = [self.position[j] for j in control_ids]
        matrix = DistanceMatrix(rows=tuple(treated_ids), cols=tuple(control_ids),
                                values=self.model.distances(rows, cols), flags=frozenset(self.flags))
        if self.scores is not None:
            matrix = apply_caliper(matrix, self.scores[rows], self.scores[cols], self.caliper, self.score_sd)
        return matrix

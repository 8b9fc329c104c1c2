# File: matching/inference.py
# RANDOMIZATION INFERENCE FOR CLUSTER-LEVEL TREATMENT
#
# Scores are ranks of Huber-regression residuals; each matched cluster pair
# contributes Q_k = w_k * (mean score in school 1 - mean score in school 2)
# and the statistic is T = sum_k B_k Q_k with B_k = +1 when school 1 is the
# treated school. Under the null each B_k is a fair coin flip.

import logging
import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np
import statsmodels.api as sm
from django.conf import settings
from django.db import models
from scipy.stats import norm, rankdata

from .distance import design_matrix, independent_columns
from .exceptions import ConfigError, MissingOutcomeError, NoEstimateError, StructuralError
from .models import Level, Role

logger = logging.getLogger(__name__)

HUBER_T = 1.345
HUBER_MAXITER = 50
HUBER_TOL = 1e-8
BRACKET_SDS = 10.0
HL_TOL = 1e-6
GAMMA_MAX = 100.0
GAMMA_TOL = 0.01
# Exact sign-sum distributions
LATTICE_SIZE = 1 << 21
LATTICE_DENOMINATOR = 10 ** 6


class WeightRule(models.TextChoices):
    CONSTANT = 'constant', 'Constant'
    SIZE_PROPORTIONAL = 'size-proportional', 'Proportional to pair size'


class InferenceMode(models.TextChoices):
    NORMAL = 'normal', 'Normal approximation'
    EXACT = 'exact', 'Exact null distribution'


def _exact_max_k():
    if settings.configured:
        return getattr(settings, 'MULTIMATCH_EXACT_MAX_K', 200)
    return 200


# ═══════════════════════════════════════════════════════════════
# MATCHED DATA
# ═══════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class PairedOutcomes:
    """
    Matched units flattened for inference. ``first`` marks units of school 1
    (the treated school) of their pair; ``treated`` is the cluster Z.
    """
    outcomes: np.ndarray
    covariates: np.ndarray
    pair: np.ndarray
    first: np.ndarray
    treated: np.ndarray

    @property
    def n_pairs(self):
        return int(self.pair.max()) + 1 if self.pair.size else 0

    @property
    def n_units(self):
        return int(self.outcomes.size)

    def shifted(self, tau):
        """Outcomes with tau removed from treated units: Y - tau * Z."""
        return self.outcomes - tau * self.treated

    @classmethod
    def build(cls, outcomes, covariates, pair, first, treated):
        outcomes = np.asarray(outcomes, dtype=float)
        n = outcomes.size
        covariates = np.asarray(covariates, dtype=float)
        covariates = np.zeros((n, 0)) if covariates.size == 0 else covariates.reshape(n, -1)
        pair = np.asarray(pair, dtype=int)
        first = np.asarray(first, dtype=bool)
        treated = np.asarray(treated, dtype=float)
        for k in range(int(pair.max()) + 1 if n else 0):
            members = pair == k
            if not members.any() or not first[members].any() or first[members].all():
                raise StructuralError(f'Matched pair {k} needs units in both schools')
            z1 = np.unique(treated[members & first])
            z2 = np.unique(treated[members & ~first])
            if z1.size != 1 or z2.size != 1 or z1[0] + z2[0] != 1:
                raise StructuralError(f'Matched pair {k} must hold one treated and one control school')
        return cls(outcomes=outcomes, covariates=covariates, pair=pair, first=first, treated=treated)

    @classmethod
    def from_sample(cls, sample, dataset, covariates=None):
        """Matched units of every cluster pair that has at least one unit pair."""
        if dataset.outcome_name is None:
            raise ConfigError('No outcome column is declared in the schema')
        if covariates is None:
            covariates = [s.name for s in dataset.unit_schema if s.role == Role.BALANCE]
        matrix, _ = design_matrix(dataset, covariates, Level.UNIT)
        row_of = {u.unit_id: k for k, u in enumerate(dataset.units)}

        outcomes, rows, pair, first, treated = [], [], [], [], []
        k = 0
        skipped = 0
        for cluster_pair in sample.cluster_pairs:
            if not cluster_pair.unit_pairs:
                skipped += 1
                continue
            for up in cluster_pair.unit_pairs:
                for unit_id, is_first in ((up.treated_unit, True), (up.control_unit, False)):
                    unit = dataset.unit_by_id[unit_id]
                    if unit.outcome is None:
                        raise MissingOutcomeError(f'Matched unit "{unit_id}" has no outcome')
                    outcomes.append(unit.outcome)
                    rows.append(row_of[unit_id])
                    pair.append(k)
                    first.append(is_first)
                    treated.append(1.0 if is_first else 0.0)
            k += 1
        if skipped:
            logger.info('Skipping %d cluster pair(s) without matched units', skipped)
        if k == 0:
            raise StructuralError('The matched sample has no unit pairs to analyze')
        return cls.build(outcomes, matrix[rows] if rows else matrix[:0], pair, first, treated)


# ═══════════════════════════════════════════════════════════════
# SCORES AND THE STATISTIC
# ═══════════════════════════════════════════════════════════════

def huber_converged(fit, tol=HUBER_TOL):
    """True when the deviance moved by at most tol in the last iteration."""
    deviance = fit.fit_history.get('deviance', ())
    if len(deviance) < 2:
        return False
    return bool(abs(float(deviance[-1]) - float(deviance[-2])) <= tol)


@dataclass(frozen=True)
class RankScores:
    q: np.ndarray
    method: str = 'huber'
    fallback: bool = False


def huber_residual_ranks(outcomes, covariates=None):
    """
    Average ranks of the residuals from a Huber M-regression of the
    outcomes on an intercept plus the covariates. Falls back to least
    squares residuals when the residual MAD is zero or the fit does not
    converge.
    """
    y = np.asarray(outcomes, dtype=float)
    n = y.size
    covariates = np.zeros((n, 0)) if covariates is None else np.asarray(covariates, dtype=float)
    covariates = np.zeros((n, 0)) if covariates.size == 0 else covariates.reshape(n, -1)
    design = np.column_stack([np.ones(n), covariates])
    design = design[:, independent_columns(design)]

    scale = max(1.0, float(np.abs(y).max(initial=0.0)))
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    residuals = y - design @ beta
    # Round-off from an exact fit must not break ties
    residuals[np.abs(residuals) <= 1e-9 * scale] = 0.0
    mad = float(np.median(np.abs(residuals - np.median(residuals))))
    if mad <= 1e-12 * scale:
        return RankScores(rankdata(residuals), method='ols')

    fit = sm.RLM(y, design, M=sm.robust.norms.HuberT(t=HUBER_T)).fit(maxiter=HUBER_MAXITER, tol=HUBER_TOL)
    if not huber_converged(fit):
        logger.warning('Huber regression did not converge in %d iterations; using least squares residuals', HUBER_MAXITER)
        return RankScores(rankdata(residuals), method='ols', fallback=True)
    return RankScores(rankdata(np.asarray(fit.resid)))


@dataclass(frozen=True)
class ScoredSample:
    b: np.ndarray
    q_pair: np.ndarray
    weights: np.ndarray
    scores: np.ndarray = field(default=None, repr=False)

    @property
    def statistic(self):
        return float(self.b @ self.q_pair)

    @property
    def variance(self):
        return float(self.q_pair @ self.q_pair)

    @property
    def is_degenerate(self):
        return self.variance == 0

    @property
    def n_pairs(self):
        return int(self.q_pair.size)

    def negated(self):
        """Same pairs with the treated side flipped: T becomes -T."""
        return ScoredSample(-self.b, self.q_pair, self.weights, self.scores)


def cluster_statistic(data, scores, weight_rule=WeightRule.CONSTANT):
    """Per-pair B_k and Q_k from unit scores."""
    scores = np.asarray(scores, dtype=float)
    k = data.n_pairs
    first = data.first
    n1 = np.bincount(data.pair[first], minlength=k).astype(float)
    n2 = np.bincount(data.pair[~first], minlength=k).astype(float)
    mean1 = np.bincount(data.pair[first], weights=scores[first], minlength=k) / n1
    mean2 = np.bincount(data.pair[~first], weights=scores[~first], minlength=k) / n2

    if weight_rule == WeightRule.SIZE_PROPORTIONAL:
        weights = (n1 + n2) / (n1 + n2).sum()
    elif weight_rule == WeightRule.CONSTANT:
        weights = np.ones(k)
    else:
        raise ConfigError(f'Unknown weight rule "{weight_rule}"')

    z1 = np.bincount(data.pair[first], weights=data.treated[first], minlength=k) / n1
    b = 2.0 * np.round(z1) - 1.0
    return ScoredSample(b=b, q_pair=weights * (mean1 - mean2), weights=weights, scores=scores)


def score_sample(data, tau=0.0, weight_rule=WeightRule.CONSTANT):
    ranks = huber_residual_ranks(data.shifted(tau), data.covariates)
    return cluster_statistic(data, ranks.q, weight_rule)


# ═══════════════════════════════════════════════════════════════
# P-VALUES
# ═══════════════════════════════════════════════════════════════

def _lattice(magnitudes):
    """
    Integer steps a_k = round(L * |Q_k|). L clears the denominators of the
    |Q_k| when they are small fractions, as mean ranks over small schools
    are, and the distribution is then exact. Otherwise L spreads sum(|Q_k|)
    over LATTICE_SIZE steps.
    """
    total = float(magnitudes.sum())
    scale = 1
    for value in magnitudes:
        fraction = Fraction(float(value)).limit_denominator(LATTICE_DENOMINATOR)
        if abs(float(fraction) - value) > 1e-12 * max(1.0, total):
            break
        scale = math.lcm(scale, fraction.denominator)
        if scale * total > LATTICE_SIZE:
            break
    else:
        return np.rint(magnitudes * scale).astype(np.int64)
    logger.info('Pair contrasts are not on a small lattice; exact tail computed on a grid of %d steps', LATTICE_SIZE)
    return np.rint(magnitudes * (LATTICE_SIZE / total)).astype(np.int64)


def _sign_distribution(steps, p_plus):
    """P(sum of a_k over the terms with s_k = +1 equals j) for j = 0..sum(a), P(s_k = +1) = p_plus."""
    probs = np.zeros(int(steps.sum()) + 1)
    probs[0] = 1.0
    reach = 0
    for step in steps:
        if step == 0:
            continue
        moved = probs[:reach + 1] * p_plus
        probs[:reach + 1] *= 1.0 - p_plus
        probs[step:step + reach + 1] += moved
        reach += int(step)
    return probs


def _upper_tail(scored, p_plus):
    max_k = _exact_max_k()
    if scored.n_pairs > max_k:
        raise ConfigError(f'Exact mode takes at most {max_k} pairs (got {scored.n_pairs}); use mode "normal"')
    # T = 2 * (sum of |Q_k| with a + sign) - sum |Q_k|, so its tail is the tail of that sum
    steps = _lattice(np.abs(scored.q_pair))
    observed = int(steps[scored.b * scored.q_pair > 0].sum())
    probs = _sign_distribution(steps, p_plus)
    return float(min(1.0, probs[observed:].sum()))


def randomization_pvalue(scored, mode=InferenceMode.NORMAL):
    """One-sided (upper tail) p-value of T under the randomization null."""
    if scored.is_degenerate:
        logger.warning('All pair contrasts are zero; the p-value is 1')
        return 1.0
    if mode == InferenceMode.EXACT:
        return _upper_tail(scored, 0.5)
    return float(norm.sf(scored.statistic / math.sqrt(scored.variance)))


def sensitivity_bound(scored, gamma, mode=InferenceMode.NORMAL):
    """
    Upper bound on the one-sided p-value when treatment odds within a pair
    may differ by up to a factor gamma.
    """
    if gamma < 1:
        raise ConfigError('Gamma must be at least 1')
    if gamma == 1:
        return randomization_pvalue(scored, mode)
    if scored.is_degenerate:
        return 1.0
    p_plus = gamma / (1.0 + gamma)
    if mode == InferenceMode.EXACT:
        return _upper_tail(scored, p_plus)
    magnitudes = np.abs(scored.q_pair)
    mean = (gamma - 1.0) / (gamma + 1.0) * magnitudes.sum()
    variance = 4.0 * gamma / (1.0 + gamma) ** 2 * scored.variance
    if variance == 0:
        return 1.0 if scored.statistic <= mean else 0.0
    return float(norm.sf((scored.statistic - mean) / math.sqrt(variance)))


# ═══════════════════════════════════════════════════════════════
# ESTIMATION BY TEST INVERSION
# ═══════════════════════════════════════════════════════════════

class _ShiftedStatistics:
    """Memoized scored samples of Y - tau * Z."""

    def __init__(self, data, weight_rule):
        self.data = data
        self.weight_rule = weight_rule
        self._cache = {}

    def at(self, tau):
        if tau not in self._cache:
            self._cache[tau] = score_sample(self.data, tau, self.weight_rule)
        return self._cache[tau]

    def remember(self, tau, scored):
        self._cache[tau] = scored

    def statistic(self, tau):
        return self.at(tau).statistic


def _scale(data):
    if data.n_units < 2:
        return 1.0
    sd = float(np.std(data.outcomes, ddof=1))
    return sd if sd > 0 else 1.0


def _bisect(predicate, lo, hi, tol):
    """predicate(lo) is True and predicate(hi) is False; returns the crossing."""
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if predicate(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def hl_estimate(data, weight_rule=WeightRule.CONSTANT, statistics=None):
    """
    Hodges-Lehmann estimate: the midpoint of sup{tau : T(tau) > 0} and
    inf{tau : T(tau) < 0}, searched within 10 outcome SDs of zero.
    """
    statistics = statistics or _ShiftedStatistics(data, weight_rule)
    scale = _scale(data)
    lo, hi = -BRACKET_SDS * scale, BRACKET_SDS * scale
    tol = HL_TOL * scale
    if not (statistics.statistic(lo) > 0 and statistics.statistic(hi) < 0):
        raise NoEstimateError('The shifted statistic does not change sign within the search bracket')
    upper = _bisect(lambda tau: statistics.statistic(tau) > 0, lo, hi, tol)
    lower = _bisect(lambda tau: not statistics.statistic(tau) < 0, lo, hi, tol)
    return 0.5 * (upper + lower)


def confidence_interval(data, alpha=0.05, weight_rule=WeightRule.CONSTANT, mode=InferenceMode.NORMAL,
                        tau_hat=None, statistics=None):
    """Two one-sided tests at alpha/2 each, inverted by bisection."""
    statistics = statistics or _ShiftedStatistics(data, weight_rule)
    if tau_hat is None:
        tau_hat = hl_estimate(data, weight_rule, statistics)
    scale = _scale(data)
    lo, hi = -BRACKET_SDS * scale, BRACKET_SDS * scale
    tol = HL_TOL * scale
    level = alpha / 2.0

    def rejects_low(tau):
        return randomization_pvalue(statistics.at(tau), mode) <= level

    def rejects_high(tau):
        return randomization_pvalue(statistics.at(tau).negated(), mode) <= level

    if not rejects_low(lo) or not rejects_high(hi):
        raise NoEstimateError('The confidence interval extends beyond the search bracket')
    lower = tau_hat if rejects_low(tau_hat) else _bisect(rejects_low, lo, tau_hat, tol)
    upper = tau_hat if rejects_high(tau_hat) else _bisect(lambda tau: not rejects_high(tau), tau_hat, hi, tol)
    return lower, upper


def equivalence_test(data, delta, gamma=1.0, weight_rule=WeightRule.CONSTANT, mode=InferenceMode.NORMAL,
                     statistics=None):
    """
    p-value for H0: |tau| >= delta against |tau| < delta: the larger of the
    two one-sided bounds at tau = -delta and tau = +delta.
    """
    if delta <= 0:
        raise ConfigError('Equivalence margin delta must be positive')
    statistics = statistics or _ShiftedStatistics(data, weight_rule)
    below = sensitivity_bound(statistics.at(-delta), gamma, mode)
    above = sensitivity_bound(statistics.at(delta).negated(), gamma, mode)
    return max(below, above)


@dataclass(frozen=True)
class GammaThreshold:
    value: float
    status: str = 'found'

    @property
    def display(self):
        if self.status == 'beyond-range':
            return f'>{GAMMA_MAX:g}'
        return f'{self.value:.2f}'


def gamma_threshold(pvalue_at, alpha=0.05, upper=GAMMA_MAX, tol=GAMMA_TOL):
    """
    Smallest gamma at which the bound p-value exceeds alpha, to within tol.
    ``pvalue_at`` maps gamma to the bound p-value.
    """
    if pvalue_at(1.0) > alpha:
        return GammaThreshold(1.0, 'not-significant')
    if pvalue_at(upper) <= alpha:
        return GammaThreshold(math.inf, 'beyond-range')
    lo, hi = 1.0, upper
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if pvalue_at(mid) > alpha:
            hi = mid
        else:
            lo = mid
    return GammaThreshold(hi)


def gamma_sweep(scored, gammas, mode=InferenceMode.NORMAL):
    return [(float(g), sensitivity_bound(scored, g, mode)) for g in gammas]


# ═══════════════════════════════════════════════════════════════
# FULL ANALYSIS
# ═══════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class InferenceOptions:
    weight_rule: str = WeightRule.CONSTANT
    alpha: float = 0.05
    deltas: tuple = ()
    gammas: tuple = (1.0, 1.25, 1.5, 2.0, 2.5, 3.0)
    mode: str = InferenceMode.NORMAL
    covariates: tuple = None


@dataclass
class InferenceResult:
    n_pairs: int
    n_units: int
    statistic: float
    variance: float
    p_one_sided: float
    tau_hat: float | None
    ci: tuple | None
    alpha: float
    weight_rule: str
    mode: str
    sensitivity: list
    gamma_star: GammaThreshold
    equivalence: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {
            'n_pairs': self.n_pairs,
            'n_units': self.n_units,
            'T': self.statistic,
            'variance': self.variance,
            'p_one_sided': self.p_one_sided,
            'tau_hat': self.tau_hat,
            'ci': list(self.ci) if self.ci is not None else None,
            'alpha': self.alpha,
            'weight_rule': str(self.weight_rule),
            'mode': str(self.mode),
            'sensitivity': [{'gamma': g, 'p_upper': p} for g, p in self.sensitivity],
            'gamma_star': None if math.isinf(self.gamma_star.value) else self.gamma_star.value,
            'gamma_star_status': self.gamma_star.status,
            'equivalence': [
                {'delta': e['delta'], 'p_value': e['p_value'],
                 'gamma_star': None if math.isinf(e['gamma_star'].value) else e['gamma_star'].value,
                 'gamma_star_status': e['gamma_star'].status}
                for e in self.equivalence
            ],
            'flags': list(self.flags),
        }


def run_inference(data, options=None):
    """Every quantity of the outcome analysis for one matched sample."""
    options = options or InferenceOptions()
    flags = []
    statistics = _ShiftedStatistics(data, options.weight_rule)
    ranks = huber_residual_ranks(data.outcomes, data.covariates)
    if ranks.fallback:
        flags.append('huber-not-converged')
    scored = cluster_statistic(data, ranks.q, options.weight_rule)
    statistics.remember(0.0, scored)
    if scored.is_degenerate:
        flags.append('zero-variance')

    p_value = randomization_pvalue(scored, options.mode)

    tau_hat, ci = None, None
    try:
        tau_hat = hl_estimate(data, options.weight_rule, statistics)
        ci = confidence_interval(data, options.alpha, options.weight_rule, options.mode, tau_hat, statistics)
    except NoEstimateError as exc:
        logger.warning('%s', exc)
        flags.append('no-estimate')

    def point_bound(gamma):
        return sensitivity_bound(scored, gamma, options.mode)

    gamma_star = gamma_threshold(point_bound, options.alpha)
    if gamma_star.status != 'found':
        flags.append(f'gamma-star-{gamma_star.status}')

    equivalence = []
    for delta in options.deltas:
        def equivalence_bound(gamma, delta=delta):
            return equivalence_test(data, delta, gamma, options.weight_rule, options.mode, statistics)
        equivalence.append({
            'delta': float(delta),
            'p_value': equivalence_bound(1.0),
            'gamma_star': gamma_threshold(equivalence_bound, options.alpha),
        })

    result = InferenceResult(
        n_pairs=data.n_pairs,
        n_units=data.n_units,
        statistic=scored.statistic,
        variance=scored.variance,
        p_one_sided=p_value,
        tau_hat=tau_hat,
        ci=ci,
        alpha=options.alpha,
        weight_rule=options.weight_rule,
        mode=options.mode,
        sensitivity=gamma_sweep(scored, options.gammas, options.mode),
        gamma_star=gamma_star,
        equivalence=equivalence,
        flags=flags,
    )
    logger.info('Inference on %d pairs: T=%.4g, p=%.4g', data.n_pairs, scored.statistic, p_value)
    return result

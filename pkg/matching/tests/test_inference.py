from types import SimpleNamespace

import numpy as np
from django.test import SimpleTestCase, override_settings, tag

from matching.exceptions import ConfigError, NoEstimateError, StructuralError
from matching.inference import (
    InferenceMode, InferenceOptions, PairedOutcomes, ScoredSample, WeightRule,
    cluster_statistic, confidence_interval, equivalence_test, gamma_sweep,
    gamma_threshold, hl_estimate, huber_converged, huber_residual_ranks, randomization_pvalue,
    run_inference, sensitivity_bound,
)
from matching.models import ClusterPair, MatchedSample, UnitPair

from .oracles import make_dataset, sign_vectors

CONTROLS = [0.0, 3.0, 1.0, 7.0, 2.0, 6.0, 4.0, 5.0]


def singleton_pairs(treated, control):
    """One treated and one control unit per pair, treated listed first."""
    outcomes = [v for pair in zip(treated, control) for v in pair]
    k = len(treated)
    return PairedOutcomes.build(
        outcomes=outcomes,
        covariates=np.zeros((2 * k, 0)),
        pair=np.repeat(np.arange(k), 2),
        first=np.tile([True, False], k),
        treated=np.tile([1.0, 0.0], k),
    )


def shifted_study(k, effect=5.0):
    controls = CONTROLS[:k]
    return singleton_pairs([c + effect for c in controls], controls)


def scored(q, b=None):
    q = np.asarray(q, dtype=float)
    return ScoredSample(b=np.ones(q.size) if b is None else np.asarray(b, dtype=float),
                        q_pair=q, weights=np.ones(q.size))


class StatisticTests(SimpleTestCase):

    def test_pair_contrasts(self):
        data = singleton_pairs([0.0, 0.0], [0.0, 0.0])
        result = cluster_statistic(data, [3.0, 1.0, 1.0, 2.0])
        np.testing.assert_allclose(result.q_pair, [2.0, -1.0])
        self.assertEqual(result.statistic, 1.0)
        self.assertEqual(result.variance, 5.0)

    def test_control_school_listed_first(self):
        data = PairedOutcomes.build([0, 0], np.zeros((2, 0)), [0, 0], [True, False], [0.0, 1.0])
        result = cluster_statistic(data, [1.0, 2.0])
        self.assertEqual(result.b.tolist(), [-1.0])
        self.assertEqual(result.statistic, 1.0)

    def test_size_proportional_weights(self):
        data = PairedOutcomes.build(
            outcomes=np.zeros(6), covariates=np.zeros((6, 0)),
            pair=[0, 0, 0, 0, 1, 1], first=[True, True, False, False, True, False],
            treated=[1, 1, 0, 0, 1, 0],
        )
        result = cluster_statistic(data, [4.0, 2.0, 1.0, 1.0, 3.0, 5.0], WeightRule.SIZE_PROPORTIONAL)
        np.testing.assert_allclose(result.weights, [4 / 6, 2 / 6])
        np.testing.assert_allclose(result.q_pair, [4 / 3, -2 / 3])

    def test_pairs_need_both_schools(self):
        with self.assertRaises(StructuralError):
            PairedOutcomes.build([1, 2], np.zeros((2, 0)), [0, 0], [True, True], [1, 1])
        with self.assertRaises(StructuralError):
            PairedOutcomes.build([1, 2], np.zeros((2, 0)), [0, 0], [True, False], [1, 1])

    def test_from_sample_skips_empty_pairs(self):
        dataset = make_dataset([[0.0, 1.0], [2.0]], [[0.0, 1.0], [2.0]],
                               outcomes=[[1.0, 2.0], [3.0], [0.0, 1.0], [2.0]])
        sample = MatchedSample(cluster_pairs=(
            ClusterPair(1, 'T1', 'C1', 2, 0.0, (UnitPair('T1-1', 'C1-2'), UnitPair('T1-2', 'C1-1'))),
            ClusterPair(2, 'T2', 'C2', 0, 0.0, ()),
        ))
        data = PairedOutcomes.from_sample(sample, dataset)
        self.assertEqual((data.n_pairs, data.n_units), (1, 4))
        self.assertEqual(data.outcomes.tolist(), [1.0, 1.0, 2.0, 0.0])
        self.assertEqual(data.covariates.shape, (4, 1))

    def test_from_sample_needs_an_outcome(self):
        dataset = make_dataset([[0.0]], [[0.0]])
        sample = MatchedSample(cluster_pairs=(ClusterPair(1, 'T1', 'C1', 1, 0.0, (UnitPair('T1-1', 'C1-1'),)),))
        with self.assertRaises(ConfigError):
            PairedOutcomes.from_sample(sample, dataset)


class ScoreTests(SimpleTestCase):

    def test_exact_fit_gives_tied_ranks(self):
        ranks = huber_residual_ranks([1.0, 3.0, 5.0, 7.0], [[0.0], [1.0], [2.0], [3.0]])
        self.assertEqual(ranks.method, 'ols')
        np.testing.assert_allclose(ranks.q, [2.5, 2.5, 2.5, 2.5])

    def test_ranks_resist_outliers(self):
        ranks = huber_residual_ranks([1.0, 2.0, 3.0, 100.0])
        self.assertEqual(ranks.method, 'huber')
        np.testing.assert_allclose(ranks.q, [1.0, 2.0, 3.0, 4.0])

    def test_convergence_reads_the_deviance_history(self):
        settled = SimpleNamespace(fit_history={'iteration': 50, 'deviance': [np.inf, 3.0, 2.5, 2.5]})
        moving = SimpleNamespace(fit_history={'iteration': 50, 'deviance': [np.inf, 3.0, 2.0]})
        self.assertTrue(huber_converged(settled))
        self.assertFalse(huber_converged(moving))
        self.assertFalse(huber_converged(SimpleNamespace(fit_history={'deviance': [np.inf]})))


class PValueTests(SimpleTestCase):

    def test_single_pair(self):
        sample = scored([2.0])
        self.assertAlmostEqual(randomization_pvalue(sample, InferenceMode.EXACT), 0.5)
        self.assertAlmostEqual(randomization_pvalue(sample, InferenceMode.NORMAL), 0.158655, places=5)

    def test_four_equal_pairs(self):
        sample = scored([1.0, 1.0, 1.0, 1.0])
        self.assertAlmostEqual(randomization_pvalue(sample), 0.0227501, places=6)
        self.assertAlmostEqual(randomization_pvalue(sample, InferenceMode.EXACT), 0.0625)

    def test_sensitivity_bounds(self):
        sample = scored([1.0, 1.0, 1.0, 1.0])
        self.assertAlmostEqual(sensitivity_bound(sample, 3.0, InferenceMode.EXACT), 0.75 ** 4)
        self.assertAlmostEqual(sensitivity_bound(sample, 3.0), 0.124106, places=5)
        self.assertEqual(sensitivity_bound(sample, 1.0), randomization_pvalue(sample))
        with self.assertRaises(ConfigError):
            sensitivity_bound(sample, 0.5)

    def test_bound_grows_with_gamma(self):
        sample = scored([3.0, 1.0, 2.0, 0.5, 2.5], b=[1, 1, -1, 1, 1])
        bounds = [p for _, p in gamma_sweep(sample, [1.0, 1.5, 2.0, 4.0])]
        self.assertEqual(bounds, sorted(bounds))

    def test_exact_matches_enumeration(self):
        q = np.array([3.0, 1.0, 2.0, 0.5, 2.5])
        sample = scored(q, b=[1, 1, -1, 1, 1])
        signs = sign_vectors(q.size)
        totals = signs @ q
        expected = np.mean(totals >= sample.statistic - 1e-12)
        self.assertAlmostEqual(randomization_pvalue(sample, InferenceMode.EXACT), expected)

    def test_zero_contrasts(self):
        self.assertEqual(randomization_pvalue(scored([0.0, 0.0])), 1.0)

    def test_exact_bound_matches_weighted_enumeration(self):
        q = np.array([3.0, 1.0, 2.0, 0.5, 2.5, 1.5, 4.0, 3.5, 1.0, 2.0, 0.5, 3.0, 2.5, 1.5, 4.5, 0.5])
        sample = scored(q, b=[1, 1, -1, 1, 1, -1, 1, 1, 1, -1, 1, 1, -1, 1, 1, 1])
        signs = sign_vectors(q.size)
        plus = (signs > 0).sum(axis=1)
        weights = (2 / 3) ** plus * (1 / 3) ** (q.size - plus)
        expected = weights[signs @ q >= sample.statistic - 1e-9].sum()
        self.assertAlmostEqual(sensitivity_bound(sample, 2.0, InferenceMode.EXACT), expected, places=10)

    @override_settings(MULTIMATCH_EXACT_MAX_K=3)
    def test_exact_enumeration_limit(self):
        with self.assertRaises(ConfigError):
            randomization_pvalue(scored([1.0] * 4), InferenceMode.EXACT)


class EstimationTests(SimpleTestCase):

    def test_hodges_lehmann_recovers_shift(self):
        self.assertAlmostEqual(hl_estimate(shifted_study(8)), 5.0, places=4)

    def test_hodges_lehmann_is_antisymmetric(self):
        controls = CONTROLS[:8]
        flipped = singleton_pairs(controls, [c + 5.0 for c in controls])
        self.assertAlmostEqual(hl_estimate(flipped), -5.0, places=4)

    def test_interval_contains_estimate(self):
        data = shifted_study(8)
        lower, upper = confidence_interval(data)
        self.assertLessEqual(lower, 5.0 + 1e-4)
        self.assertGreaterEqual(upper, 5.0 - 1e-4)
        self.assertLess(upper - lower, 10.0)

    def test_too_few_pairs_for_an_interval(self):
        with self.assertRaises(NoEstimateError):
            confidence_interval(shifted_study(3))

    def test_identical_outcomes_estimate_zero(self):
        data = singleton_pairs([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
        self.assertAlmostEqual(hl_estimate(data), 0.0, places=4)

    def test_equivalence(self):
        data = shifted_study(8)
        self.assertLess(equivalence_test(data, 20.0), 0.01)
        self.assertGreater(equivalence_test(data, 1.0), 0.5)
        with self.assertRaises(ConfigError):
            equivalence_test(data, 0.0)


class GammaThresholdTests(SimpleTestCase):

    def test_found(self):
        threshold = gamma_threshold(lambda g: (g - 1.0) / 10.0)
        self.assertEqual(threshold.status, 'found')
        self.assertAlmostEqual(threshold.value, 1.5, delta=0.011)

    def test_not_significant(self):
        threshold = gamma_threshold(lambda g: 0.5)
        self.assertEqual((threshold.status, threshold.value), ('not-significant', 1.0))

    def test_beyond_range(self):
        threshold = gamma_threshold(lambda g: 0.0)
        self.assertEqual(threshold.status, 'beyond-range')
        self.assertEqual(threshold.display, '>100')


class RunInferenceTests(SimpleTestCase):

    def test_full_analysis(self):
        options = InferenceOptions(deltas=(20.0,), gammas=(1.0, 2.0))
        result = run_inference(shifted_study(8), options)
        self.assertAlmostEqual(result.tau_hat, 5.0, places=4)
        self.assertIsNotNone(result.ci)
        self.assertEqual([g for g, _ in result.sensitivity], [1.0, 2.0])
        self.assertEqual(len(result.equivalence), 1)
        self.assertEqual(result.flags, [])

        payload = result.to_dict()
        self.assertEqual(payload['n_pairs'], 8)
        self.assertEqual(payload['gamma_star_status'], 'found')
        self.assertEqual(payload['equivalence'][0]['delta'], 20.0)

    def test_small_study_is_flagged(self):
        result = run_inference(shifted_study(3))
        self.assertAlmostEqual(result.tau_hat, 5.0, places=4)
        self.assertIsNone(result.ci)
        self.assertIn('no-estimate', result.flags)

    def test_exact_mode(self):
        result = run_inference(shifted_study(3), InferenceOptions(mode=InferenceMode.EXACT))
        self.assertAlmostEqual(result.p_one_sided, 0.125)


def random_signs(rng, k):
    return rng.choice([-1.0, 1.0], size=k)


class ExactDistributionTests(SimpleTestCase):

    def test_fifty_pairs_agree_with_the_normal_approximation(self):
        rng = np.random.default_rng(41)
        for trial in range(8):
            sample = scored(rng.uniform(0.5, 2.0, size=50), random_signs(rng, 50))
            exact = randomization_pvalue(sample, InferenceMode.EXACT)
            self.assertAlmostEqual(exact, randomization_pvalue(sample), delta=0.02, msg=trial)

    def test_thirty_pairs_bound_agrees_with_the_normal_approximation(self):
        rng = np.random.default_rng(42)
        for trial in range(10):
            sample = scored(rng.integers(1, 21, size=30) / 2, random_signs(rng, 30))
            for gamma in (1.5, 2.0):
                exact = sensitivity_bound(sample, gamma, InferenceMode.EXACT)
                self.assertAlmostEqual(exact, sensitivity_bound(sample, gamma), delta=0.03, msg=(trial, gamma))

    def test_bound_is_monotone_on_a_fine_gamma_grid(self):
        rng = np.random.default_rng(43)
        sample = scored(rng.integers(1, 21, size=30) / 2, random_signs(rng, 30))
        gammas = np.linspace(1.0, 6.0, 100)
        for mode in (InferenceMode.EXACT, InferenceMode.NORMAL):
            bounds = np.array([p for _, p in gamma_sweep(sample, gammas, mode)])
            self.assertTrue(np.all(np.diff(bounds) >= -1e-12), mode)

    def test_tail_is_a_probability(self):
        sample = scored(np.arange(1.0, 41.0), [-1.0] * 40)
        self.assertAlmostEqual(randomization_pvalue(sample, InferenceMode.EXACT), 1.0)
        self.assertAlmostEqual(randomization_pvalue(sample.negated(), InferenceMode.EXACT), 0.5 ** 40)


class RandomizationPropertyTests(SimpleTestCase):

    def test_null_mean_and_variance_of_the_statistic(self):
        rng = np.random.default_rng(44)
        k, draws = 20, 4000
        scores = rng.permutation(2 * k).astype(float) + 1
        statistics = []
        for _ in range(draws):
            first_treated = rng.random(k) < 0.5
            treated = np.column_stack([first_treated, ~first_treated]).ravel().astype(float)
            data = PairedOutcomes.build(np.zeros(2 * k), np.zeros((2 * k, 0)), np.repeat(np.arange(k), 2),
                                        np.tile([True, False], k), treated)
            statistics.append(cluster_statistic(data, scores).statistic)
        statistics = np.array(statistics)
        variance = float(np.sum((scores[0::2] - scores[1::2]) ** 2))
        self.assertLess(abs(statistics.mean()), 4 * np.sqrt(variance / draws))
        self.assertAlmostEqual(statistics.var() / variance, 1.0, delta=0.1)

    def test_hodges_lehmann_follows_a_shift(self):
        controls = CONTROLS[:8]
        base = hl_estimate(singleton_pairs([c + 5.0 for c in controls], controls))
        moved = hl_estimate(singleton_pairs([c + 7.0 for c in controls], controls))
        self.assertAlmostEqual(moved - base, 2.0, places=4)

    def test_equivalence_pvalue_is_monotone(self):
        data = shifted_study(8)
        by_delta = [equivalence_test(data, delta) for delta in (1.0, 2.0, 5.0, 10.0, 20.0)]
        self.assertTrue(np.all(np.diff(by_delta) <= 1e-12), by_delta)
        by_gamma = [equivalence_test(data, 10.0, gamma) for gamma in (1.0, 1.5, 2.0, 3.0)]
        self.assertTrue(np.all(np.diff(by_gamma) >= -1e-12), by_gamma)

    def test_gamma_threshold_agrees_with_a_grid_scan(self):
        sample = scored(np.arange(1.0, 21.0), [-1.0] * 5 + [1.0] * 15)
        threshold = gamma_threshold(lambda g: sensitivity_bound(sample, g))
        grid = np.arange(1.0, 5.0, 0.001)
        crossing = next(g for g in grid if sensitivity_bound(sample, g) > 0.05)
        self.assertEqual(threshold.status, 'found')
        self.assertAlmostEqual(threshold.value, crossing, delta=0.02)
        self.assertAlmostEqual(threshold.value, 2.93, delta=0.05)

    @tag('slow')
    def test_interval_coverage(self):
        rng = np.random.default_rng(45)
        tau, trials, covered = 1.0, 100, 0
        for _ in range(trials):
            base = rng.normal(0.0, 2.0, size=12)
            control = base + rng.normal(size=12)
            treated = base + tau + rng.normal(size=12)
            try:
                lower, upper = confidence_interval(singleton_pairs(treated.tolist(), control.tolist()))
            except NoEstimateError:
                continue
            covered += lower <= tau <= upper
        self.assertGreaterEqual(covered / trials, 0.85)

import numpy as np
from django.test import SimpleTestCase

from matching.distance import (
    CALIPER_PENALTY, DistanceConfig, DistanceMatrix, LevelDistances, RankMahalanobis,
    apply_caliper, design_matrix, fit_logistic, robust_mahalanobis,
)
from matching.exceptions import SpecError
from matching.models import Level

from .oracles import make_dataset


class RankMahalanobisTests(SimpleTestCase):

    def test_single_covariate(self):
        # pooled ranks 1..4, untied rank variance 5/3
        matrix = robust_mahalanobis([[1.0], [2.0]], [[3.0], [4.0]])
        np.testing.assert_allclose(matrix.values, [[2.4, 5.4], [0.6, 2.4]])

    def test_tied_covariate_rescales_the_whole_covariance(self):
        # ranks (1.5, 1.5, 3.5, 3.5) and (1, 2.5, 2.5, 4); both variances scaled to 5/3
        matrix = robust_mahalanobis([[0.0, 1.0], [0.0, 2.0]], [[1.0, 2.0], [1.0, 4.0]])
        off = 0.24 * np.sqrt(12.5)
        expected = [[7.5 - 6 * off, 15.6 - 12 * off], [4.8, 7.5 - 6 * off]]
        np.testing.assert_allclose(matrix.values, expected, rtol=1e-9)
        np.testing.assert_allclose(matrix.values, [[2.4088, 5.4177], [4.8, 2.4088]], atol=1e-4)

    def test_symmetric_and_zero_on_ties(self):
        model = RankMahalanobis([[1.0, 5.0], [1.0, 5.0], [2.0, 3.0], [4.0, 1.0]])
        distances = model.distances(range(4), range(4))
        np.testing.assert_allclose(distances, distances.T, atol=1e-12)
        self.assertAlmostEqual(distances[0, 1], 0.0)
        self.assertTrue(np.all(distances >= -1e-12))

    def test_monotone_transform_invariance(self):
        values = np.array([[0.1], [2.0], [30.0], [400.0]])
        plain = RankMahalanobis(values).distances(range(2), range(2, 4))
        logged = RankMahalanobis(np.log(values)).distances(range(2), range(2, 4))
        np.testing.assert_allclose(plain, logged)

    def test_constant_column_dropped(self):
        model = RankMahalanobis([[1.0, 0.0], [1.0, 1.0], [1.0, 3.0]], names=['flat', 'z'])
        self.assertEqual(model.names, ['z'])
        self.assertEqual(model.dropped, ['flat'])

    def test_no_usable_covariates(self):
        matrix = robust_mahalanobis([[1.0]], [[1.0], [1.0]])
        self.assertIn('no-covariates', matrix.flags)
        np.testing.assert_array_equal(matrix.values, [[0.0, 0.0]])

    def test_collinear_columns_get_a_ridge(self):
        base = np.array([1.0, 2.0, 3.0, 4.0])
        model = RankMahalanobis(np.column_stack([base, 2 * base]))
        self.assertIn('ridge', model.flags)
        self.assertTrue(np.all(np.isfinite(model.distances(range(2), range(2, 4)))))

    def test_labels(self):
        matrix = robust_mahalanobis([[1.0]], [[2.0]], treated_ids=['t'], control_ids=['c'])
        self.assertEqual((matrix.rows, matrix.cols), (('t',), ('c',)))

    def test_matrix_checks_shape(self):
        with self.assertRaises(ValueError):
            DistanceMatrix(rows=('a',), cols=('b', 'c'), values=np.zeros((1, 1)))


class PropensityTests(SimpleTestCase):

    def test_intercept_only(self):
        fit = fit_logistic(np.zeros((4, 0)), [1, 0, 0, 0])
        self.assertTrue(fit.converged)
        np.testing.assert_allclose(fit.scores, 0.25, atol=1e-6)

    def test_collinear_column_dropped(self):
        fit = fit_logistic(np.ones((4, 1)), [1, 0, 1, 0])
        self.assertEqual(fit.dropped, (0,))
        self.assertEqual(fit.coefficients[1], 0.0)
        np.testing.assert_allclose(fit.scores, 0.5, atol=1e-6)

    def test_scores_follow_covariate(self):
        x = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0])
        fit = fit_logistic(x, [0, 0, 1, 0, 1, 0, 1, 1])
        self.assertTrue(fit.converged)
        self.assertTrue(np.all(np.diff(fit.scores) > 0))


class CaliperTests(SimpleTestCase):

    def setUp(self):
        self.matrix = DistanceMatrix(rows=('t',), cols=('c1', 'c2'), values=np.zeros((1, 2)))

    def test_penalty_beyond_width(self):
        penalized = apply_caliper(self.matrix, [0.5], [0.5, 0.9], 0.2, sd=1.0)
        np.testing.assert_allclose(penalized.values, [[0.0, 0.2 * CALIPER_PENALTY]])

    def test_switched_off(self):
        self.assertIs(apply_caliper(self.matrix, [0.5], [0.5, 0.9], None, sd=1.0), self.matrix)

    def test_width_must_be_positive(self):
        with self.assertRaises(SpecError):
            apply_caliper(self.matrix, [0.5], [0.5, 0.9], 0.0, sd=1.0)


class LevelDistanceTests(SimpleTestCase):

    def setUp(self):
        self.dataset = make_dataset([[0.0, 1.0], [5.0]], [[0.5, 3.0], [9.0]],
                                    groups=[['a', 'b'], ['a'], ['b', 'b'], ['a']])

    def test_design_matrix_expands_nominal(self):
        matrix, names = design_matrix(self.dataset, ['x', 'grp'])
        self.assertEqual(names, ['x', 'grp=b'])
        np.testing.assert_array_equal(matrix[:, 1], [0, 1, 0, 1, 1, 0])

    def test_design_matrix_rejects_other_level(self):
        with self.assertRaises(SpecError):
            design_matrix(self.dataset, ['c'])

    def test_blocks_slice_the_pooled_model(self):
        distances = LevelDistances.fit(self.dataset, DistanceConfig(caliper=None), Level.UNIT)
        block = distances.block(['T1-1', 'T1-2'], ['C1-1', 'C1-2'])
        self.assertEqual(block.shape, (2, 2))
        self.assertEqual(block.rows, ('T1-1', 'T1-2'))
        full = distances.model.distances(range(6), range(6))
        self.assertAlmostEqual(block.entry(1, 0), full[1, 3])

    def test_caliper_never_lowers_distances(self):
        plain = LevelDistances.fit(self.dataset, DistanceConfig(caliper=None), Level.UNIT)
        calipered = LevelDistances.fit(self.dataset, DistanceConfig(caliper=0.1), Level.UNIT)
        ids_t, ids_c = ['T1-1', 'T1-2', 'T2-1'], ['C1-1', 'C1-2', 'C2-1']
        self.assertTrue(np.all(calipered.block(ids_t, ids_c).values >= plain.block(ids_t, ids_c).values - 1e-12))

    def test_cluster_level(self):
        distances = LevelDistances.fit(self.dataset, DistanceConfig(caliper=None), Level.CLUSTER)
        block = distances.block(['T1', 'T2'], ['C1', 'C2'])
        self.assertEqual(block.shape, (2, 2))
        self.assertTrue(np.all(np.isfinite(block.values)))

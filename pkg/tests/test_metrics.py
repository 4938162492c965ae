import numpy as np
from django import test

from continual_traversability.exceptions import MetricError
from continual_traversability.learner import ModelParams
from continual_traversability.metrics import (
    METRIC_NAMES,
    RocPoint,
    ScoredSet,
    Undefined,
    classification_metrics,
    continual_eval,
    evaluate_model,
    evaluate_scored,
    forgetting_matrix,
    is_defined,
    optimal_threshold,
    roc_and_auroc,
    threshold_bias,
)


def pair_count_auroc(scores, labels):
    """Probability that a positive outscores a negative, ties counting half."""
    positives = scores[labels]
    negatives = scores[~labels]
    wins = 0.0
    for positive in positives:
        for negative in negatives:
            if positive > negative:
                wins += 1.0
            elif positive == negative:
                wins += 0.5
    return wins / (len(positives) * len(negatives))


def random_scored(rng, size=60, ties=False):
    labels = rng.uniform(size=size) < 0.4
    labels[0], labels[1] = True, False
    if ties:
        scores = rng.integers(0, 5, size=size) / 4.0
    else:
        scores = rng.uniform(size=size)
    return ScoredSet(scores, labels)


def brute_force_threshold(points):
    best = None
    for point in points:
        if not np.isfinite(point.threshold):
            continue
        key = (
            np.hypot(point.fpr, 1.0 - point.tpr),
            abs(point.threshold - 0.5),
            point.threshold,
        )
        if best is None or key < best[0]:
            best = (key, point.threshold)
    return best[1]


def constant_head(feature_dim, bias):
    """Parameters whose prediction is the first feature pushed through a sigmoid."""
    params = ModelParams.zeros(feature_dim, 1, 1, 1, activation='linear')
    params.arrays['enc_w1'][0, 0] = 1.0
    params.arrays['enc_w2'][0, 0] = 1.0
    params.arrays['mlp_w1'][0, 0] = 1.0
    params.arrays['mlp_w2'][0, 0] = 1.0
    params.arrays['mlp_b2'][0] = bias
    return params


class RocTestCase(test.SimpleTestCase):
    def test_matches_pair_counting(self):
        rng = np.random.default_rng(0)
        for index in range(50):
            scored = random_scored(rng, ties=index % 2 == 0)
            _, auroc = roc_and_auroc(scored)
            self.assertAlmostEqual(
                auroc, pair_count_auroc(scored.scores, scored.labels), delta=1e-9
            )

    def test_perfect_and_inverted(self):
        labels = np.array([True, True, False, False])
        _, perfect = roc_and_auroc(ScoredSet([0.9, 0.8, 0.2, 0.1], labels))
        _, inverted = roc_and_auroc(ScoredSet([0.1, 0.2, 0.8, 0.9], labels))
        _, constant = roc_and_auroc(ScoredSet([0.5, 0.5, 0.5, 0.5], labels))
        self.assertEqual(perfect, 1.0)
        self.assertEqual(inverted, 0.0)
        self.assertEqual(constant, 0.5)

    def test_curve(self):
        points, _ = roc_and_auroc(
            ScoredSet([0.9, 0.7, 0.7, 0.2], [True, False, True, False])
        )
        self.assertEqual(points[0], RocPoint(0.0, 0.0, np.inf))
        self.assertEqual(points[-1][:2], (1.0, 1.0))
        # One point per distinct score.
        self.assertEqual([point.threshold for point in points[1:]], [0.9, 0.7, 0.2])
        self.assertEqual(points[2][:2], (0.5, 1.0))

    def test_monotone_transform(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            scored = random_scored(rng)
            _, auroc = roc_and_auroc(scored)
            for transform in (np.exp, lambda s: 3.0 * s - 7.0, lambda s: s ** 3):
                _, transformed = roc_and_auroc(
                    ScoredSet(transform(scored.scores), scored.labels)
                )
                self.assertAlmostEqual(transformed, auroc, delta=1e-12)

    def test_single_class(self):
        points, auroc = roc_and_auroc(ScoredSet([0.1, 0.9], [True, True]))
        self.assertEqual(points, [])
        self.assertFalse(is_defined(auroc))
        self.assertEqual(auroc, Undefined('single-class set'))

    def test_scored_set_validation(self):
        with self.assertRaises(MetricError):
            ScoredSet([], [])
        with self.assertRaises(MetricError):
            ScoredSet([0.1, 0.2], [True])
        with self.assertRaises(MetricError):
            ScoredSet([np.nan], [True])

    def test_pooled(self):
        first = ScoredSet([0.1, 0.9], [False, True], scene_id=0)
        second = ScoredSet([0.4], [True], scene_id=1)
        pooled = ScoredSet.pooled([first, second])
        np.testing.assert_array_equal(pooled.scores, [0.1, 0.9, 0.4])
        self.assertEqual((pooled.positives, pooled.negatives), (2, 1))


class ThresholdTestCase(test.SimpleTestCase):
    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(2)
        for index in range(30):
            points, _ = roc_and_auroc(random_scored(rng, ties=index % 3 == 0))
            self.assertEqual(optimal_threshold(points), brute_force_threshold(points))

    def test_symmetric_scores(self):
        rng = np.random.default_rng(3)
        positives = rng.uniform(0.5, 1.0, size=500)
        scores = np.concatenate([positives, 1.0 - positives])
        labels = np.concatenate([np.ones(500, bool), np.zeros(500, bool)])
        # Perfectly separable and mirrored around 0.5.
        points, auroc = roc_and_auroc(ScoredSet(scores, labels))
        self.assertEqual(auroc, 1.0)
        alpha = optimal_threshold(points)
        self.assertAlmostEqual(alpha, positives.min())
        self.assertLess(threshold_bias(alpha), 0.01)

    def test_tie_goes_nearest_half(self):
        points = [
            RocPoint(0.0, 0.0, np.inf),
            RocPoint(0.0, 1.0, 0.9),
            RocPoint(0.0, 1.0, 0.55),
            RocPoint(1.0, 1.0, 0.1),
        ]
        self.assertEqual(optimal_threshold(points), 0.55)

    def test_bias(self):
        self.assertEqual(threshold_bias(0.5), 0.0)
        self.assertAlmostEqual(threshold_bias(0.2), 0.3)
        self.assertAlmostEqual(threshold_bias(0.9), 0.4)
        with self.assertRaises(MetricError):
            threshold_bias(1.5)
        with self.assertRaises(MetricError):
            optimal_threshold([])


class ClassificationTestCase(test.SimpleTestCase):
    def test_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            scored = random_scored(rng, size=40)
            threshold = float(rng.uniform(0.2, 0.8))
            metrics = classification_metrics(scored, threshold)

            tp = fp = fn = tn = 0
            for score, label in zip(scored.scores, scored.labels):
                predicted = score >= threshold
                if predicted and label:
                    tp += 1
                elif predicted:
                    fp += 1
                elif label:
                    fn += 1
                else:
                    tn += 1
            self.assertEqual(
                (
                    metrics.true_positives,
                    metrics.false_positives,
                    metrics.false_negatives,
                    metrics.true_negatives,
                ),
                (tp, fp, fn, tn),
            )
            if tp + fp:
                self.assertAlmostEqual(metrics.precision, tp / (tp + fp))
            if tp:
                self.assertAlmostEqual(metrics.recall, tp / (tp + fn))
                self.assertAlmostEqual(metrics.iou, metrics.f1 / (2.0 - metrics.f1))

    def test_threshold_is_inclusive(self):
        metrics = classification_metrics(ScoredSet([0.5, 0.49], [True, False]))
        self.assertEqual(metrics.true_positives, 1)
        self.assertEqual(metrics.true_negatives, 1)
        self.assertEqual(metrics.f1, 1.0)

    def test_undefined(self):
        metrics = classification_metrics(ScoredSet([0.1, 0.2], [False, False]))
        self.assertFalse(is_defined(metrics.precision))
        self.assertFalse(is_defined(metrics.recall))
        self.assertFalse(is_defined(metrics.f1))
        self.assertFalse(is_defined(metrics.iou))

        metrics = classification_metrics(ScoredSet([0.9, 0.2], [False, False]))
        self.assertEqual(metrics.precision, 0.0)
        self.assertFalse(is_defined(metrics.recall))
        self.assertEqual(metrics.f1, 0.0)

        with self.assertRaises(MetricError):
            classification_metrics(ScoredSet([0.1], [True]), threshold=2.0)

    def test_evaluate_scored(self):
        result = evaluate_scored(
            ScoredSet([0.9, 0.8, 0.3, 0.1], [True, True, False, False])
        )
        self.assertEqual(tuple(result), METRIC_NAMES)
        self.assertEqual(result['auroc'], 1.0)
        self.assertEqual(result['alpha'], 0.8)
        self.assertAlmostEqual(result['beta'], 0.3)
        self.assertEqual(result['iou'], 1.0)

        single = evaluate_scored(ScoredSet([0.9, 0.8], [True, True]))
        self.assertFalse(is_defined(single['auroc']))
        self.assertFalse(is_defined(single['alpha']))
        self.assertEqual(single['recall'], 1.0)


class ContinualEvalTestCase(test.SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(5)
        features = rng.standard_normal((40, 3))
        self.test_sets = {
            0: (features[:20], features[:20, 0] > 0),
            1: (features[20:], features[20:, 0] < 0),
        }
        self.aligned = constant_head(3, 0.0)
        self.inverted = constant_head(3, 0.0)
        self.inverted.arrays['mlp_w2'][0, 0] = -1.0

    def test_forgetting(self):
        matrix = continual_eval(
            [('scene-0', self.aligned), ('scene-1', self.inverted)], self.test_sets
        )
        self.assertEqual(matrix.checkpoints, ['scene-0', 'scene-1'])
        self.assertEqual(matrix.scene_ids, [0, 1])
        self.assertEqual(matrix.values[0], [1.0, 0.0])
        self.assertEqual(matrix.values[1], [0.0, 1.0])
        self.assertEqual(matrix.forgetting, {0: 1.0, 1: -1.0})

    def test_single_checkpoint(self):
        matrix = continual_eval([('final', self.aligned)], self.test_sets)
        self.assertEqual(matrix.forgetting[0], Undefined('single checkpoint'))

    def test_undefined_entries(self):
        undefined = Undefined('single-class set')
        matrix = forgetting_matrix(
            ['a', 'b', 'c'],
            [0, 1],
            [[0.9, undefined], [undefined, undefined], [0.7, 0.8]],
        )
        self.assertAlmostEqual(matrix.forgetting[0], 0.2)
        self.assertFalse(is_defined(matrix.forgetting[1]))

    def test_errors(self):
        with self.assertRaises(MetricError):
            continual_eval([], self.test_sets)
        with self.assertRaises(MetricError):
            continual_eval([('final', self.aligned)], {})

    def test_evaluate_model(self):
        report = evaluate_model(self.aligned, self.test_sets)
        self.assertEqual(report.per_scene[0]['auroc'], 1.0)
        self.assertEqual(report.per_scene[1]['auroc'], 0.0)
        self.assertEqual(report.threshold, 0.5)
        self.assertTrue(0.0 <= report.aggregate['auroc'] <= 1.0)

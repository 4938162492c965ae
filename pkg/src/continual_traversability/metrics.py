"""Binary-classification and continual-learning metrics."""
import logging
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.integrate import trapezoid

from .exceptions import MetricError
from .learner import predict_traversability

logger = logging.getLogger(__name__)

# Fixed decision threshold for precision, recall, F1 and IoU.
DEFAULT_DECISION_THRESHOLD = 0.5
METRIC_NAMES = ('auroc', 'alpha', 'beta', 'f1', 'precision', 'recall', 'iou')


class Undefined:
    """Marker for a metric that has no value (e.g. a zero denominator)."""

    __slots__ = ('reason',)

    def __init__(self, reason):
        self.reason = reason

    def __eq__(self, other):
        return isinstance(other, Undefined) and other.reason == self.reason

    def __hash__(self):
        return hash(('undefined', self.reason))

    def __bool__(self):
        return False

    def __repr__(self):
        return '<Undefined: {}>'.format(self.reason)


def is_defined(value):
    return not isinstance(value, Undefined)


RocPoint = namedtuple('RocPoint', ['fpr', 'tpr', 'threshold'])


@dataclass(frozen=True, eq=False)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    scene_id: Optional[int] = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels, dtype=bool).reshape(-1)
        if scores.size == 0:
            raise MetricError("A scored set needs at least one sample.")
        if scores.shape != labels.shape:
            raise MetricError("Scores and labels differ in length.")
        if not np.all(np.isfinite(scores)):
            raise MetricError("Scores must be finite.")
        object.__setattr__(self, 'scores', scores)
        object.__setattr__(self, 'labels', labels)

    @property
    def positives(self):
        return int(self.labels.sum())

    @property
    def negatives(self):
        return int(self.labels.size - self.labels.sum())

    @classmethod
    def pooled(cls, sets):
        sets = list(sets)
        return cls(
            np.concatenate([item.scores for item in sets]),
            np.concatenate([item.labels for item in sets]),
        )


def roc_and_auroc(scored):
    """ROC points over every distinct score threshold, and the trapezoid AUROC.

    A sample is predicted positive when its score is ``>=`` the threshold. The
    curve starts at ``(0, 0)`` with an infinite threshold. Tied scores yield
    diagonal segments, so the area equals the Mann-Whitney U statistic.

    :return: ``(points, auroc)``; a single-class set gives ``([], Undefined)``
    """
    positives, negatives = scored.positives, scored.negatives
    if positives == 0 or negatives == 0:
        return [], Undefined('single-class set')

    order = np.argsort(-scored.scores, kind='stable')
    scores = scored.scores[order]
    labels = scored.labels[order]
    # Last position of every group of equal scores.
    ends = np.flatnonzero(np.append(np.diff(scores) != 0, True))
    true_positives = np.cumsum(labels)[ends]
    false_positives = (ends + 1) - true_positives

    tpr = np.concatenate([[0.0], true_positives / positives])
    fpr = np.concatenate([[0.0], false_positives / negatives])
    thresholds = np.concatenate([[np.inf], scores[ends]])
    points = [
        RocPoint(float(f), float(t), float(h)) for f, t, h in zip(fpr, tpr, thresholds)
    ]
    return points, float(trapezoid(tpr, fpr))


def optimal_threshold(points):
    """Threshold of the ROC point closest to ``(0, 1)``.

    Ties go to the threshold nearest 0.5, then to the smaller threshold.
    """
    if not points:
        raise MetricError("ROC curve is empty.")
    finite = [point for point in points if np.isfinite(point.threshold)] or list(points)
    distances = [np.hypot(point.fpr, 1.0 - point.tpr) for point in finite]
    best = min(distances)
    candidates = [
        point for point, distance in zip(finite, distances) if distance == best
    ]
    chosen = min(
        candidates, key=lambda point: (abs(point.threshold - 0.5), point.threshold)
    )
    return float(chosen.threshold)


def threshold_bias(alpha):
    """``|0.5 - alpha|``."""
    if not 0.0 <= alpha <= 1.0:
        raise MetricError("alpha must lie in [0, 1], got {}.".format(alpha))
    return abs(0.5 - alpha)


@dataclass(frozen=True)
class ClassificationMetrics:
    precision: object
    recall: object
    f1: object
    iou: object
    true_positives: int
    false_positives: int
    false_negatives: int
    true_negatives: int


def _ratio(numerator, denominator, reason):
    if denominator == 0:
        return Undefined(reason)
    return numerator / denominator


def classification_metrics(scored, threshold=DEFAULT_DECISION_THRESHOLD):
    """Confusion-matrix metrics, predicting positive when ``score >= threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise MetricError("threshold must lie in [0, 1], got {}.".format(threshold))
    predicted = scored.scores >= threshold
    tp = int(np.sum(predicted & scored.labels))
    fp = int(np.sum(predicted & ~scored.labels))
    fn = int(np.sum(~predicted & scored.labels))
    tn = int(np.sum(~predicted & ~scored.labels))
    return ClassificationMetrics(
        precision=_ratio(tp, tp + fp, 'no positive predictions'),
        recall=_ratio(tp, tp + fn, 'no positive labels'),
        f1=_ratio(2 * tp, 2 * tp + fp + fn, 'no positives predicted or labeled'),
        iou=_ratio(tp, tp + fp + fn, 'no positives predicted or labeled'),
        true_positives=tp,
        false_positives=fp,
        false_negatives=fn,
        true_negatives=tn,
    )


def evaluate_scored(scored, threshold=DEFAULT_DECISION_THRESHOLD):
    """Every report metric of one scored set."""
    points, auroc = roc_and_auroc(scored)
    if points:
        alpha = optimal_threshold(points)
        beta = threshold_bias(min(max(alpha, 0.0), 1.0))
    else:
        alpha = beta = Undefined('single-class set')
    confusion = classification_metrics(scored, threshold)
    return {
        'auroc': auroc,
        'alpha': alpha,
        'beta': beta,
        'f1': confusion.f1,
        'precision': confusion.precision,
        'recall': confusion.recall,
        'iou': confusion.iou,
    }


@dataclass
class EvalReport:
    per_scene: Dict[int, dict]
    aggregate: dict
    threshold: float = DEFAULT_DECISION_THRESHOLD


@dataclass
class ForgettingMatrix:
    checkpoints: List[str]
    scene_ids: List[int]
    # values[i][j]: AUROC of checkpoint i on scene j
    values: List[List[object]]
    forgetting: Dict[int, object] = field(default_factory=dict)


def score_test_sets(params, test_sets):
    """Score every scene's ``(features, labels)`` with a model snapshot."""
    return {
        scene_id: ScoredSet(predict_traversability(features, params), labels, scene_id)
        for scene_id, (features, labels) in test_sets.items()
    }


def evaluate_model(params, test_sets, threshold=DEFAULT_DECISION_THRESHOLD):
    """Per-scene and pooled metrics of one model snapshot.

    :param test_sets: ``{scene_id: (features (N, D), labels (N,))}``
    """
    scored = score_test_sets(params, test_sets)
    per_scene = {
        scene_id: evaluate_scored(item, threshold) for scene_id, item in scored.items()
    }
    aggregate = evaluate_scored(ScoredSet.pooled(scored.values()), threshold)
    return EvalReport(per_scene=per_scene, aggregate=aggregate, threshold=threshold)


def forgetting_matrix(labels, scene_ids, values):
    """Attach max-minus-final forgetting to an AUROC matrix."""
    forgetting = {}
    for column, scene_id in enumerate(scene_ids):
        if len(values) < 2:
            forgetting[scene_id] = Undefined('single checkpoint')
            continue
        final = values[-1][column]
        earlier = [row[column] for row in values[:-1] if is_defined(row[column])]
        if not is_defined(final) or not earlier:
            forgetting[scene_id] = Undefined('undefined AUROC')
            continue
        forgetting[scene_id] = max(earlier) - final
    return ForgettingMatrix(list(labels), list(scene_ids), values, forgetting)


def continual_eval(checkpoints, test_sets):
    """AUROC of every checkpoint on every scene, plus per-scene forgetting.

    :param checkpoints: ``[(label, ModelParams)]`` in training order
    :param test_sets: ``{scene_id: (features, labels)}``
    """
    if not checkpoints:
        raise MetricError("continual_eval needs at least one checkpoint.")
    if not test_sets:
        raise MetricError("continual_eval needs at least one scene.")
    scene_ids = list(test_sets)
    values = []
    for _, params in checkpoints:
        scored = score_test_sets(params, test_sets)
        values.append([roc_and_auroc(scored[scene_id])[1] for scene_id in scene_ids])
    return forgetting_matrix([label for label, _ in checkpoints], scene_ids, values)

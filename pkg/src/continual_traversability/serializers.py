"""Experiment and scenario configuration schema.

Every field carries its default, so a configuration only needs a ``scenario``
(or a recorded ``session``) section.
"""
import json
import logging
import numbers

from rest_framework import serializers

from .exceptions import ConfigurationError, ScenarioError
from .protocol import (
    LAYOUT_BANDS,
    LAYOUT_BLOBS,
    OPTIMIZER_ADAM,
    OPTIMIZER_SGD,
    REGULARIZATION_CYCLE,
    REGULARIZATION_PRIOR,
    SEGMENTER_ORACLE,
    SEGMENTER_RECORDED,
    STRATEGIES,
    STRATEGY_IDM,
)

logger = logging.getLogger(__name__)

PRESET_BENCHMARK = 'benchmark'
CADENCE_BLOCKS = 'blocks'
CADENCE_INTERVAL = 'interval'
DEFAULT_SWEEP_LAMBDAS = [0.25, 0.5, 1.0, 2.0, 4.0]


class FloatVectorField(serializers.Field):
    """A number, or a list of numbers."""

    default_error_messages = {'invalid': "Expected a number or a list of numbers."}

    def to_internal_value(self, data):
        if isinstance(data, bool):
            self.fail('invalid')
        if isinstance(data, numbers.Real):
            return float(data)
        if isinstance(data, list) and data:
            if all(
                isinstance(item, numbers.Real) and not isinstance(item, bool)
                for item in data
            ):
                return [float(item) for item in data]
        self.fail('invalid')

    def to_representation(self, value):
        return value


class TerrainClassSerializer(serializers.Serializer):
    id = serializers.IntegerField(min_value=0)
    mean = serializers.ListField(child=serializers.FloatField(), min_length=1)
    std = FloatVectorField()
    traversable = serializers.BooleanField()
    name = serializers.CharField(default='', allow_blank=True)


class BlockSerializer(serializers.Serializer):
    scene_id = serializers.IntegerField(min_value=0)
    classes = serializers.ListField(
        child=serializers.IntegerField(min_value=0), min_length=2
    )
    frame_count = serializers.IntegerField(min_value=1)
    layout = serializers.ChoiceField(
        choices=[LAYOUT_BANDS, LAYOUT_BLOBS], default=LAYOUT_BANDS
    )
    weights = serializers.ListField(
        child=serializers.FloatField(min_value=0.0), required=False, allow_null=True
    )
    feature_shift = serializers.FloatField(default=0.0)


class ScenarioSerializer(serializers.Serializer):
    preset = serializers.ChoiceField(choices=[PRESET_BENCHMARK], required=False)
    classes = TerrainClassSerializer(many=True, required=False)
    blocks = BlockSerializer(many=True, required=False)
    feature_dim = serializers.IntegerField(min_value=1, default=64)
    width = serializers.IntegerField(min_value=1, default=64)
    height = serializers.IntegerField(min_value=1, default=64)
    seed = serializers.IntegerField(min_value=0, required=False, allow_null=True)
    prompt_min = serializers.IntegerField(min_value=1, default=5)
    prompt_max = serializers.IntegerField(min_value=1, default=20)
    frame_period = serializers.FloatField(min_value=0.0, default=0.1)
    frame_counts = serializers.ListField(
        child=serializers.IntegerField(min_value=1),
        min_length=5,
        max_length=5,
        required=False,
    )

    def validate(self, attrs):
        if attrs['prompt_min'] > attrs['prompt_max']:
            raise serializers.ValidationError({'prompt_max': "Must be >= prompt_min."})
        if attrs.get('preset') is None:
            for key in ('classes', 'blocks'):
                if not attrs.get(key):
                    raise serializers.ValidationError(
                        {key: "Required unless a preset is given."}
                    )
            ids = [item['id'] for item in attrs['classes']]
            if len(set(ids)) != len(ids):
                raise serializers.ValidationError(
                    {'classes': "Class ids must be unique."}
                )
        return attrs


class MemorySerializer(serializers.Serializer):
    threshold = serializers.FloatField(min_value=0.0, default=1.0)
    n_max = serializers.IntegerField(min_value=1, default=20)
    similar_ratio = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.5)
    queue_size = serializers.IntegerField(min_value=1, default=150)
    pixels_per_node = serializers.IntegerField(min_value=1, default=64)


class AnnotationSerializer(serializers.Serializer):
    max_pixels = serializers.IntegerField(min_value=1, default=512)
    include_negatives = serializers.BooleanField(default=True)
    segmenter = serializers.ChoiceField(
        choices=[SEGMENTER_ORACLE, SEGMENTER_RECORDED], default=SEGMENTER_ORACLE
    )


class LearnerSerializer(serializers.Serializer):
    latent_dim = serializers.IntegerField(min_value=1, default=16)
    hidden = serializers.IntegerField(min_value=1, default=64)
    mlp_hidden = serializers.IntegerField(min_value=1, default=32)
    activation = serializers.ChoiceField(choices=['tanh', 'linear'], default='tanh')
    w1 = serializers.FloatField(min_value=0.0, default=1.0)
    w2 = serializers.FloatField(min_value=0.0, default=1.0)
    w3 = serializers.FloatField(min_value=0.0, default=1.0)
    optimizer = serializers.ChoiceField(
        choices=[OPTIMIZER_SGD, OPTIMIZER_ADAM], default=OPTIMIZER_SGD
    )
    lr = serializers.FloatField(default=1e-2)
    momentum = serializers.FloatField(min_value=0.0, max_value=0.999, default=0.9)
    regularization = serializers.ChoiceField(
        choices=[REGULARIZATION_CYCLE, REGULARIZATION_PRIOR],
        default=REGULARIZATION_CYCLE,
    )
    negative_weight = serializers.FloatField(min_value=0.0, default=1.0)
    clip_norm = serializers.FloatField(default=10.0)
    steps_per_frame = serializers.IntegerField(min_value=0, default=10)
    batch_size = serializers.IntegerField(min_value=1, default=8)

    def validate_lr(self, value):
        if not value > 0:
            raise serializers.ValidationError("Must be positive.")
        return value

    def validate_clip_norm(self, value):
        if not value > 0:
            raise serializers.ValidationError("Must be positive.")
        return value

    def validate(self, attrs):
        if not any(attrs[key] > 0 for key in ('w1', 'w2', 'w3')):
            raise serializers.ValidationError(
                {'w1': "At least one loss weight must be positive."}
            )
        return attrs


class EvaluationSerializer(serializers.Serializer):
    held_out_frames = serializers.IntegerField(min_value=1, default=2)
    threshold = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.5)
    cadence = serializers.ChoiceField(
        choices=[CADENCE_BLOCKS, CADENCE_INTERVAL], default=CADENCE_BLOCKS
    )
    interval = serializers.IntegerField(min_value=1, required=False)

    def validate(self, attrs):
        if attrs['cadence'] == CADENCE_INTERVAL and not attrs.get('interval'):
            raise serializers.ValidationError(
                {'interval': "Required for interval cadence."}
            )
        return attrs


class SweepSerializer(serializers.Serializer):
    lambdas = serializers.ListField(
        child=serializers.FloatField(min_value=0.0),
        min_length=1,
        default=lambda: list(DEFAULT_SWEEP_LAMBDAS),
    )
    train = serializers.BooleanField(default=False)


SECTIONS = {
    'memory': MemorySerializer,
    'annotation': AnnotationSerializer,
    'learner': LearnerSerializer,
    'evaluation': EvaluationSerializer,
    'sweep': SweepSerializer,
}


class ExperimentSerializer(serializers.Serializer):
    scenario = ScenarioSerializer(required=False)
    session = serializers.CharField(required=False)
    test_session = serializers.CharField(required=False)
    strategy = serializers.ChoiceField(choices=STRATEGIES, default=STRATEGY_IDM)
    strategies = serializers.ListField(
        child=serializers.ChoiceField(choices=STRATEGIES), required=False
    )
    memory = MemorySerializer(required=False)
    annotation = AnnotationSerializer(required=False)
    learner = LearnerSerializer(required=False)
    evaluation = EvaluationSerializer(required=False)
    sweep = SweepSerializer(required=False)
    seed = serializers.IntegerField(min_value=0, default=0)
    output = serializers.CharField(required=False, allow_null=True)

    def validate_strategies(self, value):
        if len(set(value)) != len(value):
            raise serializers.ValidationError("Strategies must be unique.")
        return value

    def validate(self, attrs):
        has_scenario = 'scenario' in attrs
        has_session = 'session' in attrs
        if has_scenario == has_session:
            raise serializers.ValidationError(
                {'scenario': "Exactly one of 'scenario' and 'session' is required."}
            )
        if has_session and 'test_session' not in attrs:
            raise serializers.ValidationError(
                {'test_session': "Required when training from a recorded session."}
            )
        for name, serializer_class in SECTIONS.items():
            if name not in attrs:
                section = serializer_class(data={})
                section.is_valid(raise_exception=True)
                attrs[name] = dict(section.validated_data)
        return attrs


def flatten_errors(errors, prefix=''):
    """Flatten nested DRF errors into ``[(dotted key, message)]``."""
    flat = []
    if isinstance(errors, dict):
        for key, value in errors.items():
            if key == 'non_field_errors':
                child = prefix
            else:
                child = '{}.{}'.format(prefix, key) if prefix else str(key)
            flat.extend(flatten_errors(value, child))
    elif isinstance(errors, list) and errors and not isinstance(errors[0], str):
        for index, value in enumerate(errors):
            if value:
                child = '{}.{}'.format(prefix, index) if prefix else str(index)
                flat.extend(flatten_errors(value, child))
    elif isinstance(errors, list):
        flat.extend((prefix, str(message)) for message in errors)
    else:
        flat.append((prefix, str(errors)))
    return flat


def set_dotted(data, key, value):
    """Set ``data['a']['b'] = value`` for key ``'a.b'``, creating sections."""
    parts = key.split('.')
    target = data
    for part in parts[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ConfigurationError("Cannot override '{}'.".format(key), key=key)
    target[parts[-1]] = value


def validate_config(data, overrides=None):
    """Validate a configuration document.

    :param data: Parsed JSON configuration
    :param overrides: ``{dotted key: value}`` applied before validation
    :return: Validated data with every default filled in
    :raises ConfigurationError: naming the first offending dotted key
    """
    if not isinstance(data, dict):
        raise ConfigurationError("Configuration must be a JSON object.")
    data = json.loads(json.dumps(data))
    for key, value in (overrides or {}).items():
        if value is not None:
            set_dotted(data, key, value)

    serializer = ExperimentSerializer(data=data)
    if not serializer.is_valid():
        flat = flatten_errors(serializer.errors)
        key, message = flat[0] if flat else ('', 'invalid configuration')
        raise ConfigurationError(
            "{}: {}".format(key, message) if key else message, key=key or None
        )
    validated = json.loads(json.dumps(serializer.validated_data))

    if 'scenario' in validated:
        from .scene import build_scenario

        scenario = dict(validated['scenario'])
        if scenario.get('seed') is None:
            scenario['seed'] = validated['seed']
        try:
            build_scenario(scenario)
        except ScenarioError as error:
            raise ConfigurationError("scenario: {}".format(error), key='scenario')
    return validated


def read_config(path, overrides=None):
    """Load and validate a JSON configuration file."""
    try:
        with open(path, 'r', encoding='utf8') as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError("Configuration file '{}' does not exist.".format(path))
    except json.JSONDecodeError as error:
        raise ConfigurationError(
            "Configuration file '{}' is not valid JSON: {}".format(path, error)
        )
    return validate_config(data, overrides)

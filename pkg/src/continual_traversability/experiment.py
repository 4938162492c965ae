"""End-to-end experiments: runs, strategy comparisons and threshold sweeps."""
import copy
import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .annotation import build_node
from .checkpoint import save_checkpoint
from .conf import get_traversability_settings
from .exceptions import (
    AnnotationError,
    ConfigurationError,
    ExperimentError,
    TraversabilityError,
)
from .geometry import (
    frame_pose_at,
    load_calibration,
    load_odometry,
    project_footprints,
    select_valid_odometry,
)
from .learner import Learner, LearnerConfig, LossWeights
from .memory import MemoryState, make_memory, save_snapshot
from .metrics import continual_eval, evaluate_model
from .protocol import (
    ARTIFACT_CHECKPOINT,
    ARTIFACT_COMPARISON_CSV,
    ARTIFACT_COMPARISON_JSON,
    ARTIFACT_MANIFEST,
    ARTIFACT_MEMORY_JSON,
    ARTIFACT_REPORT_CSV,
    ARTIFACT_SUMMARY_JSON,
    ARTIFACT_SWEEP_CSV,
    SEGMENTER_ORACLE,
    SEGMENTER_RECORDED,
    STRATEGY_IDM,
)
from .reports import (
    manifest,
    summary,
    write_comparison,
    write_json,
    write_report_csv,
    write_sweep,
)
from .scene import (
    Frame,
    build_scenario,
    generate_stream,
    held_out_frames,
    oracle_segment,
)
from .serializers import CADENCE_INTERVAL
from .session import load_recorded_session, save_session

logger = logging.getLogger(__name__)

# Seed salt of the per-frame pixel subsampling stream.
ANNOTATION_STREAM = 2
SWEEP_METRICS = ('auroc', 'iou', 'f1', 'recall')


@dataclass
class ExperimentConfig:
    """Validated configuration (see `serializers.validate_config`)."""

    data: dict
    scenario: object = None

    @classmethod
    def from_validated(cls, data):
        scenario = None
        if 'scenario' in data:
            scenario_data = dict(data['scenario'])
            if scenario_data.get('seed') is None:
                scenario_data['seed'] = data['seed']
            scenario = build_scenario(scenario_data)
        return cls(data=data, scenario=scenario)

    @property
    def seed(self):
        return self.data['seed']

    @property
    def strategy(self):
        return self.data['strategy']

    @property
    def strategies(self):
        return self.data.get('strategies') or []

    @property
    def memory(self):
        return self.data['memory']

    @property
    def annotation(self):
        return self.data['annotation']

    @property
    def evaluation(self):
        return self.data['evaluation']

    @property
    def sweep(self):
        return self.data['sweep']

    @property
    def output(self):
        return self.data.get('output')

    def with_overrides(self, **values):
        """Copy with top-level or ``section__key`` values replaced."""
        data = copy.deepcopy(self.data)
        for name, value in values.items():
            if '__' in name:
                section, key = name.split('__', 1)
                data[section][key] = value
            else:
                data[name] = value
        return ExperimentConfig(data=data, scenario=self.scenario)

    def feature_dim(self):
        if self.scenario is not None:
            return self.scenario.feature_dim
        return load_recorded_session(self.data['session']).feature_dim

    def learner_config(self):
        options = self.data['learner']
        warnings = get_traversability_settings()['warnings']
        return LearnerConfig(
            feature_dim=self.feature_dim(),
            latent_dim=options['latent_dim'],
            hidden=options['hidden'],
            mlp_hidden=options['mlp_hidden'],
            activation=options['activation'],
            weights=LossWeights(options['w1'], options['w2'], options['w3']),
            optimizer=options['optimizer'],
            lr=options['lr'],
            momentum=options['momentum'],
            regularization=options['regularization'],
            negative_weight=options['negative_weight'],
            clip_norm=options['clip_norm'],
            warn_gradient_norm=warnings['max_gradient_norm'],
        )


@dataclass
class RunResult:
    strategy: str
    out_dir: str
    evaluations: list
    forgetting: object
    summary: dict
    memory: object
    learner: Learner
    artifacts: List[str] = field(default_factory=list)


def output_directory(config, out=None):
    if out:
        return out
    if config.output:
        return config.output
    return get_traversability_settings()['output_root']


def frame_source(config):
    if config.scenario is not None:
        return generate_stream(config.scenario)
    return iter(load_recorded_session(config.data['session']))


def _pixels(frames):
    features = np.concatenate(
        [frame.features.reshape(-1, frame.features.shape[-1]) for frame in frames]
    )
    labels = np.concatenate([frame.truth_mask.reshape(-1) for frame in frames])
    return features, labels


def held_out_test_sets(config):
    """Held-out ``{scene_id: (features, labels)}`` over all pixels."""
    if config.scenario is not None:
        count = config.evaluation['held_out_frames']
        return {
            scene_id: _pixels(held_out_frames(config.scenario, scene_id, count))
            for scene_id in config.scenario.scene_ids
        }
    grouped = {}
    for frame in load_recorded_session(config.data['test_session']):
        grouped.setdefault(frame.scene_id, []).append(frame)
    return {scene_id: _pixels(frames) for scene_id, frames in sorted(grouped.items())}


def _with_lookahead(frames):
    previous = None
    for frame in frames:
        if previous is not None:
            yield previous, frame
        previous = frame
    if previous is not None:
        yield previous, None


def _is_checkpoint(config, frame, following):
    if following is None:
        return True
    if config.evaluation['cadence'] == CADENCE_INTERVAL:
        return (frame.index + 1) % config.evaluation['interval'] == 0
    if config.scenario is not None:
        scenario = config.scenario
        return scenario.locate(frame.index) != scenario.locate(following.index)
    return frame.scene_id != following.scene_id


def annotate_frame(config, frame):
    """Segment a stream frame and build its image node (``None`` if skipped)."""
    options = config.annotation
    if options['segmenter'] == SEGMENTER_RECORDED:
        mask = frame.truth_mask
    else:
        if not frame.prompts:
            logger.warning(
                "Frame without prompts skipped", extra={'frame_index': frame.index}
            )
            return None
        mask, failed = oracle_segment(frame, frame.prompts)
        if failed:
            return None
    try:
        return build_node(
            frame,
            mask,
            max_pixels=options['max_pixels'],
            include_negatives=options['include_negatives'],
            rng=np.random.default_rng([config.seed, ANNOTATION_STREAM, frame.index]),
        )
    except AnnotationError as error:
        logger.warning("Frame skipped: %s", error, extra={'frame_index': frame.index})
        return None


def run_experiment(config, out_dir, strategy=None):
    """Stream every frame through annotation, memory and training.

    Writes the report CSV, the JSON summary, the memory snapshot, the model
    checkpoint and the run manifest to ``out_dir``.
    """
    strategy = strategy or config.strategy
    config = config.with_overrides(strategy=strategy)
    warnings = get_traversability_settings()['warnings']
    learner_options = config.data['learner']

    root = np.random.SeedSequence(config.seed)
    init_seq, sampling_seq, noise_seq = root.spawn(3)
    learner = Learner(config.learner_config(), rng=np.random.default_rng(init_seq))
    memory = make_memory(strategy, config.memory)
    sampling_rng = np.random.default_rng(sampling_seq)
    noise_rng = np.random.default_rng(noise_seq)
    scenes = held_out_test_sets(config)

    logger.info(
        "Experiment started",
        extra={'strategy': strategy, 'seed': config.seed, 'out_dir': str(out_dir)},
    )
    snapshots = []
    for frame, following in _with_lookahead(frame_source(config)):
        started = time.perf_counter()
        try:
            node = annotate_frame(config, frame)
            if node is not None:
                outcome = memory.insert(node)
                logger.debug(
                    "Node stored",
                    extra={
                        'frame_index': frame.index,
                        'kind': outcome.kind,
                        'cluster_id': outcome.cluster_id,
                        'divergence': outcome.min_divergence,
                    },
                )
            if len(memory):
                for _ in range(learner_options['steps_per_frame']):
                    batch = memory.sample_batch(
                        learner_options['batch_size'], sampling_rng
                    )
                    result = learner.train_step(batch, noise_rng)
                    memory.update_uncertainties(result.node_losses)
        except TraversabilityError as error:
            logger.error(
                "Experiment aborted",
                extra={'frame_index': frame.index, 'strategy': strategy},
            )
            raise ExperimentError(str(error), frame_index=frame.index) from error

        duration = time.perf_counter() - started
        if duration > warnings['max_frame_seconds']:
            logger.warning(
                "Slow frame", extra={'frame_index': frame.index, 'duration': duration}
            )
        if _is_checkpoint(config, frame, following):
            snapshots.append(('frame-{}'.format(frame.index), learner.params.copy()))

    if not snapshots:
        raise ExperimentError("The frame stream is empty.")

    threshold = config.evaluation['threshold']
    forgetting = continual_eval(snapshots, scenes)
    evaluations = [
        (label, evaluate_model(params, scenes, threshold))
        for label, params in snapshots
    ]
    memory_summary = {
        'strategy': strategy,
        'clusters': memory.cluster_count,
        'stored_nodes': len(memory),
        'capacity': memory.capacity,
        'total_inserted': memory.total_inserted,
    }
    run_summary = summary(strategy, evaluations, forgetting, memory_summary)

    os.makedirs(out_dir, exist_ok=True)
    write_report_csv(
        os.path.join(out_dir, ARTIFACT_REPORT_CSV), strategy, evaluations, forgetting
    )
    write_json(os.path.join(out_dir, ARTIFACT_SUMMARY_JSON), run_summary)
    save_snapshot(os.path.join(out_dir, ARTIFACT_MEMORY_JSON), memory)
    save_checkpoint(os.path.join(out_dir, ARTIFACT_CHECKPOINT), learner.params)
    artifacts = [
        ARTIFACT_REPORT_CSV,
        ARTIFACT_SUMMARY_JSON,
        ARTIFACT_MEMORY_JSON,
        ARTIFACT_CHECKPOINT,
        ARTIFACT_MANIFEST,
    ]
    write_json(
        os.path.join(out_dir, ARTIFACT_MANIFEST),
        manifest(config.data, config.seed, artifacts),
    )

    logger.info(
        "Experiment finished",
        extra={
            'strategy': strategy,
            'clusters': memory.cluster_count,
            'stored': len(memory),
        },
    )
    return RunResult(
        strategy=strategy,
        out_dir=out_dir,
        evaluations=evaluations,
        forgetting=forgetting,
        summary=run_summary,
        memory=memory,
        learner=learner,
        artifacts=artifacts,
    )


@dataclass
class ComparisonResult:
    runs: List[RunResult]
    rows: list


def compare_strategies(config, out_dir, strategies=None):
    """Run several strategies on the identical stream and tabulate them."""
    strategies = list(strategies or config.strategies)
    if len(strategies) < 2:
        raise ConfigurationError(
            "strategies: a comparison needs at least two strategies.", key='strategies'
        )
    if len(set(strategies)) != len(strategies):
        raise ConfigurationError(
            "strategies: strategies must be unique.", key='strategies'
        )

    runs = [
        run_experiment(config, os.path.join(out_dir, strategy), strategy=strategy)
        for strategy in strategies
    ]
    rows = write_comparison(
        os.path.join(out_dir, ARTIFACT_COMPARISON_CSV),
        os.path.join(out_dir, ARTIFACT_COMPARISON_JSON),
        [(run.strategy, run.summary) for run in runs],
    )
    return ComparisonResult(runs=runs, rows=rows)


@dataclass
class SweepResult:
    rows: list
    memories: dict
    runs: Optional[dict] = None


def sweep_lambda(config, out_dir, lambdas=None, train=None):
    """Final memory size for every divergence threshold.

    Without training, nodes are built once per frame and inserted into one
    memory per threshold. With ``train`` a full run is made per threshold and
    its aggregate metrics are added to the table.
    """
    lambdas = list(lambdas if lambdas is not None else config.sweep['lambdas'])
    if not lambdas:
        raise ConfigurationError(
            "sweep.lambdas: at least one value is required.", key='sweep.lambdas'
        )
    train = config.sweep['train'] if train is None else train
    options = config.memory

    runs = None
    if train:
        runs = {
            value: run_experiment(
                config.with_overrides(memory__threshold=value),
                os.path.join(out_dir, 'lambda-{:g}'.format(value)),
                strategy=STRATEGY_IDM,
            )
            for value in lambdas
        }
        memories = {value: run.memory for value, run in runs.items()}
    else:
        memories = {
            value: MemoryState(
                threshold=value,
                n_max=options['n_max'],
                similar_ratio=options['similar_ratio'],
                pixels_per_node=options['pixels_per_node'],
            )
            for value in lambdas
        }
        for frame in frame_source(config):
            try:
                node = annotate_frame(config, frame)
            except TraversabilityError as error:
                raise ExperimentError(str(error), frame_index=frame.index) from error
            if node is None:
                continue
            for memory in memories.values():
                # Each memory owns the uncertainty of its copy.
                memory.insert(dataclasses.replace(node))

    rows = []
    for value in lambdas:
        memory = memories[value]
        row = {
            'lambda': value,
            'clusters': memory.cluster_count,
            'stored_nodes': len(memory),
            'capacity': memory.capacity,
        }
        if runs is not None:
            aggregate = runs[value].summary['aggregate']
            row.update({metric: aggregate[metric] for metric in SWEEP_METRICS})
        rows.append(row)
        logger.info(
            "Sweep point", extra={'lambda': value, 'clusters': memory.cluster_count}
        )

    os.makedirs(out_dir, exist_ok=True)
    write_sweep(
        os.path.join(out_dir, ARTIFACT_SWEEP_CSV),
        rows,
        metric_columns=SWEEP_METRICS if runs is not None else (),
    )
    return SweepResult(rows=rows, memories=memories, runs=runs)


@dataclass
class AnnotationSummary:
    frames: int = 0
    prompts: int = 0
    dropped_prompts: int = 0
    failed_segmentations: int = 0


def annotate_recorded_session(
    session_path,
    out_path,
    odometry=None,
    calibration=None,
    segmenter=SEGMENTER_ORACLE,
    frame_period=0.1,
    d_max=None,
    z_min=None,
    future_only=None,
):
    """Write a copy of a recorded session with projected prompts and masks.

    With ``odometry`` and ``calibration``, prompts come from footprints
    projected into every frame (frame ``i`` is taken at ``i * frame_period``);
    otherwise the stored prompts are kept. The oracle segmenter expands the
    prompts into the prompted regions of the stored mask; the recorded
    segmenter keeps the stored mask.
    """
    projection = get_traversability_settings()['projection']
    d_max = projection['d_max'] if d_max is None else d_max
    z_min = projection['z_min'] if z_min is None else z_min
    future_only = projection['future_only'] if future_only is None else future_only
    if not d_max > 0:
        raise ConfigurationError(
            "projection.d_max: must be positive, got {}.".format(d_max),
            key='projection.d_max',
        )
    if not z_min >= 0:
        raise ConfigurationError(
            "projection.z_min: must be non-negative, got {}.".format(z_min),
            key='projection.z_min',
        )
    if (odometry is None) != (calibration is None):
        raise ConfigurationError("Odometry and calibration must be given together.")

    session = load_recorded_session(session_path)
    samples = chain = intrinsics = None
    if odometry is not None:
        samples = load_odometry(odometry)
        chain, intrinsics = load_calibration(calibration)
        if (intrinsics.height, intrinsics.width) != (session.height, session.width):
            raise ConfigurationError(
                "Calibration image size {}x{} differs from session {}x{}.".format(
                    intrinsics.width, intrinsics.height, session.width, session.height
                ),
                key='intrinsics',
            )
    totals = AnnotationSummary()

    def annotated():
        for frame in session:
            timestamp = frame.index * frame_period
            prompts = frame.prompts
            if samples:
                pose = frame_pose_at(samples, timestamp).pose
                valid = select_valid_odometry(
                    samples, pose, timestamp, d_max, future_only=future_only
                )
                result = project_footprints(valid, pose, chain, intrinsics, z_min=z_min)
                prompts = tuple(result.prompts)
                totals.dropped_prompts += result.dropped

            mask = frame.truth_mask
            if segmenter == SEGMENTER_ORACLE:
                if prompts:
                    mask, failed = oracle_segment(frame, prompts)
                else:
                    mask, failed = np.zeros_like(frame.truth_mask), True
                totals.failed_segmentations += int(failed)

            totals.frames += 1
            totals.prompts += len(prompts)
            yield Frame(
                frame.features, mask, prompts, frame.scene_id, frame.index, timestamp
            )

    save_session(out_path, annotated())
    logger.info(
        "Session annotated",
        extra={
            'frames': totals.frames,
            'prompts': totals.prompts,
            'out': str(out_path),
        },
    )
    return totals

import csv
import json

import numpy as np
import pytest
from django import test

from continual_traversability.exceptions import (
    ConfigurationError,
    ExperimentError,
    MalformedHeaderError,
)
from continual_traversability.experiment import (
    ExperimentConfig,
    annotate_recorded_session,
    compare_strategies,
    output_directory,
    run_experiment,
    sweep_lambda,
)
from continual_traversability.geometry import (
    OdometrySample,
    RigidTransform,
    save_odometry,
)
from continual_traversability.memory import load_snapshot_summary
from continual_traversability.protocol import (
    ARTIFACT_CHECKPOINT,
    ARTIFACT_MANIFEST,
    ARTIFACT_MEMORY_JSON,
    ARTIFACT_REPORT_CSV,
    ARTIFACT_SUMMARY_JSON,
)
from continual_traversability.reports import REPORT_COLUMNS, config_hash
from continual_traversability.scene import generate_stream, oracle_segment
from continual_traversability.serializers import read_config, validate_config
from continual_traversability.session import load_recorded_session, save_session

from factories import experiment_config, scenario_config, separated_scenario


def load(data, **overrides):
    return ExperimentConfig.from_validated(validate_config(data, overrides))


def read_rows(path):
    with open(path, newline='') as fh:
        return list(csv.DictReader(fh))


class ValidateConfigTestCase(test.SimpleTestCase):
    def assertConfigError(self, data, key, overrides=None):
        with self.assertRaises(ConfigurationError) as error:
            validate_config(data, overrides)
        self.assertEqual(error.exception.key, key)
        self.assertTrue(str(error.exception).startswith(key))

    def test_defaults(self):
        validated = validate_config({'scenario': scenario_config()})
        self.assertEqual(validated['strategy'], 'idm')
        self.assertEqual(validated['seed'], 0)
        self.assertEqual(validated['memory']['threshold'], 1.0)
        self.assertEqual(validated['memory']['n_max'], 20)
        self.assertEqual(validated['learner']['optimizer'], 'sgd')
        self.assertEqual(validated['evaluation']['cadence'], 'blocks')
        self.assertEqual(validated['sweep']['lambdas'], [0.25, 0.5, 1.0, 2.0, 4.0])

    def test_overrides(self):
        validated = validate_config(
            experiment_config(),
            {'seed': 7, 'memory.threshold': 3.0, 'strategy': None},
        )
        self.assertEqual(validated['seed'], 7)
        self.assertEqual(validated['memory']['threshold'], 3.0)
        self.assertEqual(validated['strategy'], 'idm')

    def test_source(self):
        self.assertConfigError({}, 'scenario')
        self.assertConfigError(
            {
                'scenario': scenario_config(),
                'session': 'a.bin',
                'test_session': 'b.bin',
            },
            'scenario',
        )
        self.assertConfigError({'session': 'a.bin'}, 'test_session')

    def test_offending_keys(self):
        self.assertConfigError(experiment_config(), 'memory.n_max', {'memory.n_max': 0})
        self.assertConfigError(experiment_config(), 'learner.lr', {'learner.lr': 0.0})
        self.assertConfigError(
            experiment_config(),
            'evaluation.interval',
            {'evaluation.cadence': 'interval'},
        )
        self.assertConfigError(experiment_config(), 'strategy', {'strategy': 'lifo'})

        scenario = scenario_config()
        scenario['classes'][1]['id'] = 0
        self.assertConfigError({'scenario': scenario}, 'scenario.classes')

    def test_scenario_semantics(self):
        scenario = scenario_config(scenes=1)
        scenario['classes'][1]['traversable'] = True
        self.assertConfigError({'scenario': scenario}, 'scenario')

    def test_read_config(self):
        with self.assertRaisesRegex(ConfigurationError, 'does not exist'):
            read_config('/nonexistent/config.json')


def test_read_config_file(tmp_path):
    path = tmp_path / 'config.json'
    path.write_text('{"scenario": ')
    with pytest.raises(ConfigurationError, match='not valid JSON'):
        read_config(path)

    path.write_text(json.dumps(experiment_config()))
    assert read_config(path, {'seed': 3})['seed'] == 3


def test_output_directory(settings, tmp_path):
    config = load(experiment_config())
    settings.CONTINUAL_TRAVERSABILITY = {'output_root': str(tmp_path)}
    assert output_directory(config) == str(tmp_path)
    assert output_directory(config, 'explicit') == 'explicit'
    configured = load(experiment_config(output='configured'))
    assert output_directory(configured) == 'configured'


def test_run_artifacts(tmp_path):
    config = load(experiment_config())
    result = run_experiment(config, str(tmp_path))

    for name in (
        ARTIFACT_REPORT_CSV,
        ARTIFACT_SUMMARY_JSON,
        ARTIFACT_MEMORY_JSON,
        ARTIFACT_CHECKPOINT,
        ARTIFACT_MANIFEST,
    ):
        assert (tmp_path / name).exists()

    # One checkpoint per scene block.
    assert result.forgetting.checkpoints == ['frame-2', 'frame-5']
    assert [label for label, _ in result.evaluations] == ['frame-2', 'frame-5']
    assert result.summary['final_checkpoint'] == 'frame-5'
    assert set(result.summary['scenes']) == {0, 1}
    assert result.learner.steps == 12

    rows = read_rows(tmp_path / ARTIFACT_REPORT_CSV)
    assert tuple(rows[0]) == REPORT_COLUMNS
    # 2 checkpoints x (2 scenes + aggregate) x 7 metrics, then 2 forgetting rows.
    assert len(rows) == 2 * 3 * 7 + 2
    assert {row['strategy'] for row in rows} == {'idm'}
    assert [row['checkpoint'] for row in rows[-2:]] == ['forgetting', 'forgetting']
    for row in rows:
        assert row['value'] == 'undefined' or np.isfinite(float(row['value']))

    summary = json.loads((tmp_path / ARTIFACT_SUMMARY_JSON).read_text())
    assert summary['memory']['stored_nodes'] == len(result.memory)
    assert summary['auroc_matrix']['checkpoints'] == ['frame-2', 'frame-5']

    manifest = json.loads((tmp_path / ARTIFACT_MANIFEST).read_text())
    assert manifest['seed'] == 0
    assert manifest['config_sha256'] == config_hash(manifest['config'])
    assert ARTIFACT_CHECKPOINT in manifest['artifacts']

    snapshot = load_snapshot_summary(tmp_path / ARTIFACT_MEMORY_JSON)
    assert snapshot['strategy'] == 'idm'
    assert snapshot['total_inserted'] == 6
    assert snapshot['stored'] == len(result.memory)


def test_run_is_reproducible(tmp_path):
    config = load(experiment_config())
    run_experiment(config, str(tmp_path / 'first'))
    run_experiment(config, str(tmp_path / 'second'))
    for name in (ARTIFACT_REPORT_CSV, ARTIFACT_SUMMARY_JSON, ARTIFACT_CHECKPOINT):
        assert (tmp_path / 'first' / name).read_bytes() == (
            tmp_path / 'second' / name
        ).read_bytes()

    run_experiment(load(experiment_config(), seed=1), str(tmp_path / 'other'))
    assert (tmp_path / 'other' / ARTIFACT_CHECKPOINT).read_bytes() != (
        tmp_path / 'first' / ARTIFACT_CHECKPOINT
    ).read_bytes()


def test_interval_cadence(tmp_path):
    config = load(
        experiment_config(),
        **{'evaluation.cadence': 'interval', 'evaluation.interval': 2},
    )
    result = run_experiment(config, str(tmp_path))
    assert result.forgetting.checkpoints == ['frame-1', 'frame-3', 'frame-5']


def test_baseline_strategies(tmp_path):
    fifo = run_experiment(
        load(experiment_config()), str(tmp_path / 'fifo'), strategy='fifo'
    )
    assert fifo.strategy == 'fifo'
    assert fifo.memory.cluster_count == 1
    assert len(fifo.memory) == 6

    unbounded = run_experiment(
        load(experiment_config()),
        str(tmp_path / 'unbounded'),
        strategy='unbounded_random',
    )
    assert unbounded.summary['memory']['capacity'] is None
    manifest = json.loads((tmp_path / 'unbounded' / ARTIFACT_MANIFEST).read_text())
    assert manifest['config']['strategy'] == 'unbounded_random'


def test_recorded_session(tmp_path):
    scenario = separated_scenario(scenes=2, frame_count=3, width=8, height=8)
    save_session(tmp_path / 'train.bin', generate_stream(scenario))
    save_session(tmp_path / 'test.bin', generate_stream(scenario, rng_seed=99))

    config = load(
        {
            'session': str(tmp_path / 'train.bin'),
            'test_session': str(tmp_path / 'test.bin'),
            'annotation': {'segmenter': 'recorded', 'max_pixels': 32},
            'learner': {
                'latent_dim': 2,
                'hidden': 8,
                'mlp_hidden': 4,
                'steps_per_frame': 1,
            },
        }
    )
    result = run_experiment(config, str(tmp_path / 'run'))
    # Checkpoints follow the recorded scene ids.
    assert result.forgetting.checkpoints == ['frame-2', 'frame-5']
    assert result.forgetting.scene_ids == [0, 1]


def test_run_errors(tmp_path):
    (tmp_path / 'broken.bin').write_bytes(b'TRAVSESS')
    config = ExperimentConfig(
        data=validate_config(
            {
                'session': str(tmp_path / 'broken.bin'),
                'test_session': str(tmp_path / 'broken.bin'),
            }
        )
    )
    with pytest.raises(MalformedHeaderError, match='header'):
        run_experiment(config, str(tmp_path / 'run'))
    assert not (tmp_path / 'run').exists()


def test_non_finite_training_aborts(tmp_path):
    config = load(
        experiment_config(), **{'learner.lr': 1e300, 'learner.clip_norm': 1e300}
    )
    with pytest.raises(ExperimentError) as error:
        run_experiment(config, str(tmp_path / 'run'))
    assert error.value.frame_index is not None
    assert 'frame' in str(error.value)
    assert not (tmp_path / 'run').exists()


def test_compare_strategies(tmp_path):
    config = load(experiment_config())
    result = compare_strategies(config, str(tmp_path), strategies=['idm', 'fifo'])

    assert [run.strategy for run in result.runs] == ['idm', 'fifo']
    assert (tmp_path / 'idm' / ARTIFACT_REPORT_CSV).exists()
    assert (tmp_path / 'fifo' / ARTIFACT_REPORT_CSV).exists()

    rows = read_rows(tmp_path / 'comparison.csv')
    assert [(row['strategy'], row['scene']) for row in rows] == [
        ('idm', '0'),
        ('idm', '1'),
        ('idm', 'all'),
        ('fifo', '0'),
        ('fifo', '1'),
        ('fifo', 'all'),
    ]
    for row in rows[:3]:
        assert row['delta_auroc'] in ('0', 'undefined')

    comparison = json.loads((tmp_path / 'comparison.json').read_text())
    assert comparison['baseline'] == 'idm'
    assert set(comparison['strategies']) == {'idm', 'fifo'}


def test_compare_needs_two_strategies(tmp_path):
    config = load(experiment_config())
    with pytest.raises(ConfigurationError) as error:
        compare_strategies(config, str(tmp_path), strategies=['idm'])
    assert error.value.key == 'strategies'
    with pytest.raises(ConfigurationError):
        compare_strategies(config, str(tmp_path), strategies=['idm', 'idm'])
    assert list(tmp_path.iterdir()) == []


def test_sweep_lambda(tmp_path):
    config = load(experiment_config())
    result = sweep_lambda(config, str(tmp_path), lambdas=[0.0, 1.0, 1e6])

    clusters = [row['clusters'] for row in result.rows]
    assert clusters[0] == 6
    assert clusters == sorted(clusters, reverse=True)
    assert clusters[-1] == 1
    assert result.rows[-1]['stored_nodes'] == 3
    assert result.runs is None

    rows = read_rows(tmp_path / 'sweep.csv')
    assert tuple(rows[0]) == ('lambda', 'clusters', 'stored_nodes', 'capacity')
    assert [row['lambda'] for row in rows] == ['0', '1', '1000000']

    with pytest.raises(ConfigurationError):
        sweep_lambda(config, str(tmp_path), lambdas=[])


def test_sweep_lambda_with_training(tmp_path):
    config = load(experiment_config())
    result = sweep_lambda(config, str(tmp_path), lambdas=[1.0], train=True)
    assert (tmp_path / 'lambda-1' / ARTIFACT_REPORT_CSV).exists()
    row = read_rows(tmp_path / 'sweep.csv')[0]
    assert set(row) == {
        'lambda',
        'clusters',
        'stored_nodes',
        'capacity',
        'auroc',
        'iou',
        'f1',
        'recall',
    }
    assert result.rows[0]['clusters'] == result.runs[1.0].memory.cluster_count


@pytest.fixture
def recorded(tmp_path):
    scenario = separated_scenario(scenes=1, frame_count=4, width=8, height=8)
    frames = list(generate_stream(scenario))
    path = tmp_path / 'session.bin'
    save_session(path, frames)
    return path, frames


def write_calibration(path, size=8):
    path.write_text(
        json.dumps(
            {
                'intrinsics': {
                    'fx': 1.0,
                    'fy': 1.0,
                    'cx': 4.0,
                    'cy': 4.0,
                    'width': size,
                    'height': size,
                }
            }
        )
    )


def write_odometry(path):
    """Robot driving along the camera axis, one sample every 0.1 s."""
    samples = [
        OdometrySample(0.1 * index, RigidTransform(np.eye(3), [0.0, 0.0, -0.1 * index]))
        for index in range(6)
    ]
    save_odometry(path, samples)


def test_annotate_keeps_stored_prompts(tmp_path, recorded):
    path, frames = recorded
    out = tmp_path / 'annotated.bin'
    totals = annotate_recorded_session(path, out)

    assert totals.frames == 4
    assert totals.prompts == sum(len(frame.prompts) for frame in frames)
    assert totals.failed_segmentations == 0
    stored = load_recorded_session(path)
    for original, annotated in zip(stored, load_recorded_session(out)):
        expected, _ = oracle_segment(original, original.prompts)
        np.testing.assert_array_equal(annotated.truth_mask, expected)
        assert annotated.features.tobytes() == original.features.tobytes()


def test_annotate_with_odometry(tmp_path, recorded):
    path, frames = recorded
    write_odometry(tmp_path / 'odometry.txt')
    write_calibration(tmp_path / 'calibration.json')

    out = tmp_path / 'annotated.bin'
    totals = annotate_recorded_session(
        path,
        out,
        odometry=tmp_path / 'odometry.txt',
        calibration=tmp_path / 'calibration.json',
        segmenter='recorded',
    )
    # Frame i sees the 5 - i samples ahead of it; its own sample sits on the camera.
    assert totals.prompts == 5 + 4 + 3 + 2
    assert totals.dropped_prompts == 4

    annotated = list(load_recorded_session(out))
    assert [len(frame.prompts) for frame in annotated] == [5, 4, 3, 2]
    positions = {
        (prompt.u, prompt.v) for frame in annotated for prompt in frame.prompts
    }
    assert positions == {(4.0, 4.0)}
    for original, frame in zip(frames, annotated):
        np.testing.assert_array_equal(frame.truth_mask, original.truth_mask)

    symmetric = annotate_recorded_session(
        path,
        tmp_path / 'symmetric.bin',
        odometry=tmp_path / 'odometry.txt',
        calibration=tmp_path / 'calibration.json',
        segmenter='recorded',
        future_only=False,
    )
    assert symmetric.prompts == totals.prompts
    assert symmetric.dropped_prompts == 1 + 2 + 3 + 4


def test_annotate_errors(tmp_path, recorded):
    path, _ = recorded
    write_odometry(tmp_path / 'odometry.txt')
    with pytest.raises(ConfigurationError):
        annotate_recorded_session(
            path, tmp_path / 'out.bin', odometry=tmp_path / 'odometry.txt'
        )

    write_calibration(tmp_path / 'calibration.json', size=16)
    with pytest.raises(ConfigurationError) as error:
        annotate_recorded_session(
            path,
            tmp_path / 'out.bin',
            odometry=tmp_path / 'odometry.txt',
            calibration=tmp_path / 'calibration.json',
        )
    assert error.value.key == 'intrinsics'
    assert not (tmp_path / 'out.bin').exists()


def test_annotate_projection_limits(settings, tmp_path, recorded):
    path, _ = recorded
    out = tmp_path / 'out.bin'
    with pytest.raises(ConfigurationError) as error:
        annotate_recorded_session(path, out, d_max=0.0)
    assert error.value.key == 'projection.d_max'

    with pytest.raises(ConfigurationError) as error:
        annotate_recorded_session(path, out, z_min=-0.1)
    assert error.value.key == 'projection.z_min'

    settings.CONTINUAL_TRAVERSABILITY = {'projection': {'d_max': -1.0}}
    with pytest.raises(ConfigurationError) as error:
        annotate_recorded_session(path, out)
    assert error.value.key == 'projection.d_max'
    assert not out.exists()

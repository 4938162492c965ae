"""Report emission: metric CSVs, JSON summaries, comparison and sweep tables.

CSV reports hold one row per ``scene x checkpoint x metric``. Scene ``all``
is the pooled aggregate; checkpoint ``forgetting`` holds the max-minus-final
AUROC diagnostic. Undefined metrics are written as ``undefined``.
"""
import csv
import hashlib
import json
import logging
import platform

import django
import numpy as np
import scipy

from .__about__ import __version__
from .metrics import METRIC_NAMES, Undefined, is_defined
from .protocol import REPORT_VERSION
from .storage import atomic_open

logger = logging.getLogger(__name__)

UNDEFINED_TEXT = 'undefined'
AGGREGATE_SCENE = 'all'
FORGETTING_CHECKPOINT = 'forgetting'
REPORT_COLUMNS = ('strategy', 'scene', 'checkpoint', 'metric', 'value')
SWEEP_COLUMNS = ('lambda', 'clusters', 'stored_nodes', 'capacity')
COMPARISON_METRICS = ('auroc', 'beta', 'f1', 'iou', 'precision', 'recall')


def format_value(value):
    if not is_defined(value):
        return UNDEFINED_TEXT
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return '{:.12g}'.format(float(value))


def json_value(value):
    """JSON-safe rendering; undefined metrics become ``null``."""
    if isinstance(value, Undefined):
        return None
    if isinstance(value, dict):
        return {str(key): json_value(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_value(item) for item in value]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if np.isfinite(value) else None
    return value


def write_json(path, data):
    with atomic_open(path, 'w') as fh:
        json.dump(json_value(data), fh, indent=2, sort_keys=True)
        fh.write('\n')


def write_csv(path, columns, rows):
    with atomic_open(path, 'w') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row[column]) for column in columns])


def report_rows(strategy, evaluations, forgetting):
    """Rows of a run report.

    :param evaluations: ``[(checkpoint label, EvalReport)]`` in training order
    :param forgetting: `ForgettingMatrix` of the run
    """
    rows = []
    for label, report in evaluations:
        scenes = [
            (scene_id, report.per_scene[scene_id])
            for scene_id in sorted(report.per_scene)
        ]
        scenes.append((AGGREGATE_SCENE, report.aggregate))
        for scene, metrics in scenes:
            for metric in METRIC_NAMES:
                rows.append(
                    {
                        'strategy': strategy,
                        'scene': scene,
                        'checkpoint': label,
                        'metric': metric,
                        'value': metrics[metric],
                    }
                )
    for scene_id in forgetting.scene_ids:
        rows.append(
            {
                'strategy': strategy,
                'scene': scene_id,
                'checkpoint': FORGETTING_CHECKPOINT,
                'metric': 'auroc',
                'value': forgetting.forgetting[scene_id],
            }
        )
    return rows


def write_report_csv(path, strategy, evaluations, forgetting):
    write_csv(path, REPORT_COLUMNS, report_rows(strategy, evaluations, forgetting))


def summary(strategy, evaluations, forgetting, memory_summary=None):
    """End-of-stream summary with per-scene and aggregate metric columns."""
    label, final = evaluations[-1]
    return {
        'version': REPORT_VERSION,
        'strategy': strategy,
        'threshold': final.threshold,
        'final_checkpoint': label,
        'scenes': {
            scene_id: {
                metric: final.per_scene[scene_id][metric] for metric in METRIC_NAMES
            }
            for scene_id in sorted(final.per_scene)
        },
        'aggregate': {metric: final.aggregate[metric] for metric in METRIC_NAMES},
        'auroc_matrix': {
            'checkpoints': forgetting.checkpoints,
            'scenes': forgetting.scene_ids,
            'values': forgetting.values,
        },
        'forgetting': forgetting.forgetting,
        'memory': memory_summary or {},
    }


def comparison_rows(results):
    """Side-by-side final metrics of several strategies.

    Deltas are taken against the first strategy.

    :param results: ``[(strategy, summary dict)]``
    """
    rows = []
    _, baseline = results[0]
    for strategy, data in results:
        scenes = list(data['scenes'].items()) + [(AGGREGATE_SCENE, data['aggregate'])]
        for scene, metrics in scenes:
            row = {'strategy': strategy, 'scene': scene}
            for metric in COMPARISON_METRICS:
                row[metric] = metrics[metric]
            forgetting = data['forgetting'].get(scene, Undefined('aggregate'))
            row['forgetting'] = forgetting
            reference = (
                baseline['aggregate']
                if scene == AGGREGATE_SCENE
                else baseline['scenes'].get(scene, {})
            )
            for metric in ('auroc', 'iou'):
                value = metrics[metric]
                base = reference.get(metric, Undefined('missing'))
                row['delta_' + metric] = (
                    value - base
                    if is_defined(value) and is_defined(base)
                    else Undefined('undefined operand')
                )
            base_forgetting = baseline['forgetting'].get(scene, Undefined('aggregate'))
            row['delta_forgetting'] = (
                forgetting - base_forgetting
                if is_defined(forgetting) and is_defined(base_forgetting)
                else Undefined('undefined operand')
            )
            rows.append(row)
    return rows


COMPARISON_COLUMNS = (
    ('strategy', 'scene')
    + COMPARISON_METRICS
    + ('forgetting', 'delta_auroc', 'delta_iou', 'delta_forgetting')
)


def write_comparison(csv_path, json_path, results):
    rows = comparison_rows(results)
    write_csv(csv_path, COMPARISON_COLUMNS, rows)
    write_json(
        json_path,
        {
            'version': REPORT_VERSION,
            'baseline': results[0][0],
            'strategies': {strategy: data for strategy, data in results},
            'rows': rows,
        },
    )
    return rows


def write_sweep(path, rows, metric_columns=()):
    write_csv(path, SWEEP_COLUMNS + tuple(metric_columns), rows)


def canonical_json(data):
    return json.dumps(json_value(data), sort_keys=True, separators=(',', ':'))


def config_hash(config):
    """SHA-256 of the canonical JSON form of a configuration."""
    return hashlib.sha256(canonical_json(config).encode('utf8')).hexdigest()


def manifest(config, seed, artifacts):
    """Run manifest: enough to reproduce a report on the same build."""
    return {
        'version': REPORT_VERSION,
        'config': config,
        'config_sha256': config_hash(config),
        'seed': seed,
        'artifacts': sorted(artifacts),
        'versions': {
            'package': __version__,
            'python': platform.python_version(),
            'numpy': np.__version__,
            'scipy': scipy.__version__,
            'django': django.get_version(),
        },
    }

"""Synthetic domain-incremental scene stream and segmentation oracle.

Every pixel belongs to one terrain class and its feature vector is drawn from
that class' diagonal Gaussian. Frames are grouped into blocks; each block is
one visit to a scene.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import ScenarioError, SegmentationError
from .geometry import PixelPrompt
from .protocol import LAYOUT_BANDS, LAYOUT_BLOBS

logger = logging.getLogger(__name__)

# Smallest allowed per-dimension class standard deviation.
MIN_CLASS_STD = 1e-6
# Seed salt separating held-out evaluation frames from the training stream.
HELD_OUT_STREAM = 7919
# Fixed seed of the benchmark terrain classes (the world does not change with
# the stream seed).
BENCHMARK_WORLD_SEED = 20240917
BENCHMARK_FRAME_COUNTS = (120, 40, 200, 60, 80)
# 4-connectivity structuring element.
FOUR_CONNECTIVITY = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True, eq=False)
class TerrainClass:
    id: int
    feature_mean: np.ndarray
    feature_std: np.ndarray
    traversable: bool
    name: str = ''

    def __post_init__(self):
        mean = np.array(self.feature_mean, dtype=np.float64).reshape(-1)
        std = np.array(self.feature_std, dtype=np.float64).reshape(-1)
        if std.size == 1 and mean.size > 1:
            std = np.full(mean.shape, std[0])
        if mean.shape != std.shape:
            raise ScenarioError(
                "Terrain class {}: mean and std dimensions differ.".format(self.id)
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise ScenarioError(
                "Terrain class {}: non-finite parameters.".format(self.id)
            )
        if np.any(std < MIN_CLASS_STD):
            raise ScenarioError(
                "Terrain class {}: feature_std must be >= {}.".format(
                    self.id, MIN_CLASS_STD
                )
            )
        object.__setattr__(self, 'feature_mean', mean)
        object.__setattr__(self, 'feature_std', std)


@dataclass(frozen=True)
class Block:
    """Consecutive frames of one scene."""

    scene_id: int
    classes: Tuple[int, ...]
    frame_count: int
    layout: str = LAYOUT_BANDS
    weights: Optional[Tuple[float, ...]] = None
    feature_shift: float = 0.0


@dataclass(frozen=True, eq=False)
class Scenario:
    classes: Dict[int, TerrainClass]
    blocks: Tuple[Block, ...]
    feature_dim: int = 64
    width: int = 64
    height: int = 64
    seed: int = 0
    prompt_range: Tuple[int, int] = (5, 20)
    frame_period: float = 0.1
    _starts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, 'blocks', tuple(self.blocks))
        self.validate()
        counts = [block.frame_count for block in self.blocks]
        object.__setattr__(self, '_starts', np.concatenate([[0], np.cumsum(counts)]))

    def validate(self):
        if self.feature_dim < 1 or self.width < 1 or self.height < 1:
            raise ScenarioError("feature_dim, width and height must be positive.")
        if self.seed < 0:
            raise ScenarioError("seed must be non-negative.")
        low, high = self.prompt_range
        if not 1 <= low <= high:
            raise ScenarioError("prompt_range must satisfy 1 <= low <= high.")
        if not self.blocks:
            raise ScenarioError("Scenario needs at least one block.")
        for terrain in self.classes.values():
            if terrain.feature_mean.shape != (self.feature_dim,):
                raise ScenarioError(
                    "Terrain class {} has dimension {}, scenario uses {}.".format(
                        terrain.id, terrain.feature_mean.size, self.feature_dim
                    )
                )
        for position, block in enumerate(self.blocks):
            if block.frame_count < 1:
                raise ScenarioError(
                    "Block {}: frame_count must be >= 1.".format(position)
                )
            if len(block.classes) < 2:
                raise ScenarioError(
                    "Block {}: needs at least two terrain classes.".format(position)
                )
            missing = [cid for cid in block.classes if cid not in self.classes]
            if missing:
                raise ScenarioError(
                    "Block {}: unknown terrain classes {}.".format(position, missing)
                )
            flags = {self.classes[cid].traversable for cid in block.classes}
            if flags != {True, False}:
                raise ScenarioError(
                    "Block {}: needs one traversable and one non-traversable "
                    "class.".format(position)
                )
            if block.layout not in (LAYOUT_BANDS, LAYOUT_BLOBS):
                raise ScenarioError(
                    "Block {}: unknown layout '{}'.".format(position, block.layout)
                )
            if block.weights is not None:
                weights = np.asarray(block.weights, dtype=np.float64)
                if (
                    weights.shape != (len(block.classes),)
                    or np.any(weights < 0)
                    or not weights.sum() > 0
                ):
                    raise ScenarioError(
                        "Block {}: weights must be non-negative, one per class, "
                        "with a positive sum.".format(position)
                    )

    @property
    def total_frames(self):
        return int(self._starts[-1])

    @property
    def scene_ids(self):
        """Scene ids in order of first appearance."""
        seen = []
        for block in self.blocks:
            if block.scene_id not in seen:
                seen.append(block.scene_id)
        return seen

    def locate(self, global_index):
        """Block position holding the given stream index."""
        if not 0 <= global_index < self.total_frames:
            raise ScenarioError(
                "Frame index {} outside stream of {} frames.".format(
                    global_index, self.total_frames
                )
            )
        return int(np.searchsorted(self._starts, global_index, side='right') - 1)

    def block_boundaries(self):
        """Stream index of the last frame of every block."""
        return [int(end) - 1 for end in self._starts[1:]]


@dataclass(frozen=True, eq=False)
class Frame:
    features: np.ndarray
    truth_mask: np.ndarray
    prompts: Tuple[PixelPrompt, ...]
    scene_id: int
    index: int
    timestamp: float = 0.0

    @property
    def shape(self):
        return self.features.shape


def _band_labels(block, height, width, rng):
    count = len(block.classes)
    if block.weights is None:
        weights = np.ones(count)
    else:
        weights = np.asarray(block.weights, float)
    weights = weights / weights.sum()
    edges = np.concatenate([[0.0], np.cumsum(weights)])
    edges[-1] = 1.0
    jitter = rng.uniform(-1.0, 1.0, size=max(count - 1, 0))
    for position in range(1, count):
        left, right = weights[position - 1], weights[position]
        if left > 0 and right > 0:
            edges[position] += 0.25 * min(left, right) * jitter[position - 1]
    centres = (np.arange(height) + 0.5) / height
    rows = np.clip(np.searchsorted(edges, centres, side='right') - 1, 0, count - 1)
    return np.repeat(rows[:, None], width, axis=1)


def _blob_labels(block, height, width, rng):
    labels = np.zeros((height, width), dtype=np.int64)
    rows, cols = np.mgrid[0:height, 0:width]
    size = min(height, width)
    for position in range(1, len(block.classes)):
        if block.weights is not None and block.weights[position] == 0:
            continue
        for _ in range(int(rng.integers(1, 4))):
            centre_row = rng.uniform(0, height)
            centre_col = rng.uniform(0, width)
            radius = rng.uniform(0.1, 0.25) * size
            disc = (rows - centre_row) ** 2 + (cols - centre_col) ** 2 <= radius ** 2
            labels[disc] = position
    return labels


def _render(scenario, block, rng, index, timestamp):
    height, width = scenario.height, scenario.width
    if block.layout == LAYOUT_BANDS:
        labels = _band_labels(block, height, width, rng)
    else:
        labels = _blob_labels(block, height, width, rng)

    terrains = [scenario.classes[cid] for cid in block.classes]
    means = np.stack([terrain.feature_mean for terrain in terrains])
    means = means + block.feature_shift
    stds = np.stack([terrain.feature_std for terrain in terrains])
    traversable = np.array([terrain.traversable for terrain in terrains])

    noise = rng.standard_normal((height, width, scenario.feature_dim))
    features = (means[labels] + stds[labels] * noise).astype(np.float32)
    truth_mask = traversable[labels]

    candidates = np.flatnonzero(truth_mask)
    low, high = scenario.prompt_range
    wanted = int(rng.integers(low, high + 1))
    chosen = rng.choice(
        candidates.size, size=min(wanted, candidates.size), replace=False
    )
    prompts = tuple(
        PixelPrompt(float(flat % width), float(flat // width), timestamp)
        for flat in candidates[chosen]
    )
    return Frame(features, truth_mask, prompts, block.scene_id, index, timestamp)


def generate_frame(scenario, global_index, rng_seed=None):
    """Render one stream frame; deterministic in (scenario, index, seed).

    :param scenario: `Scenario` instance
    :param global_index: Position in the whole stream
    :param rng_seed: Overrides the scenario seed
    """
    position = scenario.locate(global_index)
    seed = scenario.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng([seed, global_index])
    timestamp = global_index * scenario.frame_period
    return _render(scenario, scenario.blocks[position], rng, global_index, timestamp)


def generate_stream(scenario, rng_seed=None):
    for index in range(scenario.total_frames):
        yield generate_frame(scenario, index, rng_seed=rng_seed)


def held_out_frames(scenario, scene_id, count, rng_seed=None):
    """Evaluation frames of one scene, drawn independently of the stream."""
    blocks = [block for block in scenario.blocks if block.scene_id == scene_id]
    if not blocks:
        raise ScenarioError("Scenario has no block for scene {}.".format(scene_id))
    seed = scenario.seed if rng_seed is None else rng_seed
    frames = []
    for number in range(count):
        block = blocks[number % len(blocks)]
        rng = np.random.default_rng([seed, HELD_OUT_STREAM, scene_id, number])
        frames.append(_render(scenario, block, rng, -1 - number, 0.0))
    return frames


def oracle_segment(frame, prompts):
    """Traversable regions touched by at least one prompt.

    Stands in for a promptable segmentation network: returns the union of the
    4-connected components of the frame's truth mask that contain a prompt.

    :return: ``(mask, failed)``; ``failed`` is true when no prompt hit a
        traversable pixel, in which case the mask is empty
    """
    if not prompts:
        raise SegmentationError("Segmentation needs at least one prompt.")

    height, width = frame.truth_mask.shape
    components, _ = ndimage.label(frame.truth_mask, structure=FOUR_CONNECTIVITY)
    hit = set()
    for prompt in prompts:
        row, col = int(np.floor(prompt.v)), int(np.floor(prompt.u))
        if 0 <= row < height and 0 <= col < width and components[row, col] > 0:
            hit.add(int(components[row, col]))

    if not hit:
        logger.warning(
            "Segmentation failed: no prompt on a traversable region",
            extra={'frame_index': frame.index, 'prompts': len(prompts)},
        )
        return np.zeros((height, width), dtype=bool), True
    return np.isin(components, sorted(hit)), False


def class_divergence(first, second):
    """Symmetrized KL divergence between two terrain classes."""
    from .annotation import DistributionVector
    from .memory import js_divergence

    return js_divergence(
        DistributionVector(first.feature_mean, first.feature_std),
        DistributionVector(second.feature_mean, second.feature_std),
    )


def benchmark_scenario(
    seed=0,
    feature_dim=64,
    width=64,
    height=64,
    frame_counts=BENCHMARK_FRAME_COUNTS,
    feature_std=0.5,
    close_divergence=2.5,
    alias=0.5,
):
    """Imbalanced five-scene benchmark stream.

    Scenes 2 and 3 have traversable classes ``close_divergence`` apart, so they
    merge once the memory threshold exceeds it; every other pair of scenes is
    far apart. The first scene's traversable class is partially aligned
    (``alias``) with the last scene's obstacle class.
    """
    if len(frame_counts) != 5:
        raise ScenarioError("The benchmark has exactly five scenes.")
    world = np.random.default_rng(BENCHMARK_WORLD_SEED)
    ground = world.standard_normal((5, feature_dim))
    obstacles = world.standard_normal((5, feature_dim))
    direction = world.standard_normal(feature_dim)
    direction /= np.linalg.norm(direction)

    ground[0] = alias * obstacles[4] + np.sqrt(1.0 - alias ** 2) * ground[0]
    ground[3] = ground[2] + direction * feature_std * np.sqrt(2.0 * close_divergence)

    classes = {}
    blocks = []
    layouts = (LAYOUT_BANDS, LAYOUT_BLOBS, LAYOUT_BANDS, LAYOUT_BLOBS, LAYOUT_BANDS)
    for scene in range(5):
        ground_id, obstacle_id = 2 * scene, 2 * scene + 1
        classes[ground_id] = TerrainClass(
            ground_id, ground[scene], feature_std, True, 'ground-{}'.format(scene)
        )
        classes[obstacle_id] = TerrainClass(
            obstacle_id,
            obstacles[scene],
            feature_std,
            False,
            'obstacle-{}'.format(scene),
        )
        if layouts[scene] == LAYOUT_BANDS:
            block = Block(
                scene,
                (obstacle_id, ground_id),
                frame_counts[scene],
                LAYOUT_BANDS,
                (0.45, 0.55),
            )
        else:
            block = Block(
                scene, (ground_id, obstacle_id), frame_counts[scene], LAYOUT_BLOBS
            )
        blocks.append(block)

    return Scenario(
        classes=classes,
        blocks=tuple(blocks),
        feature_dim=feature_dim,
        width=width,
        height=height,
        seed=seed,
    )


def build_scenario(data):
    """Scenario from validated configuration data (see serializers)."""
    if data.get('preset') == 'benchmark':
        options = {
            key: data[key]
            for key in ('feature_dim', 'width', 'height', 'seed', 'frame_counts')
            if data.get(key) is not None
        }
        if 'frame_counts' in options:
            options['frame_counts'] = tuple(options['frame_counts'])
        return benchmark_scenario(**options)

    classes = {
        item['id']: TerrainClass(
            item['id'],
            item['mean'],
            item['std'],
            item['traversable'],
            item.get('name', ''),
        )
        for item in data['classes']
    }
    blocks = tuple(
        Block(
            scene_id=item['scene_id'],
            classes=tuple(item['classes']),
            frame_count=item['frame_count'],
            layout=item.get('layout', LAYOUT_BANDS),
            weights=tuple(item['weights']) if item.get('weights') else None,
            feature_shift=item.get('feature_shift', 0.0),
        )
        for item in data['blocks']
    )
    return Scenario(
        classes=classes,
        blocks=blocks,
        feature_dim=data.get('feature_dim') or 64,
        width=data.get('width') or 64,
        height=data.get('height') or 64,
        seed=data.get('seed') or 0,
        prompt_range=(data.get('prompt_min', 5), data.get('prompt_max', 20)),
        frame_period=data.get('frame_period', 0.1),
    )

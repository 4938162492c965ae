"""Replay memories.

`MemoryState` is the incremental dynamic memory: image nodes are grouped into
bounded clusters, and a new cluster opens whenever a node's distribution
vector is at least ``threshold`` away (symmetrized KL) from every cluster
representation. `FifoMemory` and `UnboundedMemory` are the flat baselines.
"""
import abc
import collections
import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .annotation import SIGMA_MIN, DistributionVector
from .exceptions import ReplayMemoryError
from .protocol import (
    INSERT_ASSIGNED,
    INSERT_ASSIGNED_WITH_EVICTION,
    INSERT_NEW_CLUSTER,
    SNAPSHOT_FORMAT,
    SNAPSHOT_VERSION,
    STRATEGY_FIFO,
    STRATEGY_IDM,
    STRATEGY_UNBOUNDED,
)
from .storage import atomic_open

logger = logging.getLogger(__name__)

# Smoothing added to every loss before uncertainty normalization.
UNCERTAINTY_EPSILON = 1e-6
DEFAULT_THRESHOLD = 1.0
DEFAULT_CLUSTER_CAPACITY = 20
DEFAULT_SIMILAR_RATIO = 0.5
DEFAULT_QUEUE_SIZE = 150
DEFAULT_PIXELS_PER_NODE = 64


def kl_diag_gaussian(a, b):
    """KL(a || b) between two diagonal Gaussians."""
    var_a = a.std ** 2
    var_b = b.std ** 2
    spread = (var_a + (a.mean - b.mean) ** 2) / (2.0 * var_b)
    terms = np.log(b.std / a.std) + spread - 0.5
    return float(np.sum(terms))


def js_divergence(a, b):
    """Symmetrized KL divergence ``0.5 KL(a||b) + 0.5 KL(b||a)``."""
    return 0.5 * kl_diag_gaussian(a, b) + 0.5 * kl_diag_gaussian(b, a)


def pooled_representation(vectors):
    """Pool equally weighted distribution vectors into one."""
    vectors = list(vectors)
    if not vectors:
        raise ReplayMemoryError("Cannot pool an empty set of distribution vectors.")
    if len(vectors) == 1:
        return vectors[0]
    means = np.stack([vector.mean for vector in vectors])
    second = np.stack([vector.std ** 2 + vector.mean ** 2 for vector in vectors])
    mean = means.mean(axis=0)
    variance = np.maximum(second.mean(axis=0) - mean ** 2, 0.0)
    return DistributionVector(mean, np.maximum(np.sqrt(variance), SIGMA_MIN))


@dataclass(eq=False)
class Cluster:
    id: int
    nodes: List = field(default_factory=list)
    rep: Optional[DistributionVector] = None

    def __len__(self):
        return len(self.nodes)

    def refresh(self):
        self.rep = cluster_representation(self)

    def normalize_uncertainties(self):
        total = sum(node.uncertainty for node in self.nodes)
        if total > 0:
            for node in self.nodes:
                node.uncertainty = node.uncertainty / total
        else:
            for node in self.nodes:
                node.uncertainty = 1.0 / len(self.nodes)

    def __repr__(self):
        return '<Cluster: id={} nodes={}>'.format(self.id, len(self.nodes))


def cluster_representation(cluster):
    if not cluster.nodes:
        raise ReplayMemoryError("Cluster {} is empty.".format(cluster.id))
    return pooled_representation(node.v for node in cluster.nodes)


def update_cluster(cluster, node, n_max, similar_ratio=DEFAULT_SIMILAR_RATIO):
    """Add ``node`` to ``cluster``, evicting one node when it is full.

    A full cluster ranks its nodes plus the newcomer by divergence to the
    current (pre-update) representation, keeps ``ceil(n_max * similar_ratio)``
    of the most similar and the rest of the most diverse, and evicts the one
    node ranked in between.

    :return: ``(cluster, evicted)`` where ``evicted`` may be ``None``
    """
    if len(cluster.nodes) < n_max:
        cluster.nodes.append(node)
        cluster.refresh()
        return cluster, None

    candidates = cluster.nodes + [node]
    reference = cluster.rep
    if reference is None:
        reference = cluster_representation(cluster)
    divergences = np.array([js_divergence(item.v, reference) for item in candidates])
    order = np.argsort(divergences, kind='stable')
    keep_similar = math.ceil(n_max * similar_ratio)
    evicted_position = int(order[keep_similar])

    evicted = candidates[evicted_position]
    cluster.nodes = [
        item for position, item in enumerate(candidates) if position != evicted_position
    ]
    cluster.refresh()
    return cluster, evicted


@dataclass(frozen=True)
class InsertOutcome:
    kind: str
    cluster_id: int
    min_divergence: float
    evicted_frame_index: Optional[int] = None


@dataclass(frozen=True, eq=False)
class BatchItem:
    """One replay draw: a node and the rows of it to train on."""

    node: object
    rows: np.ndarray

    @property
    def features(self):
        return self.node.features[self.rows]

    @property
    def labels(self):
        return self.node.labels[self.rows]


def _check_losses(losses):
    for node, loss in losses.items():
        if not np.isfinite(loss) or loss < 0:
            raise ReplayMemoryError(
                "Reconstruction loss of frame {} must be finite and non-negative, "
                "got {}.".format(node.frame_index, loss)
            )


class ReplayMemory(metaclass=abc.ABCMeta):
    """Common interface of the replay strategies."""

    strategy = None

    def __init__(self, pixels_per_node=DEFAULT_PIXELS_PER_NODE):
        if pixels_per_node is not None and pixels_per_node < 1:
            raise ReplayMemoryError("pixels_per_node must be >= 1.")
        self.pixels_per_node = pixels_per_node
        self.total_inserted = 0

    @abc.abstractmethod
    def insert(self, node):
        """Store ``node``; returns an `InsertOutcome`."""

    @abc.abstractmethod
    def nodes(self):
        """All stored nodes."""

    @abc.abstractmethod
    def draw_nodes(self, count, rng):
        """Draw ``count`` nodes with replacement."""

    @abc.abstractmethod
    def update_uncertainties(self, losses):
        """Reweight nodes from a ``{node: reconstruction loss}`` mapping."""

    @property
    def cluster_count(self):
        return 1 if len(self) else 0

    @property
    def capacity(self):
        return None

    def __len__(self):
        return len(self.nodes())

    def sample_batch(self, batch_size, rng):
        """Draw ``batch_size`` nodes, each with a fixed-size random row subset."""
        if batch_size < 1:
            raise ReplayMemoryError("batch_size must be >= 1.")
        if not len(self):
            raise ReplayMemoryError("Cannot sample from an empty memory.")
        batch = []
        for node in self.draw_nodes(batch_size, rng):
            total = node.pixel_count
            if self.pixels_per_node is None or self.pixels_per_node >= total:
                rows = np.arange(total)
            else:
                rows = rng.choice(total, size=self.pixels_per_node, replace=False)
                rows = np.sort(rows)
            batch.append(BatchItem(node, rows))
        return batch

    def snapshot(self):
        """Versioned JSON-serializable dump of the memory."""
        return {
            'format': SNAPSHOT_FORMAT,
            'version': SNAPSHOT_VERSION,
            'strategy': self.strategy,
            'parameters': self.parameters(),
            'total_inserted': self.total_inserted,
            'clusters': [
                {
                    'id': cluster_id,
                    'rep': rep.as_dict() if rep is not None else None,
                    'nodes': [
                        {
                            'frame_index': node.frame_index,
                            'scene_id': node.scene_id,
                            'uncertainty': node.uncertainty,
                            'pixels': node.pixel_count,
                        }
                        for node in nodes
                    ],
                }
                for cluster_id, rep, nodes in self.groups()
            ],
        }

    def parameters(self):
        return {'pixels_per_node': self.pixels_per_node}

    def groups(self):
        """``(cluster id, representation, nodes)`` triples."""
        nodes = self.nodes()
        if not nodes:
            return []
        return [(0, pooled_representation(node.v for node in nodes), nodes)]


class MemoryState(ReplayMemory):
    """Incremental dynamic memory of bounded, scene-aware clusters."""

    strategy = STRATEGY_IDM

    def __init__(
        self,
        threshold=DEFAULT_THRESHOLD,
        n_max=DEFAULT_CLUSTER_CAPACITY,
        similar_ratio=DEFAULT_SIMILAR_RATIO,
        pixels_per_node=DEFAULT_PIXELS_PER_NODE,
    ):
        super().__init__(pixels_per_node=pixels_per_node)
        if not threshold >= 0:
            raise ReplayMemoryError("threshold must be non-negative.")
        if n_max < 1:
            raise ReplayMemoryError("n_max must be >= 1.")
        if not 0 <= similar_ratio <= 1:
            raise ReplayMemoryError("similar_ratio must lie in [0, 1].")
        self.threshold = threshold
        self.n_max = n_max
        self.similar_ratio = similar_ratio
        self.clusters = []
        self._next_id = 0
        self._owner = {}

    def __repr__(self):
        return '<MemoryState: threshold={} n_max={} clusters={} nodes={}>'.format(
            self.threshold, self.n_max, len(self.clusters), len(self)
        )

    @property
    def cluster_count(self):
        return len(self.clusters)

    @property
    def capacity(self):
        return len(self.clusters) * self.n_max

    def nodes(self):
        return [node for cluster in self.clusters for node in cluster.nodes]

    def __len__(self):
        return sum(len(cluster) for cluster in self.clusters)

    def divergences(self, node):
        return [js_divergence(node.v, cluster.rep) for cluster in self.clusters]

    def insert(self, node):
        self.total_inserted += 1
        divergences = self.divergences(node)
        min_divergence = min(divergences) if divergences else math.inf

        if min_divergence >= self.threshold:
            cluster = Cluster(id=self._next_id, nodes=[node], rep=node.v)
            self._next_id += 1
            self.clusters.append(cluster)
            self._owner[node] = cluster
            node.uncertainty = 1.0
            logger.info(
                "New memory cluster",
                extra={
                    'cluster_id': cluster.id,
                    'frame_index': node.frame_index,
                    'divergence': min_divergence,
                },
            )
            return InsertOutcome(INSERT_NEW_CLUSTER, cluster.id, min_divergence)

        # argmin returns the first minimum, i.e. the lowest cluster id.
        cluster = self.clusters[int(np.argmin(divergences))]
        _, evicted = update_cluster(cluster, node, self.n_max, self.similar_ratio)
        self._owner[node] = cluster
        if evicted is not None:
            del self._owner[evicted]
        cluster.normalize_uncertainties()

        if evicted is None:
            return InsertOutcome(INSERT_ASSIGNED, cluster.id, min_divergence)
        logger.debug(
            "Evicted memory node",
            extra={
                'cluster_id': cluster.id,
                'frame_index': node.frame_index,
                'evicted_frame_index': evicted.frame_index,
            },
        )
        return InsertOutcome(
            INSERT_ASSIGNED_WITH_EVICTION,
            cluster.id,
            min_divergence,
            evicted.frame_index,
        )

    def draw_nodes(self, count, rng):
        if not self.clusters:
            raise ReplayMemoryError("Cannot sample from an empty memory.")
        picks = rng.integers(len(self.clusters), size=count)
        drawn = [None] * count
        for position, cluster in enumerate(self.clusters):
            slots = np.flatnonzero(picks == position)
            if not slots.size:
                continue
            weights = np.array(
                [node.uncertainty for node in cluster.nodes], dtype=float
            )
            total = weights.sum()
            weights = weights / total if total > 0 else None
            chosen = rng.choice(len(cluster.nodes), size=slots.size, p=weights)
            for slot, index in zip(slots, chosen):
                drawn[slot] = cluster.nodes[index]
        return drawn

    def update_uncertainties(self, losses):
        """Normalize reported losses within each cluster.

        Reported nodes get ``(loss + eps) / sum(loss + eps)`` over the reported
        nodes of their cluster; unreported nodes keep their weight and the
        cluster is renormalized to sum to one.
        """
        _check_losses(losses)
        reported = collections.defaultdict(dict)
        for node, loss in losses.items():
            cluster = self._owner.get(node)
            if cluster is None:
                # Evicted between sampling and the update.
                continue
            reported[cluster.id][node] = float(loss)

        for cluster in self.clusters:
            cluster_losses = reported.get(cluster.id)
            if not cluster_losses:
                continue
            total = sum(loss + UNCERTAINTY_EPSILON for loss in cluster_losses.values())
            for node, loss in cluster_losses.items():
                node.uncertainty = (loss + UNCERTAINTY_EPSILON) / total
            cluster.normalize_uncertainties()

    def cluster_of(self, node):
        return self._owner.get(node)

    def parameters(self):
        return {
            'threshold': self.threshold,
            'n_max': self.n_max,
            'similar_ratio': self.similar_ratio,
            'pixels_per_node': self.pixels_per_node,
        }

    def groups(self):
        return [(cluster.id, cluster.rep, cluster.nodes) for cluster in self.clusters]


class _FlatMemory(ReplayMemory):
    """Unclustered memory sampled uniformly at random."""

    def draw_nodes(self, count, rng):
        nodes = self.nodes()
        return [nodes[index] for index in rng.integers(len(nodes), size=count)]

    def update_uncertainties(self, losses):
        # Uniform sampling ignores uncertainty; losses are still validated.
        _check_losses(losses)


class FifoMemory(_FlatMemory):
    """Fixed-size first-in, first-out queue of image nodes."""

    strategy = STRATEGY_FIFO

    def __init__(
        self, queue_size=DEFAULT_QUEUE_SIZE, pixels_per_node=DEFAULT_PIXELS_PER_NODE
    ):
        super().__init__(pixels_per_node=pixels_per_node)
        if queue_size < 1:
            raise ReplayMemoryError("queue_size must be >= 1.")
        self.queue_size = queue_size
        self._queue = collections.deque()

    @property
    def capacity(self):
        return self.queue_size

    def nodes(self):
        return list(self._queue)

    def __len__(self):
        return len(self._queue)

    def insert(self, node):
        self.total_inserted += 1
        evicted = None
        if len(self._queue) >= self.queue_size:
            evicted = self._queue.popleft()
        self._queue.append(node)
        if evicted is None:
            return InsertOutcome(INSERT_ASSIGNED, 0, math.nan)
        return InsertOutcome(
            INSERT_ASSIGNED_WITH_EVICTION, 0, math.nan, evicted.frame_index
        )

    def parameters(self):
        return {'queue_size': self.queue_size, 'pixels_per_node': self.pixels_per_node}


class UnboundedMemory(_FlatMemory):
    """Stores every node without limit."""

    strategy = STRATEGY_UNBOUNDED

    def __init__(self, pixels_per_node=DEFAULT_PIXELS_PER_NODE):
        super().__init__(pixels_per_node=pixels_per_node)
        self._nodes = []

    def nodes(self):
        return list(self._nodes)

    def __len__(self):
        return len(self._nodes)

    def insert(self, node):
        self.total_inserted += 1
        self._nodes.append(node)
        return InsertOutcome(INSERT_ASSIGNED, 0, math.nan)


def make_memory(strategy, options=None):
    """Replay memory for a strategy name and its (validated) options."""
    options = dict(options or {})
    pixels_per_node = options.get('pixels_per_node', DEFAULT_PIXELS_PER_NODE)
    if strategy == STRATEGY_IDM:
        return MemoryState(
            threshold=options.get('threshold', DEFAULT_THRESHOLD),
            n_max=options.get('n_max', DEFAULT_CLUSTER_CAPACITY),
            similar_ratio=options.get('similar_ratio', DEFAULT_SIMILAR_RATIO),
            pixels_per_node=pixels_per_node,
        )
    if strategy == STRATEGY_FIFO:
        return FifoMemory(
            queue_size=options.get('queue_size', DEFAULT_QUEUE_SIZE),
            pixels_per_node=pixels_per_node,
        )
    if strategy == STRATEGY_UNBOUNDED:
        return UnboundedMemory(pixels_per_node=pixels_per_node)
    raise ReplayMemoryError("Unknown replay strategy '{}'.".format(strategy))


def save_snapshot(path, memory):
    with atomic_open(path, 'w') as fh:
        json.dump(memory.snapshot(), fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write('\n')


def load_snapshot_summary(path):
    """Read a memory snapshot and summarize its clusters.

    :return: dict with ``strategy``, ``parameters``, ``total_inserted``,
        ``stored`` and a ``clusters`` list of ``{id, size, scenes, frames,
        uncertainty_sum}``
    """
    try:
        with open(path, 'r', encoding='utf8') as fh:
            data = json.load(fh)
    except json.JSONDecodeError as error:
        raise ReplayMemoryError("{}: not a JSON document ({}).".format(path, error))
    if not isinstance(data, dict) or data.get('format') != SNAPSHOT_FORMAT:
        raise ReplayMemoryError("{}: not a memory snapshot.".format(path))
    if data.get('version') != SNAPSHOT_VERSION:
        raise ReplayMemoryError(
            "{}: unsupported snapshot version {}.".format(path, data.get('version'))
        )

    clusters = []
    for cluster in data['clusters']:
        nodes = cluster['nodes']
        clusters.append(
            {
                'id': cluster['id'],
                'size': len(nodes),
                'scenes': dict(
                    collections.Counter(
                        'unknown' if node['scene_id'] is None else node['scene_id']
                        for node in nodes
                    )
                ),
                'frames': [node['frame_index'] for node in nodes],
                'uncertainty_sum': sum(node['uncertainty'] for node in nodes),
            }
        )
    return {
        'strategy': data['strategy'],
        'parameters': data['parameters'],
        'total_inserted': data['total_inserted'],
        'stored': sum(cluster['size'] for cluster in clusters),
        'clusters': clusters,
    }

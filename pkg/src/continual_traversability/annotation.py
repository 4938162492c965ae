"""Self-supervised annotation: supervision pairs and memory image nodes."""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import AnnotationError, NoTraversableEvidenceError

logger = logging.getLogger(__name__)

# Floor of every distribution-vector standard deviation.
SIGMA_MIN = 1e-4
# Default per-node pixel budget.
DEFAULT_MAX_PIXELS = 512


@dataclass(frozen=True, eq=False)
class DistributionVector:
    """Per-dimension mean and standard deviation, read as a diagonal Gaussian."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        std = np.maximum(np.array(self.std, dtype=np.float64).reshape(-1), SIGMA_MIN)
        if mean.shape != std.shape:
            raise AnnotationError("Distribution vector mean and std dimensions differ.")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'std', std)

    @property
    def dim(self):
        return self.mean.size

    def as_dict(self):
        return {'mean': self.mean.tolist(), 'std': self.std.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(data['mean'], data['std'])


@dataclass(frozen=True, eq=False)
class SupervisionPairs:
    features: np.ndarray
    labels: np.ndarray
    # Flat (row-major) pixel index of every row.
    pixel_indices: np.ndarray


@dataclass(eq=False)
class ImageNode:
    """Memory atom: subsampled pixels, their labels and the frame's V.

    Nodes compare and hash by identity. Only the replay memory mutates
    ``uncertainty``.
    """

    features: np.ndarray
    labels: np.ndarray
    v: DistributionVector
    frame_index: int
    scene_id: Optional[int] = None
    uncertainty: float = 1.0
    pixel_indices: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def pixel_count(self):
        return self.labels.shape[0]

    def __repr__(self):
        return '<ImageNode: frame={} scene={} pixels={} uncertainty={:.4g}>'.format(
            self.frame_index, self.scene_id, self.pixel_count, self.uncertainty
        )


def _check_mask(frame, mask):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != frame.features.shape[:2]:
        raise AnnotationError(
            "Mask shape {} does not match frame shape {}.".format(
                mask.shape, frame.features.shape[:2]
            )
        )
    return mask


def supervision_pairs(
    frame, mask, max_pixels=DEFAULT_MAX_PIXELS, include_negatives=True, rng=None
):
    """Stratified pixel subsample of a frame with its mask labels.

    The positive fraction of the subsample matches the mask's within one pixel
    of rounding. With ``include_negatives`` false only mask-true pixels are
    drawn.
    """
    mask = _check_mask(frame, mask)
    if max_pixels < 1:
        raise AnnotationError("max_pixels must be >= 1.")
    flat_mask = mask.reshape(-1)
    positives = np.flatnonzero(flat_mask)
    negatives = np.flatnonzero(~flat_mask)
    if positives.size == 0:
        raise NoTraversableEvidenceError(
            "Frame {} has no traversable evidence.".format(frame.index)
        )
    rng = np.random.default_rng(0) if rng is None else rng

    if include_negatives:
        total = min(max_pixels, flat_mask.size)
        take_positive = int(round(total * positives.size / flat_mask.size))
        take_positive = min(max(take_positive, 1), positives.size)
        take_negative = min(total - take_positive, negatives.size)
    else:
        take_positive = min(max_pixels, positives.size)
        take_negative = 0

    chosen = np.concatenate(
        [
            rng.choice(positives, size=take_positive, replace=False),
            rng.choice(negatives, size=take_negative, replace=False),
        ]
    )
    chosen = np.sort(chosen.astype(np.int64))
    features = frame.features.reshape(-1, frame.features.shape[-1])[chosen]
    return SupervisionPairs(
        features=np.array(features, dtype=np.float32),
        labels=flat_mask[chosen].copy(),
        pixel_indices=chosen,
    )


def distribution_vector(features, mask):
    """Mean and population std of the masked pixels (over the full mask)."""
    selected = np.asarray(features, dtype=np.float64)[np.asarray(mask, dtype=bool)]
    return DistributionVector(selected.mean(axis=0), selected.std(axis=0))


def build_node(
    frame, mask, max_pixels=DEFAULT_MAX_PIXELS, include_negatives=True, rng=None
):
    """Build the memory image node of a segmented frame."""
    mask = _check_mask(frame, mask)
    traversable = int(mask.sum())
    if traversable == 0:
        raise NoTraversableEvidenceError(
            "Frame {} has no traversable evidence.".format(frame.index)
        )
    if traversable < 2:
        raise AnnotationError(
            "Frame {} has a single traversable pixel; std is undefined.".format(
                frame.index
            )
        )

    pairs = supervision_pairs(
        frame, mask, max_pixels=max_pixels, include_negatives=include_negatives, rng=rng
    )
    return ImageNode(
        features=pairs.features,
        labels=pairs.labels,
        v=distribution_vector(frame.features, mask),
        frame_index=frame.index,
        scene_id=frame.scene_id,
        pixel_indices=pairs.pixel_indices,
    )

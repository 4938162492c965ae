"""Rigid-transform algebra and footprint projection.

Transforms follow the ``dst_from_src`` convention: applying a transform maps
coordinates expressed in ``src`` into ``dst``. An odometry pose maps odometry
coordinates into the lidar frame, so the footprint chain reads::

    p_cam = cam_from_fc * fc_from_base * base_from_lidar * lidar_from_odom * p_odom
"""
import json
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .exceptions import GeometryError

logger = logging.getLogger(__name__)

# Orthonormality tolerance checked at construction.
ORTHONORMAL_TOLERANCE = 1e-9
# Composition re-orthonormalizes once drift exceeds this.
DRIFT_TOLERANCE = 1e-12
# Default minimum camera-frame depth of a visible point (meters).
DEFAULT_Z_MIN = 0.05


def _orthonormal_drift(rotation):
    return float(np.max(np.abs(rotation.T @ rotation - np.eye(3))))


def _reorthonormalize(rotation):
    u, _, vt = np.linalg.svd(rotation)
    result = u @ vt
    if np.linalg.det(result) < 0:
        u[:, -1] = -u[:, -1]
        result = u @ vt
    return result


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid transform (rotation + translation)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64)
        translation = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise GeometryError(
                "Rigid transform needs a 3x3 rotation and a 3-vector translation, "
                "got {} and {}.".format(rotation.shape, translation.shape)
            )
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise GeometryError("Rigid transform contains non-finite values.")
        if _orthonormal_drift(rotation) > ORTHONORMAL_TOLERANCE:
            raise GeometryError("Rotation matrix is not orthonormal.")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise GeometryError("Rotation matrix is not a proper rotation (det != +1).")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix):
        """Build from a 4x4 homogeneous matrix."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise GeometryError("Expected a 4x4 matrix, got {}.".format(matrix.shape))
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def about_z(cls, angle, translation=(0.0, 0.0, 0.0)):
        """Rotation by ``angle`` radians about the z axis."""
        c, s = np.cos(angle), np.sin(angle)
        rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rotation, translation)

    def matrix(self):
        """4x4 homogeneous matrix."""
        result = np.eye(4)
        result[:3, :3] = self.rotation
        result[:3, 3] = self.translation
        return result

    def apply(self, points):
        """Transform an (N, 3) array (or a single 3-vector) of points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def is_close(self, other, tolerance=1e-9):
        return bool(
            np.allclose(self.rotation, other.rotation, atol=tolerance, rtol=0)
            and np.allclose(self.translation, other.translation, atol=tolerance, rtol=0)
        )

    def __repr__(self):
        return '<RigidTransform: rotation={} translation={}>'.format(
            self.rotation.tolist(), self.translation.tolist()
        )


def compose(a, b):
    """Transform applying ``b`` first, then ``a``."""
    rotation = a.rotation @ b.rotation
    if _orthonormal_drift(rotation) > DRIFT_TOLERANCE:
        rotation = _reorthonormalize(rotation)
    translation = a.rotation @ b.translation + a.translation
    return RigidTransform(rotation, translation)


def inverse(transform):
    rotation = transform.rotation.T
    return RigidTransform(rotation, -rotation @ transform.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera parameters (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("Focal lengths must be positive.")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("Image size must be positive.")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("Principal point must lie inside the image.")


@dataclass(frozen=True, eq=False)
class OdometrySample:
    """Odometry pose (odometry frame -> lidar frame) at a timestamp."""

    timestamp: float
    pose: RigidTransform

    @property
    def position(self):
        """Lidar origin expressed in the odometry frame."""
        return -self.pose.rotation.T @ self.pose.translation


@dataclass(frozen=True)
class PixelPrompt:
    u: float
    v: float
    source_timestamp: float = 0.0


@dataclass(frozen=True)
class FootprintChain:
    """Calibration transforms between the camera, foot centre, base and lidar."""

    cam_from_fc: RigidTransform = field(default_factory=RigidTransform.identity)
    fc_from_base: RigidTransform = field(default_factory=RigidTransform.identity)
    base_from_lidar: RigidTransform = field(default_factory=RigidTransform.identity)

    def cam_from_lidar(self):
        cam_from_base = compose(self.cam_from_fc, self.fc_from_base)
        return compose(cam_from_base, self.base_from_lidar)

    def lidar_from_fc(self):
        return inverse(compose(self.fc_from_base, self.base_from_lidar))


@dataclass
class ProjectionResult:
    prompts: List[PixelPrompt]
    dropped_behind: int = 0
    dropped_outside: int = 0

    @property
    def dropped(self):
        return self.dropped_behind + self.dropped_outside


def check_odometry_session(session):
    """Verify timestamps are strictly increasing."""
    timestamps = [sample.timestamp for sample in session]
    for index in range(1, len(timestamps)):
        if not timestamps[index] > timestamps[index - 1]:
            raise GeometryError(
                "Odometry timestamps must be strictly increasing (sample {}).".format(
                    index
                )
            )


def select_valid_odometry(
    session, frame_pose, frame_timestamp, d_max, future_only=True
):
    """Odometry samples usable as self-supervised footprints for one frame.

    :param session: Sequence of `OdometrySample` instances
    :param frame_pose: Odometry pose of the frame
    :param frame_timestamp: Capture time of the frame
    :param d_max: Maximum distance (meters) between frame and sample positions
    :param future_only: Only keep samples at or after the frame time; when
        false, the time window is symmetric (all samples within ``d_max``)
    """
    if not d_max > 0:
        raise GeometryError("d_max must be positive, got {}.".format(d_max))
    if not session:
        return []

    origin = -frame_pose.rotation.T @ frame_pose.translation
    positions = np.array([sample.position for sample in session])
    distances = np.linalg.norm(positions - origin, axis=1)
    keep = distances <= d_max
    if future_only:
        timestamps = np.array([sample.timestamp for sample in session])
        keep &= timestamps >= frame_timestamp
    return [sample for sample, kept in zip(session, keep) if kept]


def footprint_points(samples, chain):
    """Foot-centre origins of the given samples, in the odometry frame."""
    if not samples:
        return np.zeros((0, 3))
    lidar_from_fc = chain.lidar_from_fc()
    points = []
    for sample in samples:
        odom_from_fc = compose(inverse(sample.pose), lidar_from_fc)
        points.append(odom_from_fc.translation)
    return np.array(points)


def project_points(
    points, timestamps, frame_pose, chain, intrinsics, z_min=DEFAULT_Z_MIN
):
    """Project odometry-frame points into pixel prompts."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam_from_odom = compose(chain.cam_from_lidar(), frame_pose)
    camera = cam_from_odom.apply(points)

    result = ProjectionResult(prompts=[])
    for (x, y, z), timestamp in zip(camera, timestamps):
        if z <= z_min:
            result.dropped_behind += 1
            continue
        u = intrinsics.fx * x / z + intrinsics.cx
        v = intrinsics.fy * y / z + intrinsics.cy
        if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
            result.dropped_outside += 1
            continue
        result.prompts.append(PixelPrompt(float(u), float(v), float(timestamp)))
    return result


def project_footprints(samples, frame_pose, chain, intrinsics, z_min=DEFAULT_Z_MIN):
    """Project odometry footprints onto the image of a frame.

    :param samples: Valid `OdometrySample` instances (see `select_valid_odometry`)
    :param frame_pose: Odometry pose (odometry -> lidar) at the frame time
    :param chain: `FootprintChain` calibration
    :param intrinsics: `CameraIntrinsics`
    :return: `ProjectionResult` with prompts and drop counters
    """
    result = project_points(
        footprint_points(samples, chain),
        [sample.timestamp for sample in samples],
        frame_pose,
        chain,
        intrinsics,
        z_min=z_min,
    )
    if result.dropped:
        logger.debug(
            "Dropped footprints outside the camera view",
            extra={
                'dropped_behind': result.dropped_behind,
                'dropped_outside': result.dropped_outside,
            },
        )
    return result


def frame_pose_at(session, timestamp):
    """Latest odometry sample taken at or before ``timestamp``."""
    best = None
    for sample in session:
        if sample.timestamp <= timestamp:
            best = sample
        else:
            break
    if best is None:
        if not session:
            raise GeometryError("Odometry session is empty.")
        best = session[0]
    return best


def load_odometry(path):
    """Parse a plain-text odometry file.

    Each non-empty line holds ``timestamp`` followed by the 9 row-major
    rotation entries and the 3 translation entries.
    """
    session = []
    with open(path, 'r') as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            fields = line.split()
            if len(fields) != 13:
                raise GeometryError(
                    "{}:{}: expected 13 values, got {}.".format(
                        path, line_number, len(fields)
                    )
                )
            try:
                values = [float(value) for value in fields]
            except ValueError:
                raise GeometryError(
                    "{}:{}: values must be decimal numbers.".format(path, line_number)
                )
            try:
                pose = RigidTransform(np.reshape(values[1:10], (3, 3)), values[10:13])
            except GeometryError as error:
                raise GeometryError("{}:{}: {}".format(path, line_number, error))
            if session and not values[0] > session[-1].timestamp:
                raise GeometryError(
                    "{}:{}: timestamps must be strictly increasing.".format(
                        path, line_number
                    )
                )
            session.append(OdometrySample(values[0], pose))
    return session


def save_odometry(path, session):
    check_odometry_session(session)
    with open(path, 'w') as fh:
        for sample in session:
            values = [sample.timestamp]
            values.extend(sample.pose.rotation.reshape(-1).tolist())
            values.extend(sample.pose.translation.tolist())
            fh.write(' '.join(repr(float(value)) for value in values))
            fh.write('\n')


def load_calibration(path):
    """Read a calibration JSON document.

    Holds ``intrinsics`` (``fx``, ``fy``, ``cx``, ``cy``, ``width``,
    ``height``) and optional 4x4 ``cam_from_fc``, ``fc_from_base`` and
    ``base_from_lidar`` matrices (identity when missing).

    :return: ``(FootprintChain, CameraIntrinsics)``
    """
    try:
        with open(path, 'r', encoding='utf8') as fh:
            data = json.load(fh)
    except json.JSONDecodeError as error:
        raise GeometryError("{}: not a JSON document ({}).".format(path, error))
    try:
        intrinsics = CameraIntrinsics(**data['intrinsics'])
    except (KeyError, TypeError) as error:
        raise GeometryError("{}: invalid intrinsics ({}).".format(path, error))

    transforms = {}
    for name in ('cam_from_fc', 'fc_from_base', 'base_from_lidar'):
        if name in data:
            try:
                transforms[name] = RigidTransform.from_matrix(data[name])
            except GeometryError as error:
                raise GeometryError("{}: {}: {}".format(path, name, error))
    return FootprintChain(**transforms), intrinsics

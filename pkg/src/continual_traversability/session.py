"""Recorded-session binary codec.

Layout (all integers little-endian)::

    header:    magic "TRAVSESS" | u32 version | u32 H | u32 W | u32 D | u32 frame_count
    per frame: f32[H*W*D] features (row-major) | u8[H*W] mask (0/1)
               | u32 prompt_count | f32[2*prompt_count] (u, v) pairs | i32 scene_id
"""
import logging
import os
import struct

import numpy as np

from .exceptions import (
    MalformedHeaderError,
    NonFiniteFeaturesError,
    ShapeMismatchError,
    TruncatedSessionError,
)
from .geometry import PixelPrompt
from .protocol import SESSION_MAGIC, SESSION_VERSION
from .scene import Frame
from .storage import atomic_open

logger = logging.getLogger(__name__)

HEADER = struct.Struct('<8s5I')
COUNT = struct.Struct('<I')
SCENE = struct.Struct('<i')
UNKNOWN_SCENE = -1


class RecordedSession:
    """Frames stored in a recorded-session file.

    The header is validated on construction; frames are decoded lazily while
    iterating, so decoding errors surface at the failing frame.
    """

    def __init__(self, path):
        self.path = path
        with open(path, 'rb') as fh:
            raw = fh.read(HEADER.size)
        if len(raw) < HEADER.size:
            raise MalformedHeaderError("Session header is truncated.")
        magic, version, height, width, depth, count = HEADER.unpack(raw)
        if magic != SESSION_MAGIC:
            raise MalformedHeaderError(
                "Not a recorded session (bad magic {!r}).".format(magic)
            )
        if version != SESSION_VERSION:
            raise MalformedHeaderError(
                "Unsupported session version {}.".format(version)
            )
        if height == 0 or width == 0 or depth == 0:
            raise MalformedHeaderError("Session dimensions must be positive.")
        self.height = height
        self.width = width
        self.feature_dim = depth
        self.frame_count = count
        self.file_size = os.path.getsize(path)

    def __len__(self):
        return self.frame_count

    def __repr__(self):
        return '<RecordedSession: path={} frames={} shape=({}, {}, {})>'.format(
            self.path, self.frame_count, self.height, self.width, self.feature_dim
        )

    def _read(self, fh, size, index, what):
        data = fh.read(size)
        if len(data) != size:
            raise TruncatedSessionError(
                "File ends inside the {} ({} of {} bytes).".format(
                    what, len(data), size
                ),
                frame_index=index,
            )
        return data

    def _fits_other_depth(self, data):
        """Whether ``data`` starts with a whole frame of a different D."""
        pixels = self.height * self.width
        tail = pixels + COUNT.size + SCENE.size
        for depth in range(1, (len(data) - tail) // (pixels * 4) + 1):
            if depth == self.feature_dim:
                continue
            offset = pixels * depth * 4
            mask = np.frombuffer(data[offset : offset + pixels], dtype=np.uint8)
            if np.any(mask > 1):
                continue
            (prompt_count,) = COUNT.unpack_from(data, offset + pixels)
            if prompt_count > pixels:
                continue
            if offset + tail + prompt_count * 8 <= len(data):
                return True
        return False

    def _decode_frame(self, fh, index):
        pixels = self.height * self.width
        feature_bytes = pixels * self.feature_dim * 4
        remaining = self.file_size - fh.tell()
        if remaining < feature_bytes:
            data = fh.read(remaining)
            fh.seek(-len(data), os.SEEK_CUR)
            if self._fits_other_depth(data):
                raise ShapeMismatchError(
                    "Payload holds a frame whose feature dimension differs from "
                    "the header D={}.".format(self.feature_dim),
                    frame_index=index,
                )
        features = np.frombuffer(
            self._read(fh, feature_bytes, index, 'feature block'), dtype='<f4'
        )
        mask = np.frombuffer(self._read(fh, pixels, index, 'mask'), dtype=np.uint8)
        # A wrong D in the header shifts every later field; the mask and the
        # prompt count are where it shows.
        if np.any(mask > 1):
            raise ShapeMismatchError(
                "Mask bytes must be 0 or 1; payload does not match the header shape.",
                frame_index=index,
            )
        raw_count = self._read(fh, COUNT.size, index, 'prompt count')
        (prompt_count,) = COUNT.unpack(raw_count)
        if prompt_count > pixels:
            raise ShapeMismatchError(
                "Prompt count {} exceeds the {} pixels of a frame.".format(
                    prompt_count, pixels
                ),
                frame_index=index,
            )
        pairs = np.frombuffer(
            self._read(fh, prompt_count * 8, index, 'prompt block'), dtype='<f4'
        )
        (scene_id,) = SCENE.unpack(self._read(fh, SCENE.size, index, 'scene id'))

        if not np.all(np.isfinite(features)):
            raise NonFiniteFeaturesError(
                "Features contain NaN or Inf.", frame_index=index
            )

        prompts = tuple(
            PixelPrompt(float(u), float(v)) for u, v in pairs.reshape(-1, 2).tolist()
        )
        return Frame(
            features=features.reshape(self.height, self.width, self.feature_dim).astype(
                np.float32
            ),
            truth_mask=mask.reshape(self.height, self.width).astype(bool),
            prompts=prompts,
            scene_id=scene_id,
            index=index,
        )

    def __iter__(self):
        with open(self.path, 'rb') as fh:
            fh.seek(HEADER.size)
            for index in range(self.frame_count):
                yield self._decode_frame(fh, index)
            if fh.read(1):
                raise ShapeMismatchError(
                    "Trailing bytes after the last frame; payload does not match the "
                    "header shape.",
                    frame_index=self.frame_count - 1,
                )


def load_recorded_session(path):
    return RecordedSession(path)


def _encode_frame(fh, frame, shape):
    if frame.features.shape != shape:
        raise ShapeMismatchError(
            "Frame shape {} differs from session shape {}.".format(
                frame.features.shape, shape
            ),
            frame_index=frame.index,
        )
    if not np.all(np.isfinite(frame.features)):
        raise NonFiniteFeaturesError(
            "Features contain NaN or Inf.", frame_index=frame.index
        )
    fh.write(np.ascontiguousarray(frame.features, dtype='<f4').tobytes())
    fh.write(np.ascontiguousarray(frame.truth_mask, dtype=np.uint8).tobytes())
    fh.write(COUNT.pack(len(frame.prompts)))
    pairs = np.array([(p.u, p.v) for p in frame.prompts], dtype='<f4').reshape(-1)
    fh.write(pairs.tobytes())
    scene_id = UNKNOWN_SCENE if frame.scene_id is None else frame.scene_id
    fh.write(SCENE.pack(scene_id))


def save_session(path, frames):
    """Write frames to a recorded-session file.

    :param frames: Iterable of `Frame`; all frames must share one shape
    :return: Number of frames written
    """
    count = 0
    shape = None
    with atomic_open(path, 'wb') as fh:
        fh.write(bytes(HEADER.size))
        for frame in frames:
            if shape is None:
                shape = frame.features.shape
            _encode_frame(fh, frame, shape)
            count += 1
        if shape is None:
            raise ShapeMismatchError("Cannot write a session without frames.")
        fh.seek(0)
        fh.write(HEADER.pack(SESSION_MAGIC, SESSION_VERSION, *shape, count))
        fh.seek(0, 2)

    logger.info("Recorded session written", extra={'path': str(path), 'frames': count})
    return count

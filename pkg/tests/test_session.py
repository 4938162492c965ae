import struct

import numpy as np
import pytest

from continual_traversability.exceptions import (
    MalformedHeaderError,
    NonFiniteFeaturesError,
    ShapeMismatchError,
    TruncatedSessionError,
)
from continual_traversability.scene import Frame, generate_stream
from continual_traversability.session import (
    HEADER,
    RecordedSession,
    load_recorded_session,
    save_session,
)

from factories import separated_scenario


def frame_size(frame):
    height, width, depth = frame.features.shape
    return height * width * depth * 4 + height * width + 4 + 8 * len(frame.prompts) + 4


@pytest.fixture
def frames():
    scenario = separated_scenario(
        scenes=2, frame_count=2, feature_dim=8, width=8, height=8
    )
    return list(generate_stream(scenario))


@pytest.fixture
def session_path(tmp_path, frames):
    path = tmp_path / 'session.bin'
    save_session(path, frames)
    return path


def test_round_trip(session_path, frames):
    session = load_recorded_session(session_path)
    assert (session.height, session.width, session.feature_dim) == (8, 8, 8)
    assert len(session) == 4

    loaded = list(session)
    assert len(loaded) == 4
    for original, restored in zip(frames, loaded):
        assert restored.features.tobytes() == original.features.tobytes()
        np.testing.assert_array_equal(restored.truth_mask, original.truth_mask)
        assert [(p.u, p.v) for p in restored.prompts] == [
            (p.u, p.v) for p in original.prompts
        ]
        assert restored.scene_id == original.scene_id
        assert restored.index == original.index

    # Iterating twice decodes the same frames.
    again = list(session)
    assert again[3].features.tobytes() == loaded[3].features.tobytes()


def test_truncated(session_path, frames):
    data = session_path.read_bytes()
    cut = HEADER.size + frame_size(frames[0]) + frame_size(frames[1]) + 10
    session_path.write_bytes(data[:cut])

    session = RecordedSession(session_path)
    decoded = []
    with pytest.raises(TruncatedSessionError) as error:
        for frame in session:
            decoded.append(frame)
    assert error.value.frame_index == 2
    assert len(decoded) == 2
    assert 'frame 2' in str(error.value)


@pytest.mark.parametrize('frame_count', [1, 3])
def test_header_feature_dim_mismatch(tmp_path, frame_count):
    scenario = separated_scenario(
        scenes=1, frame_count=frame_count, feature_dim=64, width=8, height=8
    )
    path = tmp_path / 'session.bin'
    save_session(path, generate_stream(scenario))

    data = bytearray(path.read_bytes())
    magic, version, height, width, _, count = HEADER.unpack(data[: HEADER.size])
    data[: HEADER.size] = HEADER.pack(magic, version, height, width, 90, count)
    path.write_bytes(bytes(data))

    with pytest.raises(ShapeMismatchError) as error:
        list(load_recorded_session(path))
    assert error.value.frame_index == 0


def test_truncated_single_frame(tmp_path):
    scenario = separated_scenario(
        scenes=1, frame_count=1, feature_dim=64, width=8, height=8
    )
    path = tmp_path / 'session.bin'
    save_session(path, generate_stream(scenario))
    data = path.read_bytes()
    path.write_bytes(data[: HEADER.size + 1000])

    with pytest.raises(TruncatedSessionError) as error:
        list(load_recorded_session(path))
    assert error.value.frame_index == 0


def test_trailing_bytes(session_path):
    with open(session_path, 'ab') as fh:
        fh.write(b'\x00' * 3)
    with pytest.raises(ShapeMismatchError):
        list(load_recorded_session(session_path))


def test_non_finite_features(session_path, frames):
    data = bytearray(session_path.read_bytes())
    offset = HEADER.size + frame_size(frames[0]) + 4 * 5
    data[offset : offset + 4] = struct.pack('<f', float('nan'))
    session_path.write_bytes(bytes(data))

    with pytest.raises(NonFiniteFeaturesError) as error:
        list(load_recorded_session(session_path))
    assert error.value.frame_index == 1


def test_malformed_header(tmp_path, session_path):
    short = tmp_path / 'short.bin'
    short.write_bytes(b'TRAV')
    with pytest.raises(MalformedHeaderError):
        RecordedSession(short)

    data = bytearray(session_path.read_bytes())
    data[:8] = b'NOTASESS'
    bad_magic = tmp_path / 'magic.bin'
    bad_magic.write_bytes(bytes(data))
    with pytest.raises(MalformedHeaderError, match='magic'):
        RecordedSession(bad_magic)

    data = bytearray(session_path.read_bytes())
    data[8:12] = struct.pack('<I', 99)
    bad_version = tmp_path / 'version.bin'
    bad_version.write_bytes(bytes(data))
    with pytest.raises(MalformedHeaderError, match='version'):
        RecordedSession(bad_version)


def test_save_validation(tmp_path, frames):
    path = tmp_path / 'session.bin'
    with pytest.raises(ShapeMismatchError):
        save_session(path, [])

    odd = Frame(np.zeros((4, 4, 8), dtype=np.float32), np.ones((4, 4), bool), (), 0, 9)
    with pytest.raises(ShapeMismatchError):
        save_session(path, [frames[0], odd])

    broken = Frame(
        np.full((8, 8, 8), np.inf, dtype=np.float32), frames[0].truth_mask, (), 0, 3
    )
    with pytest.raises(NonFiniteFeaturesError):
        save_session(path, [broken])

    # Failed writes leave nothing behind.
    assert not path.exists()
    assert list(tmp_path.iterdir()) == []

import numpy as np
import pytest

from maptrack.dataset import (DatasetError, check_stream, iter_frames, load_rig, load_session, save_rig, save_session,
                              write_frames)
from maptrack.simulation import APPEARANCE_PRESETS, NoiseConfig, loop_trajectory, simulate_session


@pytest.fixture(scope="module")
def session(small_world, rig):
    traj = loop_trajectory(small_world.config)[:12]
    return simulate_session(small_world, rig, traj, APPEARANCE_PRESETS["day"], NoiseConfig(fix_every=5), seed=4)


def same_frame(a, b):
    assert a.timestamp == b.timestamp and a.fix_sigma == b.fix_sigma
    assert a.odometry.delta == b.odometry.delta
    assert np.array_equal(a.odometry.covariance, b.odometry.covariance)
    assert (a.fix is None) == (b.fix is None)
    if a.fix is not None:
        assert np.array_equal(a.fix, b.fix)
    assert a.truth == b.truth
    for x, y in zip(a.keypoints, b.keypoints, strict=True):
        assert np.array_equal(x.positions, y.positions)
        assert np.array_equal(x.descriptors, y.descriptors)
        assert np.array_equal(x.point_ids, y.point_ids)


def test_session_round_trip(tmp_path, session):
    save_session(session, tmp_path / "s")
    back = load_session(tmp_path / "s")
    assert back.rig == session.rig and back.descriptor_length == 512 and back.label == "day"
    assert back.meta["seed"] == 4
    for a, b in zip(session.frames, back.frames, strict=True):
        same_frame(a, b)


def test_rig_round_trip(tmp_path, rig):
    save_rig(rig, tmp_path / "rig.json")
    assert load_rig(tmp_path / "rig.json") == rig


def test_stream_rejects_bad_magic(tmp_path, session):
    write_frames(tmp_path / "f.bin", session.frames, 512)
    data = bytearray((tmp_path / "f.bin").read_bytes())
    data[:4] = b"XXXX"
    (tmp_path / "f.bin").write_bytes(bytes(data))
    with pytest.raises(DatasetError):
        list(iter_frames(tmp_path / "f.bin"))


def test_stream_detects_truncation(tmp_path, session):
    write_frames(tmp_path / "f.bin", session.frames, 512)
    data = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "f.bin").write_bytes(data[:-7])
    with pytest.raises(DatasetError):
        list(iter_frames(tmp_path / "f.bin"))


def test_timestamps_must_increase(session):
    check_stream(session.frames)
    with pytest.raises(DatasetError):
        check_stream([session.frames[1], session.frames[0]])


def test_missing_session_directory(tmp_path):
    with pytest.raises(DatasetError):
        load_session(tmp_path / "nothing")

"""Frame bundles and the on-disk session format.

A session directory holds::

    rig.json      camera models
    session.json  metadata (descriptor length, label, free-form extras)
    frames.bin    "MTFS" + u32 version + u32 descriptor bits, then one
                  u32-length-prefixed record per frame

All binary fields are little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .estimator import OdometryMeasurement
from .features import KeypointSet, nbytes_for
from .geometry import CameraModel, Pose

STREAM_MAGIC = b"MTFS"
STREAM_VERSION = 1


class DatasetError(Exception):
    pass


@dataclass(eq=False)
class FrameBundle:
    """One timestep: per-camera keypoints plus the odometry increment into it."""

    timestamp: float
    keypoints: list[KeypointSet]
    odometry: OdometryMeasurement
    fix: Optional[np.ndarray] = None
    fix_sigma: float = 0.0
    truth: Optional[Pose] = None

    @property
    def n_keypoints(self) -> int:
        return sum(len(k) for k in self.keypoints)


def check_stream(bundles: Sequence[FrameBundle]) -> None:
    last = -np.inf
    for b in bundles:
        if not b.timestamp > last:
            raise DatasetError(f"timestamps not strictly increasing at t={b.timestamp}")
        last = b.timestamp


def save_rig(rig: Sequence[CameraModel], path) -> None:
    Path(path).write_text(json.dumps({"cameras": [c.to_dict() for c in rig]}, indent=2))


def load_rig(path) -> list[CameraModel]:
    d = json.loads(Path(path).read_text())
    return [CameraModel.from_dict(c) for c in d["cameras"]]


def _encode_frame(b: FrameBundle, nb: int) -> bytes:
    parts = [struct.pack("<dI", b.timestamp, len(b.keypoints))]
    for kp in b.keypoints:
        n = len(kp)
        ids = kp.point_ids if kp.point_ids is not None else np.full(n, -1, dtype=np.int64)
        parts.append(struct.pack("<I", n))
        parts.append(np.ascontiguousarray(kp.positions, dtype="<f8").tobytes())
        desc = np.ascontiguousarray(kp.descriptors, dtype=np.uint8).reshape(n, nb)
        parts.append(desc.tobytes())
        parts.append(np.ascontiguousarray(ids, dtype="<i8").tobytes())
    parts.append(np.asarray(b.odometry.delta.as_array(), dtype="<f8").tobytes())
    parts.append(np.asarray(b.odometry.covariance, dtype="<f8").reshape(36).tobytes())
    flags = (1 if b.fix is not None else 0) | (2 if b.truth is not None else 0)
    parts.append(struct.pack("<B", flags))
    if b.fix is not None:
        fix = np.zeros(3)
        fix[:len(b.fix)] = b.fix
        parts.append(struct.pack("<Bd", len(b.fix), b.fix_sigma))
        parts.append(fix.astype("<f8").tobytes())
    if b.truth is not None:
        parts.append(b.truth.as_array().astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise DatasetError("frame record truncated")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def _decode_frame(data: bytes, nb: int) -> FrameBundle:
    r = _Reader(data)
    ts, ncam = r.unpack("<dI")
    kps = []
    for _ in range(ncam):
        (n,) = r.unpack("<I")
        pos = r.array("<f8", 2 * n).reshape(n, 2)
        desc = r.array(np.uint8, nb * n).reshape(n, nb)
        ids = r.array("<i8", n)
        kps.append(KeypointSet(pos, desc, ids))
    odo_pose = Pose.from_array(r.array("<f8", 7))
    Q = r.array("<f8", 36).reshape(6, 6)
    (flags,) = r.unpack("<B")
    fix, sigma, truth = None, 0.0, None
    if flags & 1:
        dim, sigma = r.unpack("<Bd")
        fix = r.array("<f8", 3)[:dim]
    if flags & 2:
        truth = Pose.from_array(r.array("<f8", 7))
    if r.off != len(data):
        raise DatasetError("unexpected trailing bytes in frame record")
    return FrameBundle(ts, kps, OdometryMeasurement(odo_pose, Q), fix, sigma, truth)


def write_frames(path, bundles: Sequence[FrameBundle], descriptor_length: int) -> None:
    nb = nbytes_for(descriptor_length)
    with open(path, "wb") as f:
        f.write(STREAM_MAGIC + struct.pack("<II", STREAM_VERSION, descriptor_length))
        for b in bundles:
            rec = _encode_frame(b, nb)
            f.write(struct.pack("<I", len(rec)))
            f.write(rec)


def iter_frames(path) -> Iterator[FrameBundle]:
    data = Path(path).read_bytes()
    if data[:4] != STREAM_MAGIC:
        raise DatasetError(f"{path}: not a frame stream")
    version, bits = struct.unpack_from("<II", data, 4)
    if version != STREAM_VERSION:
        raise DatasetError(f"{path}: stream version {version}, reader supports {STREAM_VERSION}")
    nb = nbytes_for(bits)
    off = 12
    while off < len(data):
        if off + 4 > len(data):
            raise DatasetError("frame length prefix truncated")
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + n > len(data):
            raise DatasetError("frame record truncated")
        yield _decode_frame(data[off:off + n], nb)
        off += n


@dataclass
class Session:
    rig: list[CameraModel]
    frames: list[FrameBundle]
    descriptor_length: int
    label: str = ""
    meta: dict = field(default_factory=dict)


def save_session(session: Session, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_rig(session.rig, d / "rig.json")
    meta = {"descriptor_length": session.descriptor_length, "label": session.label,
            "frames": len(session.frames), **session.meta}
    (d / "session.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    write_frames(d / "frames.bin", session.frames, session.descriptor_length)


def load_session(directory) -> Session:
    d = Path(directory)
    if not (d / "frames.bin").exists():
        raise DatasetError(f"{d}: no frames.bin")
    meta = json.loads((d / "session.json").read_text())
    rig = load_rig(d / "rig.json")
    frames = list(iter_frames(d / "frames.bin"))
    check_stream(frames)
    bits = int(meta.pop("descriptor_length"))
    label = meta.pop("label", "")
    meta.pop("frames", None)
    return Session(rig, frames, bits, label, meta)

"""Multi-session landmark map with spatial retrieval and a binary file format."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .features import check_length, hamming, median_descriptor, nbytes_for
from .geometry import Pose

MAGIC = b"MTRK"
FORMAT_VERSION = 1
GRID_CELL = 10.0
DEFAULT_RETRIEVAL_RADIUS = 30.0
DEFAULT_MAX_VERTEX_SPACING = 5.0

_HEADER = struct.Struct("<4sIIIIII")
_CRC = struct.Struct("<I")
_LABEL_BYTES = 32


class MapFileError(Exception):
    """Base class for map file problems."""


class MapFormatError(MapFileError):
    """Not a map file (bad magic bytes or malformed content)."""


class MapVersionError(MapFileError):
    def __init__(self, file_version: int, reader_version: int):
        super().__init__(
            f"map file format version {file_version} cannot be read by reader version {reader_version}")
        self.file_version = file_version
        self.reader_version = reader_version


class MapTruncatedError(MapFileError):
    pass


class MapChecksumError(MapFileError):
    pass


class MapInvariantError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Observation:
    session_id: int
    vertex_id: int
    camera_index: int
    keypoint: np.ndarray
    descriptor: np.ndarray

    def __eq__(self, other):
        return (self.session_id, self.vertex_id, self.camera_index) == (
            other.session_id, other.vertex_id, other.camera_index) and np.array_equal(
            self.keypoint, other.keypoint) and np.array_equal(self.descriptor, other.descriptor)


@dataclass(eq=False)
class Landmark:
    id: int
    position: np.ndarray
    median_descriptor: np.ndarray
    observations: list[Observation] = field(default_factory=list)

    def refresh_median(self) -> None:
        self.median_descriptor = median_descriptor([o.descriptor for o in self.observations])

    def __eq__(self, other):
        return (self.id == other.id and np.array_equal(self.position, other.position)
                and np.array_equal(self.median_descriptor, other.median_descriptor)
                and self.observations == other.observations)


@dataclass(frozen=True, eq=False)
class MapVertex:
    id: int
    session_id: int
    pose: Pose
    timestamp: float

    def __eq__(self, other):
        return (self.id, self.session_id, self.timestamp) == (
            other.id, other.session_id, other.timestamp) and self.pose == other.pose


@dataclass(frozen=True)
class SessionInfo:
    id: int
    label: str
    appearance: str = ""


class LandmarkMap:
    """Landmarks, vertices and sessions, all expressed in the map frame."""

    def __init__(self, descriptor_length: int = 512):
        self.descriptor_length = check_length(int(descriptor_length))
        self.landmarks: dict[int, Landmark] = {}
        self.vertices: dict[int, MapVertex] = {}
        self.sessions: dict[int, SessionInfo] = {}
        self._cache = None

    # -- mutation -----------------------------------------------------------

    def _touch(self):
        self._cache = None

    def new_session(self, label: str, appearance: str = "") -> int:
        sid = max(self.sessions, default=-1) + 1
        self.sessions[sid] = SessionInfo(sid, label, appearance)
        self._touch()
        return sid

    def add_vertex(self, session_id: int, pose: Pose, timestamp: float) -> int:
        if session_id not in self.sessions:
            raise KeyError(f"unknown session {session_id}")
        vid = max(self.vertices, default=-1) + 1
        self.vertices[vid] = MapVertex(vid, session_id, pose, float(timestamp))
        self._touch()
        return vid

    def add_landmark(self, position, observations: Iterable[Observation]) -> int:
        obs = list(observations)
        if len(obs) < 2:
            raise MapInvariantError("a landmark needs at least two observations")
        for o in obs:
            self._check_observation(o)
        lid = max(self.landmarks, default=-1) + 1
        lm = Landmark(lid, np.array(position, dtype=float).reshape(3), None, obs)
        lm.refresh_median()
        self.landmarks[lid] = lm
        self._touch()
        return lid

    def add_observation(self, landmark_id: int, obs: Observation, refresh: bool = True) -> None:
        self._check_observation(obs)
        lm = self.landmarks[landmark_id]
        lm.observations.append(obs)
        if refresh:
            lm.refresh_median()
        self._touch()

    def refresh_medians(self, ids: Iterable[int] | None = None) -> None:
        for lid in (self.landmarks if ids is None else ids):
            self.landmarks[lid].refresh_median()
        self._touch()

    def _check_observation(self, o: Observation) -> None:
        if o.vertex_id not in self.vertices:
            raise MapInvariantError(f"observation references unknown vertex {o.vertex_id}")
        if self.vertices[o.vertex_id].session_id != o.session_id:
            raise MapInvariantError("observation session does not match its vertex")
        if o.descriptor.shape[-1] != nbytes_for(self.descriptor_length):
            raise MapInvariantError("observation descriptor has the wrong length")

    # -- derived arrays -----------------------------------------------------

    @property
    def arrays(self):
        """Column view of landmarks (ascending id) plus the retrieval index."""
        if self._cache is None:
            self._cache = _MapArrays(self)
        return self._cache

    def __len__(self) -> int:
        return len(self.landmarks)

    def vertex_positions(self) -> tuple[np.ndarray, np.ndarray]:
        a = self.arrays
        return a.vertex_ids, a.vertex_positions

    def nearby_landmark_rows(self, position, radius: float) -> np.ndarray:
        return self.arrays.nearby_rows(np.asarray(position, dtype=float), radius)

    def nearest_vertex(self, position) -> MapVertex:
        """Nearest vertex to a position; ties go to the lower id."""
        ids, pos = self.vertex_positions()
        if len(ids) == 0:
            raise ValueError("map has no vertices")
        d = np.linalg.norm(pos - np.asarray(position, dtype=float), axis=1)
        # ids are ascending so argmin picks the lowest id among ties
        return self.vertices[int(ids[np.argmin(d)])]

    def nearest_vertices(self, position, k: int) -> list[MapVertex]:
        ids, pos = self.vertex_positions()
        d = np.linalg.norm(pos - np.asarray(position, dtype=float), axis=1)
        order = np.lexsort((ids, d))[:k]
        return [self.vertices[int(ids[i])] for i in order]

    # -- checks -------------------------------------------------------------

    def validate(self, max_vertex_spacing: float = DEFAULT_MAX_VERTEX_SPACING) -> None:
        last: dict[int, MapVertex] = {}
        for vid in sorted(self.vertices):
            v = self.vertices[vid]
            if v.session_id not in self.sessions:
                raise MapInvariantError(f"vertex {vid} references unknown session")
            prev = last.get(v.session_id)
            if prev is not None:
                gap = np.linalg.norm(v.pose.translation - prev.pose.translation)
                if gap > max_vertex_spacing:
                    raise MapInvariantError(
                        f"vertices {prev.id} and {vid} are {gap:.2f} m apart (max {max_vertex_spacing})")
            last[v.session_id] = v
        nb = nbytes_for(self.descriptor_length)
        for lm in self.landmarks.values():
            if len(lm.observations) < 2:
                raise MapInvariantError(f"landmark {lm.id} has fewer than two observations")
            for o in lm.observations:
                self._check_observation(o)
            if lm.median_descriptor.shape != (nb,):
                raise MapInvariantError(f"landmark {lm.id} descriptor has the wrong length")
            expected = median_descriptor([o.descriptor for o in lm.observations])
            if hamming(expected, lm.median_descriptor) != 0:
                raise MapInvariantError(f"landmark {lm.id} median descriptor is stale")

    def __eq__(self, other) -> bool:
        if not isinstance(other, LandmarkMap):
            return NotImplemented
        return (self.descriptor_length == other.descriptor_length
                and self.sessions == other.sessions
                and list(self.vertices) == list(other.vertices)
                and all(self.vertices[k] == other.vertices[k] for k in self.vertices)
                and list(self.landmarks) == list(other.landmarks)
                and all(self.landmarks[k] == other.landmarks[k] for k in self.landmarks))

    def info(self) -> dict:
        ids, pos = self.vertex_positions()
        lpos = self.arrays.positions
        allpos = np.vstack([pos.reshape(-1, 3), lpos.reshape(-1, 3)])
        bbox = None
        if len(allpos):
            bbox = {"min": allpos.min(axis=0).tolist(), "max": allpos.max(axis=0).tolist()}
        return {
            "descriptor_length": self.descriptor_length,
            "landmarks": len(self.landmarks),
            "vertices": len(self.vertices),
            "observations": int(sum(len(l.observations) for l in self.landmarks.values())),
            "sessions": [
                {"id": s.id, "label": s.label, "appearance": s.appearance,
                 "vertices": int(sum(1 for v in self.vertices.values() if v.session_id == s.id))}
                for s in self.sessions.values()
            ],
            "bounding_box": bbox,
        }


class _MapArrays:
    def __init__(self, m: LandmarkMap):
        nb = nbytes_for(m.descriptor_length)
        lids = sorted(m.landmarks)
        self.ids = np.array(lids, dtype=np.int64)
        self.positions = np.array([m.landmarks[i].position for i in lids]).reshape(-1, 3)
        self.descriptors = np.array([m.landmarks[i].median_descriptor for i in lids],
                                    dtype=np.uint8).reshape(-1, nb)
        self.landmark_list = [m.landmarks[i] for i in lids]

        vids = sorted(m.vertices)
        self.vertex_ids = np.array(vids, dtype=np.int64)
        self.vertex_positions = np.array([m.vertices[i].pose.translation for i in vids]).reshape(-1, 3)
        vrow = {v: r for r, v in enumerate(vids)}

        obs_v, obs_l = [], []
        for row, lid in enumerate(lids):
            for o in m.landmarks[lid].observations:
                obs_v.append(vrow[o.vertex_id])
                obs_l.append(row)
        obs_v = np.array(obs_v, dtype=np.int64)
        obs_l = np.array(obs_l, dtype=np.int64)
        order = np.argsort(obs_v, kind="stable")
        self._obs_vertex = obs_v[order]
        self._obs_landmark = obs_l[order]
        self._vertex_start = np.searchsorted(self._obs_vertex, np.arange(len(vids) + 1))

        self._grid: dict[tuple, list[int]] = {}
        if len(vids):
            cells = np.floor(self.vertex_positions / GRID_CELL).astype(np.int64)
            for r, c in enumerate(map(tuple, cells)):
                self._grid.setdefault(c, []).append(r)

    def nearby_vertex_rows(self, p: np.ndarray, radius: float) -> np.ndarray:
        if radius <= 0:
            raise ValueError("radius must be positive")
        lo = np.floor((p - radius) / GRID_CELL).astype(np.int64)
        hi = np.floor((p + radius) / GRID_CELL).astype(np.int64)
        ncells = np.prod(hi - lo + 1)
        if ncells > len(self._grid):
            cand = [r for rows in self._grid.values() for r in rows]
        else:
            cand = []
            for cx in range(lo[0], hi[0] + 1):
                for cy in range(lo[1], hi[1] + 1):
                    for cz in range(lo[2], hi[2] + 1):
                        cand.extend(self._grid.get((cx, cy, cz), ()))
        if not cand:
            return np.zeros(0, dtype=np.int64)
        cand = np.array(cand, dtype=np.int64)
        d = np.linalg.norm(self.vertex_positions[cand] - p, axis=1)
        return np.sort(cand[d <= radius])

    def nearby_rows(self, p: np.ndarray, radius: float) -> np.ndarray:
        vrows = self.nearby_vertex_rows(p, radius)
        if len(vrows) == 0:
            return np.zeros(0, dtype=np.int64)
        chunks = [self._obs_landmark[self._vertex_start[v]:self._vertex_start[v + 1]] for v in vrows]
        return np.unique(np.concatenate(chunks))


def retrieve_nearby_landmarks(m: LandmarkMap, T_MB: Pose,
                              radius: float = DEFAULT_RETRIEVAL_RADIUS) -> list[Landmark]:
    """Landmarks observed from a vertex within ``radius`` of the pose, by ascending id."""
    rows = m.nearby_landmark_rows(T_MB.translation, radius)
    lst = m.arrays.landmark_list
    return [lst[r] for r in rows]


# --------------------------------------------------------------------------
# serialisation
# --------------------------------------------------------------------------

def _dtypes(nb: int):
    session = np.dtype([("id", "<u4"), ("label", f"S{_LABEL_BYTES}"), ("appearance", f"S{_LABEL_BYTES}")])
    vertex = np.dtype([("id", "<u4"), ("session", "<u4"), ("timestamp", "<f8"), ("pose", "<f8", (7,))])
    landmark = np.dtype([("id", "<u4"), ("position", "<f8", (3,)), ("descriptor", "u1", (nb,)),
                         ("n_obs", "<u4")])
    obs = np.dtype([("landmark", "<u4"), ("session", "<u4"), ("vertex", "<u4"), ("camera", "<u4"),
                    ("keypoint", "<f8", (2,)), ("descriptor", "u1", (nb,))])
    return session, vertex, landmark, obs


def _encode_label(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > _LABEL_BYTES:
        raise ValueError(f"session label longer than {_LABEL_BYTES} bytes: {s!r}")
    return b


def to_bytes(m: LandmarkMap) -> bytes:
    nb = nbytes_for(m.descriptor_length)
    sdt, vdt, ldt, odt = _dtypes(nb)

    sess = np.zeros(len(m.sessions), dtype=sdt)
    for i, sid in enumerate(sorted(m.sessions)):
        s = m.sessions[sid]
        sess[i] = (s.id, _encode_label(s.label), _encode_label(s.appearance))

    verts = np.zeros(len(m.vertices), dtype=vdt)
    for i, vid in enumerate(sorted(m.vertices)):
        v = m.vertices[vid]
        verts[i] = (v.id, v.session_id, v.timestamp, v.pose.as_array())

    lids = sorted(m.landmarks)
    lms = np.zeros(len(lids), dtype=ldt)
    n_obs = sum(len(m.landmarks[i].observations) for i in lids)
    obs = np.zeros(n_obs, dtype=odt)
    k = 0
    for i, lid in enumerate(lids):
        lm = m.landmarks[lid]
        lms[i] = (lm.id, lm.position, lm.median_descriptor, len(lm.observations))
        for o in lm.observations:
            obs[k] = (lm.id, o.session_id, o.vertex_id, o.camera_index, o.keypoint, o.descriptor)
            k += 1

    body = b"".join([
        _HEADER.pack(MAGIC, FORMAT_VERSION, m.descriptor_length, len(sess), len(verts), len(lms), n_obs),
        sess.tobytes(), verts.tobytes(), lms.tobytes(), obs.tobytes(),
    ])
    return body + _CRC.pack(zlib.crc32(body))


def from_bytes(data: bytes) -> LandmarkMap:
    if len(data) < 4 or data[:4] != MAGIC:
        raise MapFormatError("not a map file: bad magic bytes")
    if len(data) < _HEADER.size:
        raise MapTruncatedError("map file truncated inside the header")
    magic, version, bits, ns, nv, nl, no = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise MapVersionError(version, FORMAT_VERSION)
    try:
        check_length(bits)
    except ValueError as e:
        raise MapFormatError(str(e)) from None
    nb = nbytes_for(bits)
    sdt, vdt, ldt, odt = _dtypes(nb)
    sizes = [ns * sdt.itemsize, nv * vdt.itemsize, nl * ldt.itemsize, no * odt.itemsize]
    expected = _HEADER.size + sum(sizes) + _CRC.size
    if len(data) < expected:
        raise MapTruncatedError(f"map file truncated: {len(data)} of {expected} bytes")
    if len(data) > expected:
        raise MapFormatError(f"trailing bytes after map payload ({len(data) - expected})")
    (crc,) = _CRC.unpack_from(data, expected - _CRC.size)
    if zlib.crc32(data[:expected - _CRC.size]) != crc:
        raise MapChecksumError("map file checksum mismatch")

    off = _HEADER.size
    arrays = []
    for dt, n, size in zip((sdt, vdt, ldt, odt), (ns, nv, nl, no), sizes):
        arrays.append(np.frombuffer(data, dtype=dt, count=n, offset=off))
        off += size
    sess, verts, lms, obs = arrays

    m = LandmarkMap(bits)
    for r in sess:
        sid = int(r["id"])
        m.sessions[sid] = SessionInfo(sid, r["label"].decode("utf-8"), r["appearance"].decode("utf-8"))
    for r in verts:
        vid = int(r["id"])
        m.vertices[vid] = MapVertex(vid, int(r["session"]), Pose.from_array(r["pose"]), float(r["timestamp"]))
    k = 0
    for r in lms:
        lid = int(r["id"])
        n = int(r["n_obs"])
        observations = []
        for o in obs[k:k + n]:
            if int(o["landmark"]) != lid:
                raise MapFormatError("observation records out of order")
            observations.append(Observation(int(o["session"]), int(o["vertex"]), int(o["camera"]),
                                            o["keypoint"].copy(), o["descriptor"].copy()))
        k += n
        m.landmarks[lid] = Landmark(lid, r["position"].copy(), r["descriptor"].copy(), observations)
    if k != no:
        raise MapFormatError("observation count does not match landmark records")
    return m


def save_map(m: LandmarkMap, path) -> None:
    Path(path).write_bytes(to_bytes(m))


def load_map(path) -> LandmarkMap:
    return from_bytes(Path(path).read_bytes())

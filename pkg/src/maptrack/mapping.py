"""Map building: frame-to-frame feature tracks, triangulation and multi-session extension."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .dataset import Session
from .features import hamming, median_descriptor
from .geometry import CameraModel, Pose, box_minus, box_plus, triangulate_arrays
from .landmark_map import LandmarkMap, Observation
from .estimator import FilterState
from .localization import (LocalizerConfig, RunLog, bootstrap_candidates, bootstrap_from_prior, reverse_frames,
                           run_sequence)
from .metrics import recall

log = logging.getLogger(__name__)


class MappingError(ValueError):
    pass


class BootstrapFailure(MappingError):
    """No frame of the session could be localized against the map."""

    def __init__(self, message: str, diagnostics: dict):
        detail = ", ".join(f"{k} {v}" for k, v in diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class MappingConfig:
    delta: int = 100
    search_radius_px: float = 40.0
    min_parallax_deg: float = 1.0
    max_reprojection_px: float = 3.0
    min_observations: int = 2
    dedup_radius_m: float = 0.2
    dedup_bits: int = 30
    max_pose_sigma_m: float = 2.0   # add_session: skip frames whose pose is this uncertain
    backward_pass: bool = True      # add_session: localize frames before the first bootstrap that smoothing left out
    smoothing: bool = True          # add_session: fuse the forward run with an independent backward run

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureTrack:
    """Time-ordered observations of one feature in a single camera."""

    track_id: int
    camera_index: int
    frames: list = field(default_factory=list)      # vertex ids
    keypoints: list = field(default_factory=list)
    descriptors: list = field(default_factory=list)
    # camera-from-map (R, t) per observation, used for prediction and triangulation
    views: list = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.frames)

    def append(self, vertex_id: int, uv, descriptor, view) -> None:
        self.frames.append(vertex_id)
        self.keypoints.append(np.asarray(uv, dtype=float))
        self.descriptors.append(descriptor)
        self.views.append(view)


def _project(cam: CameraModel, pc: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.stack([cam.fx * pc[..., 0] / pc[..., 2] + cam.cx,
                         cam.fy * pc[..., 1] / pc[..., 2] + cam.cy], axis=-1)


def _polyline_dist(p: np.ndarray, lines: np.ndarray) -> np.ndarray:
    """Distances (n, K) from points p (K,2) to polylines (n,S,2); NaN vertices are skipped."""
    a, b = lines[:, :-1], lines[:, 1:]
    seg_ok = ~(np.isnan(a[..., 0]) | np.isnan(b[..., 0]))
    a = np.where(seg_ok[..., None], a, 0.0)
    b = np.where(seg_ok[..., None], b, 0.0)
    ab = b - a                                            # (n,S-1,2)
    den = np.maximum((ab ** 2).sum(-1), 1e-12)
    ap = p[None, None] - a[:, :, None]                    # (n,S-1,K,2)
    s = np.clip((ap * ab[:, :, None]).sum(-1) / den[..., None], 0.0, 1.0)
    d = np.linalg.norm(ap - s[..., None] * ab[:, :, None], axis=-1)
    d = np.where(seg_ok[..., None], d, np.inf)
    return d.min(axis=1)


_RAY_DEPTHS = np.geomspace(0.5, 200.0, 16)


class FeatureTracker:
    """Associates keypoints of consecutive frames into per-camera tracks.

    A track's next position is predicted from a two-view triangulation of its
    first and latest observation when that reproduces the latest keypoint,
    from constant image velocity otherwise, and from the projected viewing ray
    for tracks seen only once. Matches are admitted within
    ``search_radius_px`` of the prediction and ``delta`` bits of the track's
    latest descriptor, then assigned greedily by ascending distance.
    """

    def __init__(self, rig: Sequence[CameraModel], cfg: MappingConfig = MappingConfig()):
        self.rig = list(rig)
        self.cfg = cfg
        self._T_CB = [c.T_BC.inverse() for c in self.rig]
        self.active: list[list[FeatureTrack]] = [[] for _ in self.rig]
        self.finished: list[FeatureTrack] = []
        self._next_id = 0

    def flush(self) -> None:
        for c in range(len(self.rig)):
            self.finished.extend(self.active[c])
            self.active[c] = []

    def finish(self) -> list[FeatureTrack]:
        self.flush()
        out = sorted(self.finished, key=lambda t: t.track_id)
        self.finished = []
        return out

    def _gate(self, cam: CameraModel, tracks: list[FeatureTrack], view, pos: np.ndarray) -> np.ndarray:
        """Pixel distance (tracks, keypoints) from each track's prediction."""
        Rc, tc = view
        n = len(tracks)
        gate = np.full((n, len(pos)), np.inf)
        lengths = np.array([len(t) for t in tracks])
        multi = np.flatnonzero(lengths >= 2)
        single = np.flatnonzero(lengths == 1)
        if len(multi):
            R = np.stack([[tracks[i].views[0][0], tracks[i].views[-1][0]] for i in multi])
            t = np.stack([[tracks[i].views[0][1], tracks[i].views[-1][1]] for i in multi])
            uv = np.stack([[tracks[i].keypoints[0], tracks[i].keypoints[-1]] for i in multi])
            prev = np.stack([tracks[i].keypoints[-2] for i in multi])
            X = _dlt_two_view(R, t, uv, cam)
            p_last = np.einsum("nij,nj->ni", R[:, 1], X) + t[:, 1]
            p_cur = X @ Rc.T + tc
            u_last = _project(cam, p_last)
            u_cur = _project(cam, p_cur)
            good = (np.isfinite(X).all(axis=1) & (p_last[:, 2] > 0.1) & (p_cur[:, 2] > 0.1)
                    & (np.linalg.norm(u_last - uv[:, 1], axis=1) < 2.0))
            pred = np.where(good[:, None], u_cur, 2 * uv[:, 1] - prev)
            gate[multi] = np.linalg.norm(pred[:, None, :] - pos[None], axis=-1)
        if len(single):
            R1 = np.stack([tracks[i].views[-1][0] for i in single])
            t1 = np.stack([tracks[i].views[-1][1] for i in single])
            uv = np.stack([tracks[i].keypoints[-1] for i in single])
            ray = np.column_stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy, np.ones(len(uv))])
            pc = _RAY_DEPTHS[None, :, None] * ray[:, None, :]                 # (n,S,3) old camera
            pm = np.einsum("nji,nsj->nsi", R1, pc - t1[:, None, :])          # map frame
            pn = pm @ Rc.T + tc
            lines = _project(cam, pn)
            lines[pn[..., 2] <= 0.1] = np.nan
            gate[single] = _polyline_dist(pos, lines)
        return gate

    def step(self, vertex_id: int, T_MB: Pose, keypoints: Sequence, masks: Optional[Sequence] = None) -> None:
        """Extend tracks with one frame. ``masks[c]`` selects usable keypoints of camera c."""
        cfg = self.cfg
        T_BM = T_MB.inverse()
        for c, cam in enumerate(self.rig):
            kps = keypoints[c]
            T_CM = self._T_CB[c] @ T_BM
            view = (T_CM.R, T_CM.translation)
            usable = np.ones(len(kps), dtype=bool) if masks is None else np.asarray(masks[c], dtype=bool)
            kidx = np.flatnonzero(usable)
            tracks = self.active[c]
            pos = kps.positions[kidx]
            desc = kps.descriptors[kidx]
            pairs = []
            if tracks and len(kidx):
                gate = self._gate(cam, tracks, view, pos)
                ti, kj = np.nonzero(gate < cfg.search_radius_px)
                if len(ti):
                    last = np.stack([tracks[i].descriptors[-1] for i in ti])
                    ham = hamming(last, desc[kj])
                    ok = ham <= cfg.delta
                    ti, kj, ham = ti[ok], kj[ok], ham[ok]
                    tid = np.array([tracks[i].track_id for i in ti], dtype=np.int64)
                    order = np.lexsort((kj, tid, ham))
                    used_t, used_k = set(), set()
                    for o in order:
                        a, b = int(ti[o]), int(kj[o])
                        if a in used_t or b in used_k:
                            continue
                        used_t.add(a)
                        used_k.add(b)
                        pairs.append((a, b))
            matched_t = {a for a, _ in pairs}
            matched_k = {b for _, b in pairs}
            for a, b in pairs:
                tracks[a].append(vertex_id, pos[b], desc[b], view)
            self.finished.extend(t for i, t in enumerate(tracks) if i not in matched_t)
            new_active = [t for i, t in enumerate(tracks) if i in matched_t]
            for b in range(len(kidx)):
                if b in matched_k:
                    continue
                t = FeatureTrack(self._next_id, c)
                self._next_id += 1
                t.append(vertex_id, pos[b], desc[b], view)
                new_active.append(t)
            self.active[c] = new_active


def _dlt_two_view(R: np.ndarray, t: np.ndarray, uv: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Batched two-view linear triangulation; rows (n,2,3,3), (n,2,3), (n,2,2) -> (n,3)."""
    x = (uv[..., 0] - cam.cx) / cam.fx
    y = (uv[..., 1] - cam.cy) / cam.fy
    P = np.concatenate([R, t[..., None]], axis=-1)             # (n,2,3,4)
    A = np.concatenate([x[..., None] * P[:, :, 2] - P[:, :, 0],
                        y[..., None] * P[:, :, 2] - P[:, :, 1]], axis=1)  # (n,4,4)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        X = Xh[:, :3] / Xh[:, 3:4]
    X[np.abs(Xh[:, 3]) < 1e-12] = np.nan
    return X


def triangulate_track(track: FeatureTrack, cam: CameraModel, cfg: MappingConfig = MappingConfig()):
    """Landmark position for a track, or None if it fails conditioning or reprojection checks."""
    if len(track) < max(2, cfg.min_observations):
        return None
    n = len(track)
    R = np.stack([v[0] for v in track.views])
    t = np.stack([v[1] for v in track.views])
    K = np.tile([cam.fx, cam.fy, cam.cx, cam.cy], (n, 1))
    uv = np.array(track.keypoints)
    X = triangulate_arrays(R, t, K, uv, cfg.min_parallax_deg)
    if X is None:
        return None
    proj = _project(cam, np.einsum("nij,j->ni", R, X) + t)
    if np.max(np.linalg.norm(proj - uv, axis=1)) > cfg.max_reprojection_px:
        return None
    return X


def _track_observations(track: FeatureTrack, session_id: int) -> list[Observation]:
    return [Observation(session_id, int(v), track.camera_index, np.asarray(k, dtype=float), d)
            for v, k, d in zip(track.frames, track.keypoints, track.descriptors)]


@dataclass
class _Candidate:
    position: np.ndarray
    observations: list
    median: np.ndarray


def _triangulated_candidates(tracks, rig, session_id, cfg) -> list[_Candidate]:
    out = []
    for tr in tracks:
        X = triangulate_track(tr, rig[tr.camera_index], cfg)
        if X is None:
            continue
        out.append(_Candidate(X, _track_observations(tr, session_id), median_descriptor(tr.descriptors)))
    return out


def _merge_duplicates(cands: list[_Candidate], cfg: MappingConfig) -> list[_Candidate]:
    """Union candidates closer than the dedup radius with similar descriptors."""
    if len(cands) < 2:
        return cands
    P = np.array([c.position for c in cands])
    pairs = cKDTree(P).query_pairs(cfg.dedup_radius_m, output_type="ndarray")
    parent = list(range(len(cands)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    if len(pairs):
        D = np.stack([c.median for c in cands])
        ham = hamming(D[pairs[:, 0]], D[pairs[:, 1]])
        for (a, b), h in zip(pairs, ham):
            if h <= cfg.dedup_bits:
                ra, rb = find(int(a)), find(int(b))
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for i in range(len(cands)):
        groups.setdefault(find(i), []).append(i)
    out = []
    for root in sorted(groups):
        members = groups[root]
        # keep the best-supported position; pool every observation
        best = max(members, key=lambda i: (len(cands[i].observations), -i))
        obs = [o for i in members for o in cands[i].observations]
        out.append(_Candidate(cands[best].position, obs, median_descriptor([o.descriptor for o in obs])))
    return out


def build_base_map(session: Session, poses: Optional[Sequence[Pose]] = None,
                   cfg: MappingConfig = MappingConfig(), label: Optional[str] = None) -> LandmarkMap:
    """First-session map from known body poses (the frames' truth poses by default)."""
    frames = session.frames
    if len(frames) < 2:
        raise MappingError("a base map needs at least two frames")
    if poses is None:
        if any(f.truth is None for f in frames):
            raise MappingError("frames carry no poses; supply a trajectory")
        poses = [f.truth for f in frames]
    if len(poses) != len(frames):
        raise MappingError("trajectory length does not match the frame count")
    m = LandmarkMap(session.descriptor_length)
    sid = m.new_session(label if label is not None else session.label, session.label)
    tracker = FeatureTracker(session.rig, cfg)
    for f, T in zip(frames, poses):
        vid = m.add_vertex(sid, T, f.timestamp)
        tracker.step(vid, T, f.keypoints)
    cands = _merge_duplicates(_triangulated_candidates(tracker.finish(), session.rig, sid, cfg), cfg)
    for c in cands:
        m.add_landmark(c.position, c.observations)
    log.info("base map: %d landmarks, %d vertices", len(m.landmarks), len(m.vertices))
    return m


@dataclass
class SessionReport:
    session_id: int
    recall: float
    landmarks_added: int
    observations_appended: int
    inlier_counts: list
    frames: int
    run_log: RunLog = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"session_id": self.session_id, "recall": self.recall, "landmarks_added": self.landmarks_added,
                "observations_appended": self.observations_appended, "frames": self.frames,
                "inlier_counts": list(map(int, self.inlier_counts))}


def _smooth(m: LandmarkMap, rig, frames, run: RunLog, loc_cfg: LocalizerConfig) -> None:
    """Two-filter smoothing of ``run`` in place.

    A second filter bootstraps on its own and runs backwards in time; where both
    are initialized their estimates are fused by information. Stretches tracked
    on odometry alone between two good fixes are then held from both ends. The
    frame's own constraints enter both filters, a small overcount we accept.
    """
    back = run_sequence(m, rig, reverse_frames(frames), loc_cfg, keep_constraints=True)
    n = len(frames)
    for k, b in enumerate(back.records):
        if not b.initialized:
            continue
        i = n - 1 - k
        f = run.records[i]
        b.index, b.timestamp = i, frames[i].timestamp
        if not f.initialized:
            run.records[i] = b
            continue
        info = f.information + b.information
        step = np.linalg.solve(info, b.information @ box_minus(b.pose, f.pose))
        keep = b if b.inliers > f.inliers else f
        run.records[i] = replace(keep, pose=box_plus(f.pose, step), information=info,
                                 cov_diag=np.diag(np.linalg.inv(info)), localized=f.localized or b.localized)


def add_session(m: LandmarkMap, session: Session, cfg: MappingConfig = MappingConfig(),
                loc_cfg: LocalizerConfig = LocalizerConfig(), label: Optional[str] = None):
    """Localize a session against the map and fold it in; the map is modified in place.

    Returns ``(map, report)``.
    """
    if len(m.landmarks) == 0:
        raise MappingError("cannot extend an empty map")
    if session.descriptor_length != m.descriptor_length:
        raise MappingError(f"session uses {session.descriptor_length}-bit descriptors, "
                           f"map uses {m.descriptor_length}")
    frames = session.frames
    rig = session.rig
    run = run_sequence(m, rig, frames, loc_cfg, keep_constraints=True)
    if not any(r.initialized for r in run.records):
        # failure path only: redo the attempts to report how close the best one came
        best = 0
        for f in frames:
            if f.fix is not None:
                for cand in bootstrap_candidates(m, f.fix, loc_cfg):
                    best = max(best, len(bootstrap_from_prior(m, rig, f, cand, loc_cfg).inliers))
        diag = {"frames": len(frames), "fix_frames": sum(f.fix is not None for f in frames),
                "best_bootstrap_inliers": best}
        raise BootstrapFailure("session could not be bootstrapped against the map", diag)

    if cfg.smoothing:
        _smooth(m, rig, frames, run, loc_cfg)
    first = next(i for i, r in enumerate(run.records) if r.initialized)
    if first > 0 and cfg.backward_pass:
        # localize the frames before the first bootstrap by running the filter backwards from it
        r0 = run.records[first]
        start = FilterState(r0.pose, r0.information, -frames[first].timestamp)
        back = run_sequence(m, rig, reverse_frames(frames[:first + 1])[1:], loc_cfg, True, start)
        for k, rec in enumerate(back.records):
            i = first - 1 - k
            rec.index, rec.timestamp = i, frames[i].timestamp
            run.records[i] = rec

    sid = m.new_session(label if label is not None else session.label, session.label)
    tracker = FeatureTracker(rig, cfg)
    existing = m.arrays
    touched: set[int] = set()
    n_obs = 0
    for f, r in zip(frames, run.records):
        if not r.initialized:
            tracker.flush()
            continue
        vid = m.add_vertex(sid, r.pose, f.timestamp)
        masks = [np.ones(len(k), dtype=bool) for k in f.keypoints]
        for c in r.inlier_constraints:
            if c.keypoint_index >= 0:
                masks[c.camera_index][c.keypoint_index] = False
        if r.localized:
            for c in r.inlier_constraints:
                d = f.keypoints[c.camera_index].descriptors[c.keypoint_index]
                m.add_observation(c.landmark_id, Observation(sid, vid, c.camera_index, c.keypoint, d),
                                  refresh=False)
                touched.add(c.landmark_id)
                n_obs += 1
        sigma = np.sqrt(np.max(r.cov_diag[3:])) if r.cov_diag is not None else 0.0
        if sigma > cfg.max_pose_sigma_m:
            tracker.flush()
            continue
        tracker.step(vid, r.pose, f.keypoints, masks)
    m.refresh_medians(sorted(touched))

    cands = _merge_duplicates(_triangulated_candidates(tracker.finish(), rig, sid, cfg), cfg)
    tree = cKDTree(existing.positions) if len(existing.ids) else None
    added = 0
    for c in cands:
        if tree is not None:
            near = tree.query_ball_point(c.position, cfg.dedup_radius_m)
            if near and np.min(hamming(existing.descriptors[near], c.median)) <= cfg.dedup_bits:
                continue
        m.add_landmark(c.position, c.observations)
        added += 1

    truth = [f.truth for f in frames]
    if all(t is not None for t in truth):
        pos = np.array([t.translation for t in truth])
    else:
        pos = np.array([r.pose.translation if r.pose is not None else np.zeros(3) for r in run.records])
    rec = recall(pos, run.localized) if len(pos) >= 2 else 0.0
    report = SessionReport(sid, rec, added, n_obs, run.inlier_counts.tolist(), len(frames), run)
    log.info("session %d: recall %.1f%%, %d new landmarks, %d observations", sid, rec, added, n_obs)
    return m, report

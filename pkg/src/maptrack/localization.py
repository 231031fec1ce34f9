"""Localization runs: bootstrap, per-frame map-tracking updates, and a global baseline."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import geometry as geo
from .dataset import FrameBundle
from .estimator import (FilterState, OdometryMeasurement, RobustLossConfig, SolverConfig, prior_information, propagate,
                        solve_single_pose, update)
from .features import hamming_matrix
from .geometry import CameraModel, Pose
from .landmark_map import LandmarkMap
from .tracking import LocalizationConstraint, TrackingConfig, match_frame

log = logging.getLogger(__name__)


class NoFixError(ValueError):
    """Bootstrap was asked to run on a frame without a position fix."""


@dataclass(frozen=True)
class LocalizerConfig:
    tracking: TrackingConfig = TrackingConfig()
    loss: RobustLossConfig = RobustLossConfig()
    solver: SolverConfig = SolverConfig()
    bootstrap_k: int = 3
    bootstrap_yaw_bin_deg: float = 15.0
    bootstrap_rounds: int = 5
    bootstrap_pos_sigma: float = 3.0
    bootstrap_rot_sigma_deg: float = 10.0
    lost_after: int = 50
    # global-localization baseline
    gl_ratio: float = 0.8
    gl_max_iterations: int = 500
    gl_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LocalizerConfig":
        d = dict(d)
        sub = {"tracking": TrackingConfig, "loss": RobustLossConfig, "solver": SolverConfig}
        for k, t in sub.items():
            if k in d:
                d[k] = t(**d[k])
        return cls(**d)


@dataclass
class BootstrapResult:
    state: FilterState
    inliers: list
    localized: bool
    rounds: int
    candidate: int = 0


def bootstrap_from_prior(m: LandmarkMap, rig: Sequence[CameraModel], bundle: FrameBundle, prior: Pose,
                         cfg: LocalizerConfig = LocalizerConfig(),
                         prior_info: Optional[np.ndarray] = None) -> BootstrapResult:
    """Repeated match-and-solve on one frame starting from a coarse prior."""
    if prior_info is None:
        prior_info = prior_information(cfg.bootstrap_pos_sigma, cfg.bootstrap_rot_sigma_deg)
    pose = prior
    res = None
    rounds = 0
    for rounds in range(1, cfg.bootstrap_rounds + 1):
        cons = match_frame(m, rig, bundle.keypoints, pose, cfg.tracking)
        res = solve_single_pose(prior, prior_info, cons, rig, cfg.tracking, cfg.loss, cfg.solver,
                                initial=pose, timestamp=bundle.timestamp)
        if res.diverged:
            break
        step = geo.box_minus(res.state.pose, pose)
        pose = res.state.pose
        if res.localized and np.linalg.norm(step[3:]) < 1e-3 and np.linalg.norm(step[:3]) < 1e-4:
            break
    if res is None:
        return BootstrapResult(FilterState(prior, prior_info, bundle.timestamp), [], False, 0)
    return BootstrapResult(res.state, res.inliers, bool(res.localized and not res.diverged), rounds)


def bootstrap_candidates(m: LandmarkMap, fix: np.ndarray, cfg: LocalizerConfig = LocalizerConfig()) -> list[Pose]:
    """Priors from the fix position and orientations of nearby map vertices.

    Ordered by ascending vertex distance; one candidate per yaw bin.
    """
    fix = np.asarray(fix, dtype=float)
    if len(m.vertices) == 0:
        return []
    xy = fix[:2]
    ids, pos = m.vertex_positions()
    d = np.linalg.norm(pos[:, :2] - xy, axis=1)
    order = np.lexsort((ids, d))
    out, bins = [], set()
    for i in order:
        if d[i] > cfg.tracking.retrieval_radius_m or len(out) >= cfg.bootstrap_k:
            break
        v = m.vertices[int(ids[i])]
        b = int(np.floor(np.degrees(v.pose.yaw()) / cfg.bootstrap_yaw_bin_deg))
        if b in bins:
            continue
        bins.add(b)
        # the fix is horizontal only; height comes from the vertex
        out.append(Pose(v.pose.rotation, [xy[0], xy[1], v.pose.translation[2]]))
    return out


def bootstrap(m: LandmarkMap, rig: Sequence[CameraModel], bundle: FrameBundle,
              cfg: LocalizerConfig = LocalizerConfig()) -> Optional[BootstrapResult]:
    """Initialise from the frame's coarse position fix; None if no candidate localizes."""
    if bundle.fix is None:
        raise NoFixError("frame carries no position fix")
    sigma = cfg.bootstrap_pos_sigma
    info = prior_information(sigma, cfg.bootstrap_rot_sigma_deg)
    for k, cand in enumerate(bootstrap_candidates(m, bundle.fix, cfg)):
        res = bootstrap_from_prior(m, rig, bundle, cand, cfg, info)
        if res.localized:
            res.candidate = k
            return res
    return None


# --------------------------------------------------------------------------
# sequence runs
# --------------------------------------------------------------------------

@dataclass
class FrameRecord:
    index: int
    timestamp: float
    m: int
    inliers: int
    localized: bool
    lost: bool
    initialized: bool
    bootstrapped: bool = False
    iterations: int = 0
    cost: float = 0.0
    pose: Optional[Pose] = None
    cov_diag: Optional[np.ndarray] = None
    diverged: bool = False
    inlier_constraints: list = field(default_factory=list, repr=False)
    information: Optional[np.ndarray] = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "index": self.index, "timestamp": self.timestamp, "m": self.m, "inliers": self.inliers,
            "localized": self.localized, "lost": self.lost, "initialized": self.initialized,
            "bootstrapped": self.bootstrapped, "iterations": self.iterations,
            "cost": None if not np.isfinite(self.cost) else float(self.cost),
            "pose": None if self.pose is None else self.pose.as_array().tolist(),
            "cov_diag": None if self.cov_diag is None else np.asarray(self.cov_diag).tolist(),
            "diverged": self.diverged,
        }


@dataclass
class RunLog:
    records: list[FrameRecord]
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def localized(self) -> np.ndarray:
        return np.array([r.localized for r in self.records], dtype=bool)

    @property
    def inlier_counts(self) -> np.ndarray:
        return np.array([r.inliers for r in self.records], dtype=np.int64)

    def poses(self) -> list[Optional[Pose]]:
        return [r.pose for r in self.records]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"config": self.config}, sort_keys=True)]
        lines += [json.dumps(r.to_json(), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "RunLog":
        lines = [json.loads(l) for l in text.splitlines() if l.strip()]
        cfg = lines[0].get("config", {}) if lines and "config" in lines[0] else {}
        recs = []
        for d in lines[1 if cfg or (lines and "config" in lines[0]) else 0:]:
            recs.append(FrameRecord(
                d["index"], d["timestamp"], d["m"], d["inliers"], d["localized"], d["lost"],
                d["initialized"], d.get("bootstrapped", False), d.get("iterations", 0),
                float("nan") if d.get("cost") is None else d["cost"],
                None if d.get("pose") is None else Pose.from_array(d["pose"]),
                None if d.get("cov_diag") is None else np.array(d["cov_diag"]),
                d.get("diverged", False)))
        return cls(recs, cfg)


def reverse_frames(frames: Sequence[FrameBundle]) -> list[FrameBundle]:
    """The same frames backwards in time, with inverted odometry and negated timestamps."""
    out = []
    n = len(frames)
    for j in range(n):
        i = n - 1 - j
        if i + 1 < n:
            o = frames[i + 1].odometry
            inv = o.delta.inverse()
            Ad = geo.adjoint(o.delta)
            odo = OdometryMeasurement(inv, Ad @ o.covariance @ Ad.T)
        else:
            odo = OdometryMeasurement(Pose.identity(), frames[i].odometry.covariance)
        f = frames[i]
        out.append(FrameBundle(-f.timestamp, f.keypoints, odo, f.fix, f.fix_sigma, f.truth))
    return out


def run_sequence(m: LandmarkMap, rig: Sequence[CameraModel], frames: Iterable[FrameBundle],
                 cfg: LocalizerConfig = LocalizerConfig(), keep_constraints: bool = False,
                 initial: Optional[FilterState] = None) -> RunLog:
    """Track a stream of frames against the map.

    ``initial`` is the state at the timestep before the first frame; without
    it the run bootstraps from the first usable position fix.
    """
    records = []
    state: Optional[FilterState] = initial
    fails = 0
    last_ts = -np.inf
    for i, b in enumerate(frames):
        if not b.timestamp > last_ts:
            raise ValueError(f"frame {i}: timestamps must be strictly increasing")
        last_ts = b.timestamp
        lost = state is not None and fails >= cfg.lost_after
        if (state is None or lost) and b.fix is not None:
            boot = bootstrap(m, rig, b, cfg)
            if boot is not None:
                state = boot.state
                fails = 0
                records.append(FrameRecord(
                    i, b.timestamp, len(boot.inliers), len(boot.inliers), True, False, True, True,
                    boot.rounds, 0.0, state.pose, np.diag(state.covariance()),
                    inlier_constraints=boot.inliers if keep_constraints else [],
                    information=state.information if keep_constraints else None))
                continue
        if state is None:
            records.append(FrameRecord(i, b.timestamp, 0, 0, False, False, False))
            continue
        prior = propagate(state, b.odometry)
        cons = match_frame(m, rig, b.keypoints, prior, cfg.tracking)
        res = update(state, prior, cons, b.odometry, rig, cfg.tracking, cfg.loss, cfg.solver, b.timestamp)
        state = res.state
        fails = 0 if res.localized else fails + 1
        records.append(FrameRecord(
            i, b.timestamp, len(cons), len(res.inliers), res.localized, fails >= cfg.lost_after, True,
            False, res.iterations, res.cost, state.pose, np.diag(state.covariance()), res.diverged,
            res.inliers if keep_constraints else [], state.information if keep_constraints else None))
    return RunLog(records, {"localizer": cfg.to_dict()})


# --------------------------------------------------------------------------
# global localization baseline
# --------------------------------------------------------------------------

def _consensus_errors(rig, cams: np.ndarray, kps: np.ndarray, pts: np.ndarray, T_MB: Pose) -> np.ndarray:
    err = np.full(len(cams), np.inf)
    for c in np.unique(cams):
        sel = cams == c
        uv, ok = geo.project_points(rig[c], T_MB, pts[sel])
        e = np.linalg.norm(uv - kps[sel], axis=1)
        e[~ok] = np.inf
        err[sel] = e
    return err


def global_localize(m: LandmarkMap, rig: Sequence[CameraModel], bundle: FrameBundle,
                    cfg: LocalizerConfig = LocalizerConfig()) -> Optional[tuple[Pose, int]]:
    """Prior-free localization: ratio-tested descriptor matching plus three-point RANSAC.

    A simplified stand-in for a place-independent metric localizer, used only
    as a recall baseline.
    """
    a = m.arrays
    if len(a.ids) < 2:
        return None
    cams, kps, pts = [], [], []
    for ci, ks in enumerate(bundle.keypoints):
        if len(ks) == 0:
            continue
        D = hamming_matrix(ks.descriptors, a.descriptors)
        two = np.sort(np.partition(D, 1, axis=1)[:, :2], axis=1)
        best = np.argmin(D, axis=1)
        ok = two[:, 0] < cfg.gl_ratio * two[:, 1]
        cams.append(np.full(int(ok.sum()), ci))
        kps.append(ks.positions[ok])
        pts.append(a.positions[best[ok]])
    if not cams:
        return None
    cams = np.concatenate(cams)
    kps = np.concatenate(kps).reshape(-1, 2)
    pts = np.concatenate(pts).reshape(-1, 3)
    if len(cams) < 4:
        return None
    rng = np.random.default_rng([cfg.gl_seed, int(round(bundle.timestamp * 1000))])
    per_cam = {int(c): np.flatnonzero(cams == c) for c in np.unique(cams)}
    usable = [c for c, idx in per_cam.items() if len(idx) >= 3]
    if not usable:
        return None
    weights = np.array([len(per_cam[c]) for c in usable], dtype=float)
    weights /= weights.sum()
    rho = cfg.tracking.rho
    best_pose, best_count = None, 0
    n_iter = cfg.gl_max_iterations
    it = 0
    while it < n_iter:
        it += 1
        c = usable[rng.choice(len(usable), p=weights)]
        sample = rng.choice(per_cam[c], 3, replace=False)
        cam = rig[c]
        for T_CM in geo.p3p(geo.bearing(cam, kps[sample]), pts[sample]):
            T_MB = geo.compose(T_CM.inverse(), cam.T_BC.inverse())
            count = int(np.sum(_consensus_errors(rig, cams, kps, pts, T_MB) <= rho))
            if count > best_count:
                best_pose, best_count = T_MB, count
                # adaptive stop at 99% confidence of having drawn an all-inlier sample
                frac = count / len(cams)
                need = np.log(0.01) / np.log(max(1e-12, 1 - frac ** 3))
                n_iter = min(n_iter, int(np.ceil(need)))
    if best_pose is None or best_count < cfg.tracking.min_inliers:
        return None
    # refine on the consensus set without a prior
    inl = np.flatnonzero(_consensus_errors(rig, cams, kps, pts, best_pose) <= rho)
    cons = [LocalizationConstraint(-1, int(cams[i]), kps[i], pts[i], 0) for i in inl]
    res = solve_single_pose(best_pose, np.zeros((6, 6)), cons, rig, cfg.tracking, cfg.loss, cfg.solver)
    pose = res.state.pose if not res.diverged else best_pose
    count = int(np.sum(_consensus_errors(rig, cams, kps, pts, pose) <= rho))
    if count < cfg.tracking.min_inliers:
        return None
    return pose, count

"""Metrics and experiment runners: threshold sweeps, convergence basin, descriptor study,
map-tracking vs. global-localization recall.

Experiments work on a :class:`Scenario`, a seeded synthetic setup whose map
is built from one mapping drive and queried by further drives under other
appearance conditions.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import geometry as geo
from .dataset import FrameBundle, Session
from .landmark_map import LandmarkMap
from .localization import LocalizerConfig, RunLog, bootstrap_from_prior, global_localize, run_sequence
from .mapping import MappingConfig, add_session, build_base_map
from .metrics import ErrorQuantiles, accuracy, recall, relative_errors
from .simulation import (AppearanceModel, NoiseConfig, SyntheticWorld, WorldConfig, disturb,
                         generate_world, loop_trajectory, make_rig, perturb_trajectory, simulate_session)
from .tracking import TrackingConfig

log = logging.getLogger(__name__)

FALSE_POSITIVE_M = 1.0

DELTA_GRID = (10, 25, 50, 75, 100, 150, 200, 256, 384, 512)
RHO_GRID = (0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 20.0, 40.0, 80.0)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

@dataclass
class RunMetrics:
    r_mt: float
    r_gl: Optional[float] = None
    p_e_xyz: Optional[tuple] = None
    p_e_xy: Optional[tuple] = None
    p_e_y: Optional[tuple] = None
    theta_e_xyz: Optional[tuple] = None
    obs_avg: float = 0.0
    frames: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def median_error(self) -> float:
        return float("nan") if self.p_e_xyz is None else self.p_e_xyz[0]


def truth_positions(frames: Sequence[FrameBundle]) -> np.ndarray:
    if any(f.truth is None for f in frames):
        raise ValueError("frames carry no reference poses")
    return np.array([f.truth.translation for f in frames])


def run_metrics(m: LandmarkMap, frames: Sequence[FrameBundle], run: RunLog,
                gl_localized: Optional[Sequence[bool]] = None) -> RunMetrics:
    pos = truth_positions(frames)
    flags = run.localized
    acc: Optional[ErrorQuantiles] = accuracy(run.poses(), [f.truth for f in frames], m, flags)
    r_gl = None if gl_localized is None else recall(pos, gl_localized)
    obs = float(np.mean(run.inlier_counts)) if len(run) else 0.0
    if acc is None:
        return RunMetrics(recall(pos, flags), r_gl, obs_avg=obs, frames=len(frames))
    return RunMetrics(recall(pos, flags), r_gl, acc.xyz, acc.xy, acc.y, acc.rot_deg, obs, len(frames))


def false_positive_frames(run: RunLog, frames: Sequence[FrameBundle], min_inliers: int = 10,
                          cutoff: float = FALSE_POSITIVE_M) -> list[int]:
    """Indices of timesteps reporting at least ``min_inliers`` inliers with error above ``cutoff``."""
    out = []
    for r, f in zip(run.records, frames):
        if r.pose is None or f.truth is None or r.inliers < min_inliers:
            continue
        if np.linalg.norm(r.pose.translation - f.truth.translation) > cutoff:
            out.append(r.index)
    return out


# --------------------------------------------------------------------------
# scenarios
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """A seeded world, rig and mapping drive, plus defaults for query drives."""

    world: WorldConfig = WorldConfig(point_density=2.0, density_variation=0.9, density_cycles=2)
    rig: str = "updrive"
    spacing: float = 1.0
    laps: float = 1.0
    map_appearance: AppearanceModel = AppearanceModel("map-day", 0.02, 0.1)
    noise: NoiseConfig = NoiseConfig(descriptor_flip_rate=0.03)
    query_start: float = 0.5
    query_lateral: float = 0.5
    # error of the trajectory the base map is built from: (metres, degrees, correlation metres)
    map_pose_error: tuple = (0.05, 0.05, 30.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        if "world" in d:
            w = dict(d["world"])
            for k in ("lateral_range", "height_range"):
                if k in w:
                    w[k] = tuple(w[k])
            d["world"] = WorldConfig(**w)
        if "map_appearance" in d:
            d["map_appearance"] = AppearanceModel(**d["map_appearance"])
        if "map_pose_error" in d:
            d["map_pose_error"] = tuple(d["map_pose_error"])
        if "noise" in d:
            d["noise"] = NoiseConfig(**d["noise"])
        return cls(**d)


@dataclass
class Bench:
    scenario: Scenario
    world: SyntheticWorld
    rig: list
    map: LandmarkMap
    mapping_session: Session
    seed: int


def mapping_drive(world: SyntheticWorld, scn: Scenario, appearance: AppearanceModel, seed: int,
                  start: float = 0.0, lateral: float = 0.0, reverse: bool = False) -> Session:
    traj = loop_trajectory(world.config, scn.spacing, scn.laps, start=start, lateral=lateral, reverse=reverse)
    return simulate_session(world, make_rig(scn.rig), traj, appearance, scn.noise, seed)


def build_bench(scn: Scenario = Scenario(), seed: int = 0, mapping: MappingConfig = MappingConfig()) -> Bench:
    world = generate_world(scn.world, seed)
    s = mapping_drive(world, scn, scn.map_appearance, seed=seed * 1000 + 1)
    st, sr, corr = scn.map_pose_error
    poses = perturb_trajectory([f.truth for f in s.frames], st, sr, corr, seed, scn.spacing)
    m = build_base_map(s, poses, cfg=mapping)
    return Bench(scn, world, make_rig(scn.rig), m, s, seed)


def query_drive(bench: Bench, appearance: AppearanceModel, seed: int, reverse: bool = False,
                hidden_frames: Iterable[int] = ()) -> Session:
    scn = bench.scenario
    traj = loop_trajectory(bench.world.config, scn.spacing, scn.laps, start=scn.query_start,
                           lateral=scn.query_lateral, reverse=reverse)
    return simulate_session(bench.world, bench.rig, traj, appearance, scn.noise, seed, hidden_frames)


# --------------------------------------------------------------------------
# parallel helper
# --------------------------------------------------------------------------

def _parallel(fn: Callable, items: list, threads: int = 1) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        futures = [ex.submit(fn, *it) for it in items]
        return [f.result() for f in futures]


# --------------------------------------------------------------------------
# threshold sweep
# --------------------------------------------------------------------------

SWEEP_HEADER = ["delta", "rho", "recall", "median_error_m", "p90_error_m", "median_rot_deg", "obs_avg"]


def _sweep_point(m, rig, frames, cfg: LocalizerConfig):
    run = run_sequence(m, rig, frames, cfg)
    met = run_metrics(m, frames, run)
    p90 = float("nan") if met.p_e_xyz is None else met.p_e_xyz[1]
    rot = float("nan") if met.theta_e_xyz is None else met.theta_e_xyz[0]
    return [cfg.tracking.delta, cfg.tracking.rho, met.r_mt, met.median_error, p90, rot, met.obs_avg]


def sweep_thresholds(m: LandmarkMap, rig, frames: Sequence[FrameBundle],
                     deltas: Sequence[int] = DELTA_GRID, rhos: Sequence[float] = RHO_GRID,
                     base: LocalizerConfig = LocalizerConfig(), full_grid: bool = False,
                     threads: int = 1) -> list[list]:
    """Recall and accuracy over threshold settings, rows sorted by (delta, rho).

    By default two axis sweeps are run: every delta at the base rho and every
    rho at the base delta. ``full_grid`` runs the Cartesian product instead.
    """
    t0 = base.tracking
    if full_grid:
        pairs = {(d, r) for d in deltas for r in rhos}
    else:
        pairs = {(d, t0.rho) for d in deltas} | {(t0.delta, r) for r in rhos}
    items = []
    for d, r in sorted(pairs):
        cfg = replace(base, tracking=replace(t0, delta=int(d), rho=float(r)))
        items.append((m, rig, list(frames), cfg))
    rows = _parallel(_sweep_point, items, threads)
    return sorted(rows, key=lambda r: (r[0], r[1]))


# --------------------------------------------------------------------------
# convergence basin
# --------------------------------------------------------------------------

BASIN_HEADER = ["delta", "rho", "axis", "magnitude", "trials", "converged", "failed", "false_positive", "region"]
AXES = ("yaw", "longitudinal", "lateral")


def disturbed_prior(T: geo.Pose, axis: str, magnitude: float, sign: float) -> geo.Pose:
    if axis == "yaw":
        return disturb(T, yaw=sign * np.radians(magnitude))
    if axis == "longitudinal":
        return disturb(T, longitudinal=sign * magnitude)
    if axis == "lateral":
        return disturb(T, lateral=sign * magnitude)
    raise ValueError(f"unknown disturbance axis {axis!r}")


def basin_trial(m: LandmarkMap, rig, bundle: FrameBundle, prior: geo.Pose, cfg: LocalizerConfig,
                cutoff: float = FALSE_POSITIVE_M) -> str:
    """One bootstrap attempt from ``prior``: 'converged', 'failed' or 'false_positive'."""
    res = bootstrap_from_prior(m, rig, bundle, prior, cfg)
    if len(res.inliers) < cfg.tracking.min_inliers:
        return "failed"
    err = np.linalg.norm(res.state.pose.translation - bundle.truth.translation)
    return "converged" if err <= cutoff else "false_positive"


def _basin_point(m, rig, frames, cfg: LocalizerConfig, axis: str, magnitude: float, trials: int, seed: int):
    rng = np.random.default_rng([seed, int(cfg.tracking.delta), int(round(cfg.tracking.rho * 100)),
                                 AXES.index(axis), int(round(magnitude * 100))])
    counts = {"converged": 0, "failed": 0, "false_positive": 0}
    for _ in range(trials):
        b = frames[int(rng.integers(len(frames)))]
        sign = 1.0 if rng.random() < 0.5 else -1.0
        counts[basin_trial(m, rig, b, disturbed_prior(b.truth, axis, magnitude, sign), cfg)] += 1
    region = "X" if counts["false_positive"] else ("ok" if counts["converged"] == trials else "-")
    return [cfg.tracking.delta, cfg.tracking.rho, axis, magnitude, trials,
            counts["converged"], counts["failed"], counts["false_positive"], region]


def convergence_basin(m: LandmarkMap, rig, frames: Sequence[FrameBundle],
                      thresholds: Sequence[tuple[int, float]],
                      magnitudes: Optional[dict] = None, trials: int = 50,
                      base: LocalizerConfig = LocalizerConfig(), seed: int = 0, threads: int = 1) -> list[list]:
    """Bootstrap outcomes per threshold pair, disturbance axis and magnitude.

    ``magnitudes`` maps each axis to disturbance sizes (degrees for yaw,
    metres otherwise). A region is marked 'X' when any trial is a false
    positive.
    """
    if magnitudes is None:
        magnitudes = {"yaw": (0, 5, 10, 20, 30), "longitudinal": (0, 1, 3, 5, 10), "lateral": (0, 1, 3, 5, 10)}
    frames = [f for f in frames if f.truth is not None]
    items = []
    for d, r in sorted(thresholds):
        cfg = replace(base, tracking=replace(base.tracking, delta=int(d), rho=float(r)))
        for axis in AXES:
            for mag in magnitudes.get(axis, ()):
                items.append((m, rig, frames, cfg, axis, float(mag), trials, seed))
    rows = _parallel(_basin_point, items, threads)
    return sorted(rows, key=lambda r: (r[0], r[1], AXES.index(r[2]), r[3]))


# --------------------------------------------------------------------------
# descriptor comparison
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DescriptorVariant:
    name: str
    bits: int
    delta: int
    flip_scale: float = 1.0   # scales every condition's corruption relative to the reference


DEFAULT_VARIANTS = (
    DescriptorVariant("512-bit", 512, 100),
    DescriptorVariant("256-bit", 256, 50),
    DescriptorVariant("512-bit-fragile (proxy)", 512, 100, 1.5),
)

DESCRIPTOR_HEADER = ["variant", "bits", "delta", "flip_scale", "recall", "obs_avg",
                     "median_error_m", "p90_error_m", "median_rot_deg"]


def _scaled_appearance(a: AppearanceModel, k: float) -> AppearanceModel:
    return a if k == 1.0 else replace(a, bit_flip_rate=min(1.0, a.bit_flip_rate * k))


def _descriptor_point(scn: Scenario, v: DescriptorVariant, query: AppearanceModel, seed: int,
                      base: LocalizerConfig):
    s2 = replace(scn, world=replace(scn.world, descriptor_length=v.bits),
                 map_appearance=_scaled_appearance(scn.map_appearance, v.flip_scale),
                 noise=replace(scn.noise, descriptor_flip_rate=min(1.0, scn.noise.descriptor_flip_rate * v.flip_scale)))
    bench = build_bench(s2, seed, MappingConfig(delta=v.delta))
    q = query_drive(bench, _scaled_appearance(query, v.flip_scale), seed * 1000 + 7)
    cfg = replace(base, tracking=replace(base.tracking, delta=v.delta))
    run = run_sequence(bench.map, bench.rig, q.frames, cfg)
    met = run_metrics(bench.map, q.frames, run)
    p90 = float("nan") if met.p_e_xyz is None else met.p_e_xyz[1]
    rot = float("nan") if met.theta_e_xyz is None else met.theta_e_xyz[0]
    return [v.name, v.bits, v.delta, v.flip_scale, met.r_mt, met.obs_avg, met.median_error, p90, rot]


def descriptor_study(scn: Scenario, query: AppearanceModel, variants: Sequence[DescriptorVariant] = DEFAULT_VARIANTS,
                     seed: int = 0, base: LocalizerConfig = LocalizerConfig(), threads: int = 1) -> list[list]:
    """Recall, observation count and accuracy per descriptor variant on the same geometry.

    The delta threshold should scale with descriptor length. The fragile
    variant is a stand-in for a descriptor that degrades faster under
    appearance change, not a model of any particular extractor.
    """
    items = [(scn, v, query, seed, base) for v in variants]
    return _parallel(_descriptor_point, items, threads)


# --------------------------------------------------------------------------
# map-tracking vs. global localization
# --------------------------------------------------------------------------

COMPARISON_HEADER = ["map", "query", "frames", "r_mt", "r_gl", "obs_avg", "median_error_m", "p90_error_m"]


def global_recall(m: LandmarkMap, rig, frames: Sequence[FrameBundle], cfg: LocalizerConfig = LocalizerConfig(),
                  every: int = 1) -> tuple[float, np.ndarray]:
    """Recall of the global-localization baseline evaluated on every ``every``-th frame."""
    flags = np.zeros(len(frames), dtype=bool)
    for i in range(0, len(frames), every):
        res = global_localize(m, rig, frames[i], cfg)
        ok = res is not None
        flags[i:i + every] = ok
    return recall(truth_positions(frames), flags), flags


def recall_comparison(m: LandmarkMap, rig, frames: Sequence[FrameBundle], cfg: LocalizerConfig = LocalizerConfig(),
                      gl_every: int = 1) -> RunMetrics:
    run = run_sequence(m, rig, frames, cfg)
    _, gl = global_recall(m, rig, frames, cfg, gl_every)
    return run_metrics(m, frames, run, gl)


def multi_session_map(scn: Scenario, appearances: Sequence[AppearanceModel], seed: int = 0,
                      mapping: MappingConfig = MappingConfig(),
                      loc: LocalizerConfig = LocalizerConfig()) -> Bench:
    """Base map from the scenario's mapping drive, extended by one drive per appearance."""
    bench = build_bench(scn, seed, mapping)
    for k, app in enumerate(appearances):
        s = mapping_drive(bench.world, scn, app, seed=seed * 1000 + 100 + k, start=0.25 * (k + 1),
                          lateral=-0.5 * (k + 1))
        add_session(bench.map, s, mapping, loc)
    return bench


# --------------------------------------------------------------------------
# robustness to gross outliers
# --------------------------------------------------------------------------

ROBUSTNESS_HEADER = ["frame", "inliers", "outliers", "error_clean_m", "error_mixed_m", "ratio"]


def inject_outliers(constraints: Sequence, rig, truth: geo.Pose, fraction: float,
                    rng: np.random.Generator, min_offset_px: float = 20.0) -> list:
    """Append gross outliers so they make up ``fraction`` of the returned list.

    Each outlier reuses a genuine landmark but pairs it with a random pixel at
    least ``min_offset_px`` from where the landmark truly projects.
    """
    cons = list(constraints)
    if not cons or fraction <= 0:
        return cons
    n_out = int(round(fraction * len(cons) / (1.0 - fraction)))
    out = []
    while len(out) < n_out:
        c = cons[rng.integers(len(cons))]
        cam = rig[c.camera_index]
        uv_true, _ = geo.project_points(cam, truth, c.landmark_position[None])
        uv = rng.uniform([0.0, 0.0], [cam.width, cam.height])
        if np.linalg.norm(uv - uv_true[0]) < min_offset_px:
            continue
        out.append(replace(c, keypoint=uv, keypoint_index=-1, descriptor_distance=int(rng.integers(0, 100))))
    return cons + out


def robustness_study(rig, frames: Sequence[FrameBundle], run: RunLog, fraction: float = 0.3,
                     cfg: LocalizerConfig = LocalizerConfig(), seed: int = 0,
                     max_frames: Optional[int] = None) -> list[list]:
    """Re-run each filter step of ``run`` with and without injected gross outliers.

    ``run`` must come from ``run_sequence(..., keep_constraints=True)``. A step
    is replayed from the previous posterior with the frame's inlier
    constraints; both results are scored against ground truth.
    """
    from .estimator import FilterState, propagate, update

    rng = np.random.default_rng(seed)
    rows = []
    for prev, rec in zip(run.records, run.records[1:]):
        if max_frames is not None and len(rows) >= max_frames:
            break
        if not (prev.initialized and rec.localized and rec.inlier_constraints):
            continue
        f = frames[rec.index]
        state = FilterState(prev.pose, prev.information, prev.timestamp)
        x0 = propagate(state, f.odometry)
        clean = rec.inlier_constraints
        mixed = inject_outliers(clean, rig, f.truth, fraction, rng)
        args = (f.odometry, rig, cfg.tracking, cfg.loss, cfg.solver, f.timestamp)
        e_clean = np.linalg.norm(update(state, x0, clean, *args).state.pose.translation - f.truth.translation)
        e_mixed = np.linalg.norm(update(state, x0, mixed, *args).state.pose.translation - f.truth.translation)
        rows.append([rec.index, len(clean), len(mixed) - len(clean), float(e_clean), float(e_mixed),
                     float(e_mixed / e_clean) if e_clean > 0 else float("inf")])
    return rows


# --------------------------------------------------------------------------
# adversarial suites
# --------------------------------------------------------------------------

def invert_descriptors(frames: Sequence[FrameBundle]) -> list[FrameBundle]:
    """Copies of ``frames`` with every descriptor bit flipped."""
    out = []
    for f in frames:
        kps = [replace(k, descriptors=np.bitwise_not(k.descriptors)) for k in f.keypoints]
        out.append(replace(f, keypoints=kps))
    return out


def aliased_world(world: SyntheticWorld, seed: int) -> SyntheticWorld:
    """Unmapped terrain that looks like ``world``.

    Point geometry is redrawn from ``seed`` while the descriptors are a
    permutation of the original ones, so every feature a query sees has an
    exact twin in the map, only in the wrong place.
    """
    cfg = replace(world.config, n_points=len(world))
    other = generate_world(cfg, seed)
    perm = np.random.default_rng([seed, 3]).permutation(len(world))
    return SyntheticWorld(cfg, seed, other.points, world.descriptors[perm].copy())


def off_map_drive(bench: Bench, appearance: AppearanceModel, seed: int, world_seed: int) -> Session:
    """A query along the mapped road but through :func:`aliased_world` terrain."""
    scn = bench.scenario
    w = aliased_world(bench.world, world_seed)
    traj = loop_trajectory(w.config, scn.spacing, scn.laps, start=scn.query_start, lateral=scn.query_lateral)
    return simulate_session(w, bench.rig, traj, appearance, scn.noise, seed)


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return "nan" if not np.isfinite(v) else repr(round(v, 9))
    return str(v)


def to_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def to_json(obj) -> str:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o))
    return json.dumps(obj, indent=2, sort_keys=True, default=default)

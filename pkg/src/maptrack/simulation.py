"""Synthetic worlds, camera rigs and sessions under varying appearance.

The world is a loop road lined with points on both sides. Appearance
conditions are modelled in two layers: every condition label owns a fixed
corruption of each point's canonical descriptor plus a fixed subset of
invisible points, and every individual observation adds fresh bit noise on
top (``NoiseConfig.descriptor_flip_rate``).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .dataset import FrameBundle, Session
from .estimator import OdometryMeasurement, odometry_covariance
from .features import KeypointSet, check_length, flip_bits, random_descriptors
from .geometry import CameraModel, Pose, compose, exp, project_points


@dataclass(frozen=True)
class WorldConfig:
    loop_length: float = 400.0
    point_density: float = 5.0       # expected points per metre of road
    n_points: Optional[int] = None   # exact count, overrides the density
    lateral_range: tuple = (4.0, 12.0)
    height_range: tuple = (0.0, 6.0)
    descriptor_length: int = 512
    # clustered appearance: points share one of n_prototypes base patterns
    n_prototypes: int = 0
    intra_class_flip: float = 0.0
    # density along the road varies as 1 + a*sin(2*pi*cycles*s/L): built-up vs open stretches
    density_variation: float = 0.0
    density_cycles: int = 4

    @property
    def radius(self) -> float:
        return self.loop_length / (2 * np.pi)


@dataclass(frozen=True)
class AppearanceModel:
    label: str
    bit_flip_rate: float = 0.0
    dropout_rate: float = 0.0
    # fraction of points whose look the condition leaves untouched (lit signs, say)
    stable_fraction: float = 0.0
    # lit sites, one per lit_every metres of road; each keeps its lit_points
    # nearest points visible and looking as they do in daylight
    lit_every: float = 0.0
    lit_points: int = 0
    # detection range under this condition, when shorter than the sensor's
    max_range: Optional[float] = None

    def __post_init__(self):
        rates = (self.bit_flip_rate, self.dropout_rate, self.stable_fraction)
        if not all(0.0 <= r <= 1.0 for r in rates):
            raise ValueError("appearance rates must lie in [0, 1]")
        if self.lit_every < 0 or self.lit_points < 0:
            raise ValueError("lit site spacing and size must be non-negative")
        if self.max_range is not None and self.max_range <= 0:
            raise ValueError("max_range must be positive")

    def scaled(self, factor: float, label: Optional[str] = None) -> "AppearanceModel":
        return AppearanceModel(label or f"{self.label}x{factor:g}",
                               min(1.0, self.bit_flip_rate * factor), self.dropout_rate,
                               self.stable_fraction, self.lit_every, self.lit_points, self.max_range)


APPEARANCE_PRESETS = {
    "clean": AppearanceModel("clean", 0.0, 0.0),
    "day": AppearanceModel("day", 0.02, 0.1),
    "sunny": AppearanceModel("sunny", 0.06, 0.2),
    "night": AppearanceModel("night", 0.30, 0.3, lit_every=400.0, lit_points=25, max_range=25.0),
}


@dataclass(frozen=True)
class NoiseConfig:
    pixel_sigma: float = 0.5
    descriptor_flip_rate: float = 0.02
    clutter_per_camera: int = 0
    odo_rot_sigma: float = 0.002     # rad per step
    odo_trans_sigma: float = 0.02    # m per step
    fix_sigma: float = 3.0
    fix_every: int = 10
    max_range: float = 40.0

    @property
    def odometry_covariance(self) -> np.ndarray:
        return odometry_covariance(max(self.odo_rot_sigma, 1e-6), max(self.odo_trans_sigma, 1e-5))


NOISELESS = NoiseConfig(pixel_sigma=0.0, descriptor_flip_rate=0.0, odo_rot_sigma=0.0,
                        odo_trans_sigma=0.0, fix_sigma=0.0)


def _label_seed(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


@dataclass(eq=False)
class SyntheticWorld:
    config: WorldConfig
    seed: int
    points: np.ndarray        # (N, 3)
    descriptors: np.ndarray   # (N, nbytes) canonical
    _conditions: dict = field(default_factory=dict, repr=False)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)

    def __len__(self) -> int:
        return len(self.points)

    def condition(self, appearance: AppearanceModel):
        """``(descriptors, visible_mask)`` of the points under a condition label."""
        key = (appearance.label, appearance.bit_flip_rate, appearance.dropout_rate,
               appearance.stable_fraction, appearance.lit_every, appearance.lit_points)
        if key not in self._conditions:
            rng = np.random.default_rng([self.seed, _label_seed(appearance.label)])
            desc = flip_bits(rng, self.descriptors, appearance.bit_flip_rate)
            visible = rng.random(len(self.points)) >= appearance.dropout_rate
            if appearance.stable_fraction > 0:
                stable = rng.random(len(self.points)) < appearance.stable_fraction
                desc[stable] = self.descriptors[stable]
            if appearance.lit_every > 0 and appearance.lit_points > 0:
                lit = self._lit_points(rng, appearance)
                desc[lit] = self.descriptors[lit]
                visible |= lit
            self._conditions[key] = (desc, visible)
        return self._conditions[key]

    def _lit_points(self, rng, appearance: AppearanceModel) -> np.ndarray:
        n_sites = max(1, int(round(self.config.loop_length / appearance.lit_every)))
        k = min(appearance.lit_points, len(self.points))
        sites = rng.choice(len(self.points), size=min(n_sites, len(self.points)), replace=False)
        lit = np.zeros(len(self.points), dtype=bool)
        for i in sites:
            d = np.linalg.norm(self.points - self.points[i], axis=1)
            lit[np.argpartition(d, k - 1)[:k]] = True
        return lit

    def __eq__(self, other):
        return (isinstance(other, SyntheticWorld) and self.config == other.config and self.seed == other.seed
                and np.array_equal(self.points, other.points)
                and np.array_equal(self.descriptors, other.descriptors))


def generate_world(cfg: WorldConfig = WorldConfig(), seed: int = 0) -> SyntheticWorld:
    """Points along both sides of a circular loop road, reproducible per seed."""
    check_length(cfg.descriptor_length)
    geo_seq, desc_seq = np.random.SeedSequence([seed, 1]), np.random.SeedSequence([seed, 2])
    rng = np.random.default_rng(geo_seq)
    if cfg.n_points is not None:
        n = int(cfg.n_points)
    else:
        if cfg.point_density <= 0 or cfg.loop_length <= 0:
            raise ValueError("point density and loop length must be positive")
        n = int(rng.poisson(cfg.point_density * cfg.loop_length))
    if n <= 0:
        raise ValueError("world needs at least one point")
    R = cfg.radius
    if not 0.0 <= cfg.density_variation < 1.0:
        raise ValueError("density_variation must lie in [0, 1)")
    if cfg.density_variation > 0:
        s = np.empty(0)
        a, k = cfg.density_variation, cfg.density_cycles
        while len(s) < n:
            c = rng.uniform(0, cfg.loop_length, 2 * n)
            keep = rng.random(2 * n) * (1 + a) < 1 + a * np.sin(2 * np.pi * k * c / cfg.loop_length)
            s = np.concatenate([s, c[keep]])
        s = s[:n]
    else:
        s = rng.uniform(0, cfg.loop_length, n)
    side = rng.choice([-1.0, 1.0], n)
    off = rng.uniform(*cfg.lateral_range, n)
    z = rng.uniform(*cfg.height_range, n)
    ang = s / R
    rad = R + side * off
    pts = np.column_stack([rad * np.cos(ang), rad * np.sin(ang), z])

    drng = np.random.default_rng(desc_seq)
    if cfg.n_prototypes > 0:
        protos = random_descriptors(drng, cfg.n_prototypes, cfg.descriptor_length)
        which = drng.integers(0, cfg.n_prototypes, n)
        desc = flip_bits(drng, protos[which], cfg.intra_class_flip)
    else:
        desc = random_descriptors(drng, n, cfg.descriptor_length)
    return SyntheticWorld(cfg, seed, pts, desc)


# --------------------------------------------------------------------------
# rigs and trajectories
# --------------------------------------------------------------------------

def _camera_extrinsics(yaw: float, height: float) -> Pose:
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.column_stack([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
    return Pose.from_rt(R, [0.0, 0.0, height])


def make_rig(preset: str = "updrive", fx: float = 200.0, width: int = 640, height: int = 400,
             mount_height: float = 1.5) -> list[CameraModel]:
    """Camera rig presets: ``updrive`` (four cameras at 90 degree spacing) or ``forward``."""
    yaws = {"updrive": [0.0, np.pi / 2, np.pi, -np.pi / 2], "forward": [0.0]}
    if preset not in yaws:
        raise ValueError(f"unknown rig preset {preset!r}")
    return [CameraModel(fx, fx, width / 2, height / 2, width, height, _camera_extrinsics(y, mount_height))
            for y in yaws[preset]]


def loop_trajectory(cfg: WorldConfig, spacing: float = 1.0, laps: float = 1.0, start: float = 0.0,
                    reverse: bool = False, lateral: float = 0.0) -> list[Pose]:
    """Poses along the loop road, body x forward and z up."""
    R = cfg.radius + lateral
    n = int(round(laps * cfg.loop_length / spacing))
    s = start + spacing * np.arange(n)
    ang = s / cfg.radius
    if reverse:
        ang = -ang
    poses = []
    for a in ang:
        yaw = a - np.pi / 2 if reverse else a + np.pi / 2
        poses.append(Pose.from_xyz_rpy(R * np.cos(a), R * np.sin(a), 0.0, yaw=yaw))
    return poses


def disturb(pose: Pose, yaw: float = 0.0, longitudinal: float = 0.0, lateral: float = 0.0) -> Pose:
    """Perturb a pose in its own body frame."""
    return compose(pose, Pose.from_xyz_rpy(longitudinal, lateral, 0.0, yaw=yaw))


def perturb_trajectory(poses: Sequence[Pose], sigma_t: float, sigma_rot_deg: float, correlation: float,
                       seed: int = 0, spacing: float = 1.0, closed: bool = True) -> list[Pose]:
    """Smoothly wrong copy of a trajectory, like the output of an imperfect SLAM system.

    Each pose is right-multiplied by a twist whose six components are
    independent Gaussian processes along the path with standard deviations
    ``sigma_rot_deg`` (rotation) and ``sigma_t`` (translation) and a Gaussian
    correlation length of ``correlation`` metres.
    """
    n = len(poses)
    if n == 0 or (sigma_t <= 0 and sigma_rot_deg <= 0):
        return list(poses)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    white = rng.normal(0.0, 1.0, (n, 6))
    width = max(correlation / spacing, 1e-9)
    smooth = gaussian_filter1d(white, width, axis=0, mode="wrap" if closed else "reflect")
    smooth /= np.maximum(smooth.std(axis=0, keepdims=True), 1e-12)
    scale = np.array([np.radians(sigma_rot_deg)] * 3 + [sigma_t] * 3)
    return [compose(T, exp(x * scale)) for T, x in zip(poses, smooth)]


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def render_frame(world: SyntheticWorld, T_MB: Pose, rig: Sequence[CameraModel],
                 appearance: AppearanceModel, noise: NoiseConfig = NoiseConfig(), seed=0,
                 prev_pose: Optional[Pose] = None, timestamp: float = 0.0, with_fix: bool = True,
                 hidden: bool = False) -> FrameBundle:
    """Render keypoints of one timestep; ``hidden`` removes every point (e.g. a tunnel)."""
    rng = _rng(seed)
    desc, visible = world.condition(appearance)
    reach = noise.max_range if appearance.max_range is None else min(noise.max_range, appearance.max_range)
    near = np.linalg.norm(world.points - T_MB.translation, axis=1) <= reach
    cand = np.flatnonzero(visible & near) if not hidden else np.zeros(0, dtype=np.int64)
    nb = world.descriptors.shape[1]
    kps = []
    for cam in rig:
        uv, ok = project_points(cam, T_MB, world.points[cand])
        idx = cand[ok]
        uv = uv[ok]
        if noise.pixel_sigma > 0 and len(uv):
            uv = uv + rng.normal(0.0, noise.pixel_sigma, uv.shape)
            inside = cam.in_image(uv)
            idx, uv = idx[inside], uv[inside]
        d = flip_bits(rng, desc[idx], noise.descriptor_flip_rate)
        ids = idx.astype(np.int64)
        if noise.clutter_per_camera > 0 and not hidden:
            m = noise.clutter_per_camera
            cuv = np.column_stack([rng.uniform(0, cam.width, m), rng.uniform(0, cam.height, m)])
            cd = random_descriptors(rng, m, world.config.descriptor_length)
            uv = np.vstack([uv.reshape(-1, 2), cuv])
            d = np.vstack([d.reshape(-1, nb), cd])
            ids = np.concatenate([ids, np.full(m, -1, dtype=np.int64)])
        kps.append(KeypointSet(uv.reshape(-1, 2), d.reshape(-1, nb), ids))

    Q = noise.odometry_covariance
    if prev_pose is None:
        delta = Pose.identity()
    else:
        delta = compose(prev_pose.inverse(), T_MB)
        sig = np.array([noise.odo_rot_sigma] * 3 + [noise.odo_trans_sigma] * 3)
        if np.any(sig > 0):
            delta = compose(delta, exp(rng.normal(0.0, 1.0, 6) * sig))
    fix = None
    if with_fix:
        fix = T_MB.translation + (rng.normal(0.0, noise.fix_sigma, 3) * [1, 1, 0] if noise.fix_sigma > 0 else 0.0)
    return FrameBundle(float(timestamp), kps, OdometryMeasurement(delta, Q), fix,
                       float(noise.fix_sigma) if fix is not None else 0.0, T_MB)


def simulate_session(world: SyntheticWorld, rig: Sequence[CameraModel], trajectory: Sequence[Pose],
                     appearance: AppearanceModel, noise: NoiseConfig = NoiseConfig(), seed: int = 0,
                     hidden_frames: Iterable[int] = (), dt: float = 0.1, t0: float = 0.0) -> Session:
    hidden = set(hidden_frames)
    frames = []
    prev = None
    for i, T in enumerate(trajectory):
        with_fix = noise.fix_every > 0 and i % noise.fix_every == 0
        frames.append(render_frame(world, T, rig, appearance, noise, seed=[seed, i], prev_pose=prev,
                                   timestamp=t0 + i * dt, with_fix=with_fix, hidden=i in hidden))
        prev = T
    meta = {"appearance": appearance.label, "bit_flip_rate": appearance.bit_flip_rate,
            "dropout_rate": appearance.dropout_rate, "seed": seed, "world_seed": world.seed}
    return Session(list(rig), frames, world.config.descriptor_length, appearance.label, meta)

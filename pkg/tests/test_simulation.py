import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maptrack import geometry as geo
from maptrack.features import hamming
from maptrack.simulation import (APPEARANCE_PRESETS, NOISELESS, AppearanceModel, NoiseConfig, WorldConfig, disturb,
                                 generate_world, loop_trajectory, make_rig, perturb_trajectory, render_frame,
                                 simulate_session)

RIG = make_rig("updrive")
WORLD = generate_world(WorldConfig(loop_length=150.0), seed=3)


def test_world_is_reproducible():
    a = generate_world(WorldConfig(), seed=11)
    b = generate_world(WorldConfig(), seed=11)
    assert a == b
    assert not np.array_equal(a.points, generate_world(WorldConfig(), seed=12).points)


def test_world_needs_points():
    with pytest.raises(ValueError):
        generate_world(WorldConfig(n_points=0))
    with pytest.raises(ValueError):
        generate_world(WorldConfig(point_density=0.0))


def test_point_count_matches_density():
    counts = [len(generate_world(WorldConfig(point_density=5.0, loop_length=400.0), seed=s)) for s in range(5)]
    # Poisson(2000): three standard deviations is about 134
    assert all(abs(c - 2000) < 3 * np.sqrt(2000) for c in counts)


def test_points_lie_along_the_road():
    cfg = WORLD.config
    r = np.linalg.norm(WORLD.points[:, :2], axis=1)
    off = np.abs(r - cfg.radius)
    assert off.min() >= cfg.lateral_range[0] - 1e-9 and off.max() <= cfg.lateral_range[1] + 1e-9
    assert WORLD.points[:, 2].min() >= cfg.height_range[0] and WORLD.points[:, 2].max() <= cfg.height_range[1]


def test_density_variation_shifts_points():
    cfg = WorldConfig(point_density=20.0, density_variation=0.9, density_cycles=2)
    w = generate_world(cfg, seed=0)
    s = (np.arctan2(w.points[:, 1], w.points[:, 0]) % (2 * np.pi)) * cfg.radius
    dense = np.sin(2 * np.pi * 2 * s / cfg.loop_length) > 0
    assert dense.mean() > 0.7
    with pytest.raises(ValueError):
        generate_world(WorldConfig(density_variation=1.0))


def test_clustered_descriptors_share_prototypes():
    w = generate_world(WorldConfig(loop_length=100.0, n_prototypes=4, intra_class_flip=0.01), seed=0)
    d = hamming(w.descriptors[:, None, :], w.descriptors[None, :50, :])
    # each point is close to many others from its class
    assert np.median((d < 40).sum(axis=1)) >= 5


def test_clean_render_is_exact():
    T = loop_trajectory(WORLD.config)[5]
    f = render_frame(WORLD, T, RIG, APPEARANCE_PRESETS["clean"], NOISELESS)
    n = 0
    for cam, ks in zip(RIG, f.keypoints):
        for uv, d, pid in zip(ks.positions, ks.descriptors, ks.point_ids):
            assert np.allclose(uv, geo.project(cam, T, WORLD.points[pid]), atol=1e-9)
            assert np.array_equal(d, WORLD.descriptors[pid])
            n += 1
    assert n > 50
    assert np.allclose(f.fix, T.translation) and f.truth == T


def test_full_dropout_gives_no_keypoints():
    T = loop_trajectory(WORLD.config)[5]
    f = render_frame(WORLD, T, RIG, AppearanceModel("gone", 0.0, 1.0), NOISELESS)
    assert f.n_keypoints == 0


def test_hidden_frame_gives_no_keypoints():
    T = loop_trajectory(WORLD.config)[5]
    assert render_frame(WORLD, T, RIG, APPEARANCE_PRESETS["day"], hidden=True).n_keypoints == 0


def test_flip_rate_calibration():
    w = generate_world(WorldConfig(n_points=10_000), seed=1)
    desc, _ = w.condition(AppearanceModel("flip5", 0.05, 0.0))
    d = hamming(desc, w.descriptors)
    se = np.sqrt(512 * 0.05 * 0.95 / len(d))
    assert abs(d.mean() - 25.6) < 3 * se


def test_pixel_noise_calibration():
    traj = loop_trajectory(WORLD.config)
    noise = NoiseConfig(pixel_sigma=0.5, descriptor_flip_rate=0.0)
    res = []
    for i in range(0, 150, 2):
        clean = render_frame(WORLD, traj[i], RIG, APPEARANCE_PRESETS["clean"], NOISELESS, seed=i)
        noisy = render_frame(WORLD, traj[i], RIG, APPEARANCE_PRESETS["clean"], noise, seed=i)
        for a, b in zip(clean.keypoints, noisy.keypoints):
            ref = dict(zip(a.point_ids, a.positions))
            res.extend(p - ref[pid] for pid, p in zip(b.point_ids, b.positions) if pid in ref)
    res = np.array(res).ravel()
    assert len(res) > 10_000
    # standard error of a sample standard deviation is sigma / sqrt(2n)
    assert abs(res.std() - 0.5) < 3 * 0.5 / np.sqrt(2 * len(res))
    assert abs(res.mean()) < 3 * 0.5 / np.sqrt(len(res))


def test_condition_is_stable_per_label():
    a, va = WORLD.condition(APPEARANCE_PRESETS["night"])
    b, vb = WORLD.condition(AppearanceModel("night", 0.30, 0.3, lit_every=400.0, lit_points=25, max_range=25.0))
    assert np.array_equal(a, b) and np.array_equal(va, vb)
    c, _ = WORLD.condition(AppearanceModel("other-night", 0.30, 0.3, lit_every=400.0, lit_points=25))
    assert not np.array_equal(a, c)


def test_stable_fraction_keeps_canonical_descriptors():
    desc, _ = WORLD.condition(AppearanceModel("stable", 0.3, 0.0, 0.5))
    same = (hamming(desc, WORLD.descriptors) == 0).mean()
    assert 0.4 < same < 0.6


def test_appearance_rates_validated():
    with pytest.raises(ValueError):
        AppearanceModel("bad", 1.5)
    with pytest.raises(ValueError):
        AppearanceModel("bad", 0.1, -0.1)


def test_rig_presets():
    assert len(make_rig("updrive")) == 4 and len(make_rig("forward")) == 1
    with pytest.raises(ValueError):
        make_rig("fisheye")
    # the forward camera looks along body x
    cam = make_rig("forward")[0]
    assert np.allclose(geo.project(cam, geo.Pose(), [10, 0, 1.5]), [cam.cx, cam.cy])


def test_loop_trajectory_geometry():
    cfg = WorldConfig(loop_length=100.0)
    traj = loop_trajectory(cfg, spacing=2.0)
    assert len(traj) == 50
    steps = [np.linalg.norm(b.translation - a.translation) for a, b in zip(traj, traj[1:])]
    assert np.allclose(steps, steps[0]) and abs(steps[0] - 2.0) < 0.01
    # the chord between two poses bisects their headings
    fwd = traj[0].R[:, 0]
    mid = fwd + traj[1].R[:, 0]
    assert np.allclose(mid / np.linalg.norm(mid), (traj[1].translation - traj[0].translation) / steps[0])
    rev = loop_trajectory(cfg, spacing=2.0, reverse=True)
    assert np.allclose(rev[0].R[:, 0], -fwd, atol=1e-9)


def test_disturb_is_in_body_frame():
    T = geo.Pose.from_xyz_rpy(5, 5, 0, yaw=np.pi / 2)
    d = disturb(T, longitudinal=2.0, lateral=1.0)
    assert np.allclose(d.translation, [4, 7, 0])


def test_perturb_trajectory_statistics():
    traj = loop_trajectory(WorldConfig(loop_length=2000.0))
    pert = perturb_trajectory(traj, 0.05, 0.1, 30.0, seed=0)
    err = np.array([geo.box_minus(p, t) for p, t in zip(pert, traj)])
    assert np.allclose(err[:, 3:].std(axis=0), 0.05, rtol=1e-6)
    assert np.allclose(err[:, :3].std(axis=0), np.radians(0.1), rtol=1e-6)
    # neighbouring poses are strongly correlated
    assert np.corrcoef(err[:-1, 3], err[1:, 3])[0, 1] > 0.95
    assert perturb_trajectory(traj, 0.0, 0.0, 30.0) == traj


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_rendering_is_deterministic(seed):
    T = loop_trajectory(WORLD.config)[seed % 150]
    a = render_frame(WORLD, T, RIG, APPEARANCE_PRESETS["day"], seed=seed)
    b = render_frame(WORLD, T, RIG, APPEARANCE_PRESETS["day"], seed=seed)
    for x, y in zip(a.keypoints, b.keypoints):
        assert np.array_equal(x.positions, y.positions) and np.array_equal(x.descriptors, y.descriptors)
    assert a.odometry.delta == b.odometry.delta and np.array_equal(a.fix, b.fix)


def test_session_odometry_and_fixes():
    traj = loop_trajectory(WORLD.config)[:25]
    s = simulate_session(WORLD, RIG, traj, APPEARANCE_PRESETS["day"], NoiseConfig(fix_every=10), seed=2)
    assert [f.fix is not None for f in s.frames] == [i % 10 == 0 for i in range(25)]
    assert np.all(np.diff([f.timestamp for f in s.frames]) > 0)
    for a, b in zip(s.frames, s.frames[1:]):
        true = geo.compose(a.truth.inverse(), b.truth)
        assert np.linalg.norm(geo.box_minus(b.odometry.delta, true)) < 0.2


def test_lit_sites_stay_visible_and_unchanged():
    w = generate_world(WorldConfig(loop_length=400.0, point_density=2.0), seed=3)
    dark = AppearanceModel("dark", 0.3, 1.0, lit_every=200.0, lit_points=20)
    desc, visible = w.condition(dark)
    # two sites of twenty nearest points; everything else drops out
    assert 20 < visible.sum() <= 40
    assert np.all(hamming(desc[visible], w.descriptors[visible]) == 0)
    assert (hamming(desc[~visible], w.descriptors[~visible]) > 0).all()


def test_condition_range_limits_rendering():
    T = geo.Pose.from_xyz_rpy(*WORLD.config.radius * np.array([1.0, 0.0]), 0.0, yaw=np.pi / 2)
    near = AppearanceModel("near", 0.0, 0.0, max_range=10.0)
    f = render_frame(WORLD, T, RIG, near, NOISELESS)
    ids = np.concatenate([k.point_ids for k in f.keypoints])
    assert len(ids) > 0
    assert np.all(np.linalg.norm(WORLD.points[ids] - T.translation, axis=1) <= 10.0)
    assert render_frame(WORLD, T, RIG, APPEARANCE_PRESETS["clean"], NOISELESS).n_keypoints > f.n_keypoints
    with pytest.raises(ValueError):
        AppearanceModel("bad", max_range=0.0)

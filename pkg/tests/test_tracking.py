import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maptrack import geometry as geo
from maptrack.features import DescriptorLengthError, KeypointSet, flip_bits, from_int, hamming, random_descriptors
from maptrack.geometry import CameraModel, Pose
from maptrack.landmark_map import LandmarkMap, Observation
from maptrack.simulation import APPEARANCE_PRESETS, NOISELESS, render_frame
from maptrack.tracking import (LocalizationConstraint, Status, TrackingConfig, classify_constraints, match_frame,
                               reprojection_errors)

# camera looking along body x
CAM = CameraModel(200, 200, 320, 200, 640, 400, Pose.from_rt([[0, 0, 1], [-1, 0, 0], [0, -1, 0]], [0, 0, 0]))
RIG = [CAM]


def toy_map(points, descriptors, bits=256):
    m = LandmarkMap(bits)
    s = m.new_session("toy")
    v = m.add_vertex(s, Pose(), 0.0)
    for p, d in zip(points, descriptors):
        obs = [Observation(s, v, 0, np.zeros(2), d), Observation(s, v, 0, np.zeros(2), d)]
        m.add_landmark(p, obs)
    return m


def kps(uv, descriptors):
    return [KeypointSet(np.asarray(uv, float).reshape(-1, 2), np.asarray(descriptors, np.uint8))]


def proj(p):
    return geo.project(CAM, Pose(), p)


def test_perfect_match():
    d = from_int(12345, 256)
    m = toy_map([[10, 0, 0]], [d])
    cons = match_frame(m, RIG, kps([proj([10, 0, 0])], [d]), Pose())
    assert len(cons) == 1 and cons[0].descriptor_distance == 0 and cons[0].landmark_id == 0


def test_pixel_gate():
    d = from_int(1, 256)
    m = toy_map([[10, 0, 0]], [d])
    uv = proj([10, 0, 0])
    assert match_frame(m, RIG, kps([uv + [41, 0]], [d]), Pose()) == []
    assert len(match_frame(m, RIG, kps([uv + [39, 0]], [d]), Pose())) == 1


def test_closest_descriptor_wins():
    base = from_int(0, 256)
    near = from_int(2 ** 30 - 1, 256)
    far = from_int(2 ** 80 - 1, 256)
    m = toy_map([[10, 0, 0], [10, 0.05, 0]], [far, near])
    cons = match_frame(m, RIG, kps([proj([10, 0, 0])], [base]), Pose(), TrackingConfig(delta=100))
    assert len(cons) == 1 and cons[0].landmark_id == 1 and cons[0].descriptor_distance == 30


def test_delta_threshold():
    d = from_int(0, 256)
    m = toy_map([[10, 0, 0]], [d])
    q = from_int(2 ** 20 - 1, 256)  # 20 bits set
    assert match_frame(m, RIG, kps([proj([10, 0, 0])], [q]), Pose(), TrackingConfig(delta=19)) == []
    assert len(match_frame(m, RIG, kps([proj([10, 0, 0])], [q]), Pose(), TrackingConfig(delta=20))) == 1


def test_one_keypoint_per_landmark():
    d = from_int(7, 256)
    m = toy_map([[10, 0, 0]], [d])
    uv = proj([10, 0, 0])
    cons = match_frame(m, RIG, kps([uv, uv + [1, 0]], [d, from_int(6, 256)]), Pose())
    assert len(cons) == 1 and cons[0].keypoint_index == 0


def test_equal_distance_tie_prefers_lower_landmark_id():
    d = from_int(3, 256)
    m = toy_map([[10, 0, 0], [10, 0.01, 0]], [d, d])
    cons = match_frame(m, RIG, kps([proj([10, 0, 0])], [d]), Pose())
    assert cons[0].landmark_id == 0


def test_descriptor_length_mismatch():
    m = toy_map([[10, 0, 0]], [from_int(1, 256)])
    with pytest.raises(DescriptorLengthError):
        match_frame(m, RIG, kps([proj([10, 0, 0])], [from_int(1, 512)]), Pose())


def test_landmark_behind_camera_is_skipped():
    d = from_int(1, 256)
    m = toy_map([[-10, 0, 0]], [d])
    assert match_frame(m, RIG, kps([[320, 200]], [d]), Pose()) == []


def test_noiseless_frame_matches_ground_truth(small_world, clean_map, rig, clean_session):
    # every constraint links a keypoint to the landmark built from the same world point
    f = clean_session.frames[10]
    cons = match_frame(clean_map, rig, f.keypoints, f.truth, TrackingConfig(delta=0))
    assert len(cons) > 50
    for c in cons:
        pid = f.keypoints[c.camera_index].point_ids[c.keypoint_index]
        assert np.allclose(small_world.points[pid], c.landmark_position, atol=1e-6)
        assert c.descriptor_distance == 0


# --------------------------------------------------------------------------
# properties over random scenes

@st.composite
def scenes(draw):
    seed = draw(st.integers(0, 10_000))
    rng = np.random.default_rng(seed)
    n = 40
    pts = np.column_stack([rng.uniform(5, 30, n), rng.uniform(-10, 10, n), rng.uniform(-3, 3, n)])
    desc = random_descriptors(rng, n, 256)
    m = toy_map(pts, desc)
    uv = np.array([proj(p) if proj(p) is not None else [-1e3, -1e3] for p in pts])
    uv = uv + rng.normal(0, 15, uv.shape)
    q = flip_bits(rng, desc, draw(st.floats(0, 0.3)))
    extra = rng.uniform([0, 0], [640, 400], (20, 2))
    uv = np.vstack([uv, extra])
    q = np.vstack([q, random_descriptors(rng, 20, 256)])
    return m, kps(uv, q), draw(st.integers(0, 256))


@settings(max_examples=60, deadline=None)
@given(scenes())
def test_constraints_respect_gates(scene):
    m, k, delta = scene
    cfg = TrackingConfig(delta=delta)
    cons = match_frame(m, RIG, k, Pose(), cfg)
    for c in cons:
        assert c.descriptor_distance <= delta
        assert np.linalg.norm(c.keypoint - proj(c.landmark_position)) < cfg.search_radius_px
        assert c.status == Status.CANDIDATE
    assert len({c.landmark_id for c in cons}) == len(cons)
    assert len({c.keypoint_index for c in cons}) == len(cons)
    assert [c.keypoint_index for c in cons] == sorted(c.keypoint_index for c in cons)


@settings(max_examples=60, deadline=None)
@given(scenes())
def test_best_match_optimality(scene):
    m, k, delta = scene
    cfg = TrackingConfig(delta=delta)
    cons = match_frame(m, RIG, k, Pose(), cfg)
    used = {c.landmark_id for c in cons}
    for c in cons:
        kd = k[0].descriptors[c.keypoint_index]
        for lm in m.landmarks.values():
            if lm.id in used:
                continue
            uv = proj(lm.position)
            if uv is None or np.linalg.norm(uv - c.keypoint) >= cfg.search_radius_px:
                continue
            assert hamming(kd, lm.median_descriptor) >= c.descriptor_distance


def _candidates(m, k, cfg):
    n = 0
    for lm in m.landmarks.values():
        uv = proj(lm.position)
        if uv is None:
            continue
        for p, d in zip(k[0].positions, k[0].descriptors):
            n += np.linalg.norm(p - uv) < cfg.search_radius_px and hamming(d, lm.median_descriptor) <= cfg.delta
    return n


@settings(max_examples=30, deadline=None)
@given(scenes(), st.integers(0, 128))
def test_raising_delta_never_reduces_candidates(scene, extra):
    m, k, delta = scene
    lo = _candidates(m, k, TrackingConfig(delta=delta))
    hi = _candidates(m, k, TrackingConfig(delta=min(256, delta + extra)))
    assert hi >= lo


@settings(max_examples=20, deadline=None)
@given(scenes())
def test_matching_is_deterministic(scene):
    m, k, delta = scene
    a = match_frame(m, RIG, k, Pose(), TrackingConfig(delta=delta))
    b = match_frame(m, RIG, k, Pose(), TrackingConfig(delta=delta))
    assert [(c.landmark_id, c.keypoint_index) for c in a] == [(c.landmark_id, c.keypoint_index) for c in b]


# --------------------------------------------------------------------------
# classification

def _constraint(p, offset):
    return LocalizationConstraint(0, 0, proj(p) + offset, np.asarray(p, float), 0)


def test_exact_constraint_is_inlier_for_any_rho():
    c = _constraint([10, 1, 0.5], [0, 0])
    for rho in (1e-6, 0.5, 3.0):
        inl, out, _ = classify_constraints([c], RIG, Pose(), TrackingConfig(rho=rho))
        assert len(inl) == 1 and inl[0].status == Status.INLIER


def test_five_pixel_residual_is_outlier_at_rho_three():
    inl, out, _ = classify_constraints([_constraint([10, 1, 0.5], [3, 4])], RIG, Pose(), TrackingConfig(rho=3))
    assert not inl and out[0].status == Status.OUTLIER


def test_minimum_inlier_rule():
    cons = [_constraint([10, y, 0], [0, 0]) for y in np.linspace(-2, 2, 9)]
    assert classify_constraints(cons, RIG, Pose())[2] is False
    cons.append(_constraint([10, 3, 0], [0, 0]))
    assert classify_constraints(cons, RIG, Pose())[2] is True


def test_reprojection_error_infinite_behind_camera():
    c = LocalizationConstraint(0, 0, np.array([320.0, 200.0]), np.array([-5.0, 0, 0]), 0)
    assert np.isinf(reprojection_errors([c], RIG, Pose())[0])


def test_tracking_config_validation():
    with pytest.raises(ValueError):
        TrackingConfig(delta=600).validate(512)
    with pytest.raises(ValueError):
        TrackingConfig(rho=0).validate()
    with pytest.raises(ValueError):
        TrackingConfig(min_inliers=0).validate()
    TrackingConfig().validate(512)

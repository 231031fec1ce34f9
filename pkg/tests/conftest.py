import numpy as np
import pytest

from maptrack.features import random_descriptors
from maptrack.geometry import Pose
from maptrack.landmark_map import LandmarkMap, Observation
from maptrack.mapping import build_base_map
from maptrack.simulation import (APPEARANCE_PRESETS, NOISELESS, WorldConfig, generate_world, loop_trajectory,
                                 make_rig, simulate_session)


def random_map(seed: int = 0, n_vertices: int = 60, n_landmarks: int = 300, n_sessions: int = 2,
               bits: int = 512, extent: float = 200.0) -> LandmarkMap:
    """Unstructured map for bookkeeping tests: random vertices, 2-4 observations per landmark."""
    rng = np.random.default_rng(seed)
    m = LandmarkMap(bits)
    sids = [m.new_session(f"s{k}", f"app{k}") for k in range(n_sessions)]
    vids = []
    for i in range(n_vertices):
        sid = sids[i % n_sessions]
        p = Pose.from_xyz_rpy(*rng.uniform(0, extent, 2), 0.0, yaw=rng.uniform(-np.pi, np.pi))
        vids.append(m.add_vertex(sid, p, float(i)))
    for _ in range(n_landmarks):
        k = int(rng.integers(2, 5))
        obs = []
        for vid in rng.choice(vids, k, replace=False):
            v = m.vertices[int(vid)]
            obs.append(Observation(v.session_id, v.id, int(rng.integers(4)), rng.uniform(0, 600, 2),
                                   random_descriptors(rng, 1, bits)[0]))
        m.add_landmark(rng.uniform(0, extent, 3), obs)
    return m


@pytest.fixture(scope="session")
def rig():
    return make_rig("updrive")


@pytest.fixture(scope="session")
def small_world():
    return generate_world(WorldConfig(loop_length=120.0, point_density=5.0), seed=5)


@pytest.fixture(scope="session")
def clean_session(small_world, rig):
    traj = loop_trajectory(small_world.config, spacing=1.0)
    return simulate_session(small_world, rig, traj, APPEARANCE_PRESETS["clean"], NOISELESS, seed=1)


@pytest.fixture(scope="session")
def clean_map(clean_session):
    return build_base_map(clean_session)


# one line per acceptance criterion, filled in by test_acceptance and shown after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

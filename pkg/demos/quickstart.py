"""Simulate a drive, map it, then localize a second drive under a different appearance.

    python demos/quickstart.py
"""

from maptrack import build_base_map, run_sequence
from maptrack.evaluation import run_metrics
from maptrack.simulation import (APPEARANCE_PRESETS, NoiseConfig, WorldConfig, generate_world, loop_trajectory,
                                 make_rig, simulate_session)

world = generate_world(WorldConfig(loop_length=200.0, point_density=3.0), seed=0)
rig = make_rig("updrive")

mapping = simulate_session(world, rig, loop_trajectory(world.config), APPEARANCE_PRESETS["day"], seed=1)
m = build_base_map(mapping)
print(f"map: {len(m.landmarks)} landmarks, {len(m.vertices)} vertices")

# half a metre to the side, a different time of day
traj = loop_trajectory(world.config, start=0.3, lateral=0.5)
query = simulate_session(world, rig, traj, APPEARANCE_PRESETS["sunny"], NoiseConfig(), seed=2)
run = run_sequence(m, rig, query.frames)
met = run_metrics(m, query.frames, run)
print(f"recall {met.r_mt:.1f}%  median error {met.p_e_xyz[0]:.3f} m  "
      f"median rotation error {met.theta_e_xyz[0]:.3f} deg  landmarks/frame {met.obs_avg:.0f}")

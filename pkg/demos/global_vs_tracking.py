"""Prior-free global localization against map-tracking on a map built over several conditions.

    python demos/global_vs_tracking.py
"""

from dataclasses import replace

from maptrack import evaluation as ev
from maptrack.simulation import AppearanceModel

scn = ev.Scenario(world=replace(ev.Scenario().world, n_prototypes=16, intra_class_flip=0.01))
bench = ev.multi_session_map(scn, [AppearanceModel("overcast", 0.06, 0.15), AppearanceModel("dusk", 0.1, 0.3)])
query = ev.query_drive(bench, AppearanceModel("rain", 0.1, 0.1), seed=41)
met = ev.recall_comparison(bench.map, bench.rig, query.frames, gl_every=2)
print(ev.to_csv(["r_mt", "r_gl", "obs_avg"], [[met.r_mt, met.r_gl, met.obs_avg]]), end="")

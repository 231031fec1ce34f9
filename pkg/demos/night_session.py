"""A day-only map fails at night; folding in one night drive fixes that.

    python demos/night_session.py
"""

from dataclasses import replace

from maptrack import add_session, run_sequence
from maptrack import evaluation as ev
from maptrack.simulation import APPEARANCE_PRESETS

night = APPEARANCE_PRESETS["night"]
bench = ev.build_bench(ev.Scenario(), seed=0)
query = ev.query_drive(bench, night, seed=21)


def night_recall(m):
    return ev.run_metrics(m, query.frames, run_sequence(m, bench.rig, query.frames)).r_mt


print(f"day-only map:   night recall {night_recall(bench.map):5.1f}%")
# two laps: the drive passes the lit stretch twice, which pins the dark part between
drive = ev.mapping_drive(bench.world, replace(bench.scenario, laps=2.0), night, seed=31, start=0.25, lateral=-0.5)
m, report = add_session(bench.map, drive)
print(f"+ night session: {report.landmarks_added} new landmarks, {report.observations_appended} observations")
print(f"two-session map: night recall {night_recall(m):5.1f}%")

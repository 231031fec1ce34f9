"""Command-line entry point.

Payloads (JSON, CSV) go to stdout, human-readable logs to stderr. Exit codes:
0 success, 1 operational error, 2 usage error, 3 a ``report --check`` gate failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evaluation as ev
from .dataset import DatasetError, load_session, save_session
from .estimator import RobustLossConfig
from .landmark_map import MapFileError, load_map, save_map
from .localization import LocalizerConfig, RunLog, run_sequence
from .mapping import MappingConfig, MappingError, add_session, build_base_map
from .metrics import accuracy, recall
from .simulation import (APPEARANCE_PRESETS, NOISELESS, AppearanceModel, NoiseConfig, WorldConfig,
                         generate_world, loop_trajectory, make_rig, simulate_session)
from .tracking import TrackingConfig

log = logging.getLogger("maptrack")

STOCHASTIC = {"simulate", "localize", "sweep", "basin", "descriptor-study"}


class UsageError(Exception):
    pass


def _floats(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}")


def _pairs(s: str) -> list[tuple[int, float]]:
    out = []
    for item in s.split(","):
        try:
            d, r = item.split(":")
            out.append((int(d), float(r)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected delta:rho pairs, got {item!r}")
    return out


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, seed_required: bool) -> None:
    p.add_argument("--config", type=Path, help="JSON file of option values; flags override it")
    p.add_argument("--seed", type=int, default=None,
                   help="random seed" + (" (required)" if seed_required else ""))
    p.add_argument("--threads", type=int, default=1, help="worker processes; 1 gives bitwise-reproducible output")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")


def _tracking_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("map-tracking")
    g.add_argument("--delta", type=int, default=100, help="descriptor distance threshold in bits")
    g.add_argument("--rho", type=float, default=3.0, help="reprojection inlier threshold in pixels")
    g.add_argument("--search-radius", type=float, default=40.0, help="image-space matching radius in pixels")
    g.add_argument("--retrieval-radius", type=float, default=30.0, help="landmark retrieval radius in metres")
    g.add_argument("--min-inliers", type=int, default=10, help="inliers needed to count as localized")
    g.add_argument("--huber-k", type=float, default=2.0, help="Huber threshold on whitened residual norm")
    g.add_argument("--pixel-sigma-model", type=float, default=1.0, help="keypoint noise assumed by the estimator")
    g.add_argument("--lost-after", type=int, default=50, help="consecutive failures before re-bootstrapping")


def _scenario_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic world")
    g.add_argument("--loop-length", type=float, default=400.0)
    g.add_argument("--density", type=float, default=2.0, help="points per metre of road")
    g.add_argument("--bits", type=int, default=512, choices=(256, 512), help="descriptor length")
    g.add_argument("--prototypes", type=int, default=0, help="cluster descriptors around this many patterns")
    g.add_argument("--intra-class-flip", type=float, default=0.0)
    g.add_argument("--rig", default="updrive", choices=("updrive", "forward"))
    g.add_argument("--spacing", type=float, default=1.0, help="metres between frames")
    g.add_argument("--laps", type=float, default=1.0)
    g.add_argument("--pixel-sigma", type=float, default=0.5)
    g.add_argument("--descriptor-flip", type=float, default=0.03, help="per-observation bit flip rate")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maptrack", description="Map-tracking localization toolkit")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("simulate", help="write a synthetic session directory")
    _common(p, True)
    _scenario_args(p)
    p.add_argument("--out", type=Path, required=True, help="session directory to write")
    p.add_argument("--world-seed", type=int, default=0, help="seed of the world geometry and descriptors")
    p.add_argument("--appearance", default="day", help=f"preset: {', '.join(APPEARANCE_PRESETS)}")
    p.add_argument("--label", default=None, help="custom condition label (with --flip/--dropout)")
    p.add_argument("--flip", type=float, default=None, help="condition bit flip rate")
    p.add_argument("--dropout", type=float, default=None, help="condition dropout rate")
    p.add_argument("--start", type=float, default=0.0, help="arc-length offset of the first frame")
    p.add_argument("--lateral", type=float, default=0.0, help="lateral offset from the road centre")
    p.add_argument("--reverse", action="store_true", help="drive the loop in the opposite direction")
    p.add_argument("--noiseless", action="store_true", help="no pixel, descriptor, odometry or fix noise")
    p.add_argument("--hidden", type=str, default="", help="frame ranges with no visible points, e.g. 100-120")

    p = sub.add_parser("build-map", help="build a base map from a session with known poses")
    _common(p, False)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="map file to write")
    p.add_argument("--delta", type=int, default=100)
    p.add_argument("--search-radius", type=float, default=40.0)
    p.add_argument("--min-parallax", type=float, default=1.0, help="degrees")

    p = sub.add_parser("add-session", help="localize a session against a map and merge it in")
    _common(p, False)
    _tracking_args(p)
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="output map (default: overwrite --map)")
    p.add_argument("--report", type=Path, default=None, help="session report JSON path")

    p = sub.add_parser("localize", help="run map-tracking over a session")
    _common(p, True)
    _tracking_args(p)
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--log", type=Path, default=None, help="run log (JSON lines)")
    p.add_argument("--global", dest="with_global", action="store_true",
                   help="also evaluate the global-localization baseline")

    p = sub.add_parser("sweep", help="recall and accuracy over delta and rho")
    _common(p, True)
    _tracking_args(p)
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--deltas", type=_floats, default=list(ev.DELTA_GRID))
    p.add_argument("--rhos", type=_floats, default=list(ev.RHO_GRID))
    p.add_argument("--full-grid", action="store_true", help="Cartesian product instead of two axis sweeps")
    p.add_argument("--out", type=Path, default=None, help="CSV path (default stdout)")

    p = sub.add_parser("basin", help="bootstrap convergence under disturbed priors")
    _common(p, True)
    _tracking_args(p)
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--thresholds", type=_pairs, default=[(100, 3.0), (512, 80.0)], help="delta:rho pairs")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--yaw", type=_floats, default=[0, 5, 10, 20, 30], help="degrees")
    p.add_argument("--longitudinal", type=_floats, default=[0, 1, 3, 5, 10], help="metres")
    p.add_argument("--lateral", type=_floats, default=[0, 1, 3, 5, 10], help="metres")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("descriptor-study", help="compare descriptor lengths and a fragile variant")
    _common(p, True)
    _tracking_args(p)
    _scenario_args(p)
    p.add_argument("--query-flip", type=float, default=0.11, help="condition flip rate of the query drive")
    p.add_argument("--query-dropout", type=float, default=0.1)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("info", help="summarize a map file")
    _common(p, False)
    p.add_argument("--map", type=Path, required=True)

    p = sub.add_parser("report", help="metrics of a run log")
    _common(p, False)
    p.add_argument("--log", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True, help="session with reference poses")
    p.add_argument("--map", type=Path, default=None, help="map for vertex-relative accuracy")
    p.add_argument("--check", action="store_true", help="exit 3 when a gate below fails")
    p.add_argument("--min-recall", type=float, default=None)
    p.add_argument("--max-median-error", type=float, default=None)
    return ap


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _localizer_config(a) -> LocalizerConfig:
    t = TrackingConfig(a.delta, a.rho, a.search_radius, a.retrieval_radius, a.min_inliers)
    t.validate()
    return LocalizerConfig(tracking=t, loss=RobustLossConfig(a.huber_k, a.pixel_sigma_model),
                           lost_after=a.lost_after, gl_seed=a.seed if getattr(a, "seed", None) is not None else 0)


def _scenario(a) -> ev.Scenario:
    w = WorldConfig(loop_length=a.loop_length, point_density=a.density, descriptor_length=a.bits,
                    n_prototypes=a.prototypes, intra_class_flip=a.intra_class_flip)
    noise = NoiseConfig(pixel_sigma=a.pixel_sigma, descriptor_flip_rate=a.descriptor_flip)
    return ev.Scenario(world=w, rig=a.rig, spacing=a.spacing, laps=a.laps, noise=noise)


def _ranges(s: str) -> list[int]:
    out = []
    for part in filter(None, (x.strip() for x in s.split(","))):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _emit(text: str, path: Optional[Path]) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)
        log.info("wrote %s", path)


def _args_dict(a) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(a).items())
            if k not in ("config", "verbose")}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_simulate(a) -> int:
    scn = _scenario(a)
    world = generate_world(scn.world, a.world_seed)
    if a.flip is not None or a.dropout is not None:
        app = AppearanceModel(a.label or a.appearance, a.flip or 0.0, a.dropout or 0.0)
    else:
        if a.appearance not in APPEARANCE_PRESETS:
            raise UsageError(f"--appearance: unknown preset {a.appearance!r}")
        app = APPEARANCE_PRESETS[a.appearance]
        if a.label:
            app = replace(app, label=a.label)
    noise = NOISELESS if a.noiseless else scn.noise
    traj = loop_trajectory(world.config, a.spacing, a.laps, start=a.start, reverse=a.reverse, lateral=a.lateral)
    s = simulate_session(world, make_rig(a.rig), traj, app, noise, a.seed, _ranges(a.hidden))
    s.meta["config"] = _args_dict(a)
    save_session(s, a.out)
    print(json.dumps({"frames": len(s.frames), "points": len(world), "out": str(a.out)}))
    return 0


def cmd_build_map(a) -> int:
    s = load_session(a.dataset)
    m = build_base_map(s, cfg=MappingConfig(delta=a.delta, search_radius_px=a.search_radius,
                                           min_parallax_deg=a.min_parallax))
    save_map(m, a.out)
    print(json.dumps(m.info(), sort_keys=True))
    return 0


def cmd_add_session(a) -> int:
    m = load_map(a.map)
    s = load_session(a.dataset)
    cfg = _localizer_config(a)
    m, report = add_session(m, s, MappingConfig(delta=a.delta, search_radius_px=a.search_radius), cfg)
    save_map(m, a.out or a.map)
    d = report.to_dict()
    d["config"] = _args_dict(a)
    if a.report:
        a.report.write_text(json.dumps(d, indent=2, sort_keys=True))
    print(json.dumps({k: d[k] for k in ("session_id", "recall", "landmarks_added", "observations_appended")}))
    return 0


def _summary(m, frames, run: RunLog, gl=None) -> dict:
    out = {"frames": len(frames), "localized_frames": int(run.localized.sum())}
    if all(f.truth is not None for f in frames) and len(frames) >= 2:
        met = ev.run_metrics(m, frames, run, gl)
        out.update(met.to_dict())
        out["false_positive_frames"] = len(ev.false_positive_frames(run, frames))
    return out


def cmd_localize(a) -> int:
    m = load_map(a.map)
    s = load_session(a.dataset)
    cfg = _localizer_config(a)
    run = run_sequence(m, s.rig, s.frames, cfg)
    run.config = {"localizer": cfg.to_dict(), "args": _args_dict(a)}
    if a.log:
        a.log.write_text(run.to_jsonl())
    gl = None
    if a.with_global:
        _, gl = ev.global_recall(m, s.rig, s.frames, cfg)
    print(ev.to_json(_summary(m, s.frames, run, gl)))
    return 0


def cmd_sweep(a) -> int:
    m = load_map(a.map)
    s = load_session(a.dataset)
    rows = ev.sweep_thresholds(m, s.rig, s.frames, [int(d) for d in a.deltas], a.rhos, _localizer_config(a),
                               a.full_grid, a.threads)
    _emit(ev.to_csv(ev.SWEEP_HEADER, rows), a.out)
    return 0


def cmd_basin(a) -> int:
    m = load_map(a.map)
    s = load_session(a.dataset)
    mags = {"yaw": a.yaw, "longitudinal": a.longitudinal, "lateral": a.lateral}
    rows = ev.convergence_basin(m, s.rig, s.frames, a.thresholds, mags, a.trials, _localizer_config(a),
                                a.seed, a.threads)
    _emit(ev.to_csv(ev.BASIN_HEADER, rows), a.out)
    return 0


def cmd_descriptor_study(a) -> int:
    scn = _scenario(a)
    query = AppearanceModel("query", a.query_flip, a.query_dropout)
    rows = ev.descriptor_study(scn, query, seed=a.seed, base=_localizer_config(a), threads=a.threads)
    _emit(ev.to_csv(ev.DESCRIPTOR_HEADER, rows), a.out)
    return 0


def cmd_info(a) -> int:
    print(json.dumps(load_map(a.map).info(), indent=2, sort_keys=True))
    return 0


def cmd_report(a) -> int:
    run = RunLog.from_jsonl(a.log.read_text())
    s = load_session(a.dataset)
    if len(run) != len(s.frames):
        raise DatasetError(f"run log has {len(run)} records, dataset has {len(s.frames)} frames")
    pos = ev.truth_positions(s.frames)
    out = {"frames": len(run), "recall": recall(pos, run.localized),
           "obs_avg": float(np.mean(run.inlier_counts)),
           "false_positive_frames": len(ev.false_positive_frames(run, s.frames))}
    if a.map is not None:
        acc = accuracy(run.poses(), [f.truth for f in s.frames], load_map(a.map), run.localized)
        out["accuracy"] = None if acc is None else acc.to_dict()
    failed = []
    if a.min_recall is not None and out["recall"] < a.min_recall:
        failed.append("min_recall")
    if a.max_median_error is not None:
        acc = out.get("accuracy")
        if acc is None or acc["p_e_xyz"][0] > a.max_median_error:
            failed.append("max_median_error")
    out["failed_gates"] = failed
    print(json.dumps(out, indent=2, sort_keys=True))
    return 3 if a.check and failed else 0


COMMANDS = {
    "simulate": cmd_simulate, "build-map": cmd_build_map, "add-session": cmd_add_session,
    "localize": cmd_localize, "sweep": cmd_sweep, "basin": cmd_basin,
    "descriptor-study": cmd_descriptor_study, "info": cmd_info, "report": cmd_report,
}


def _find_config(argv: Sequence[str]) -> tuple[Optional[str], Optional[str]]:
    """(command, config path) located before full parsing."""
    command = next((x for x in argv if x in COMMANDS), None)
    path = None
    for i, x in enumerate(argv):
        if x == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif x.startswith("--config="):
            path = x.split("=", 1)[1]
    return command, path


def _apply_config(sub: argparse.ArgumentParser, path: Path) -> None:
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"--config: cannot read {path}: {e}")
    if not isinstance(cfg, dict):
        raise UsageError("--config: expected a JSON object")
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in cfg.items():
        dest = k.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"--config: unknown option {k!r}")
        act = known[dest]
        if isinstance(v, str) and act.type is not None:
            v = act.type(v)
        elif isinstance(v, list) and act.type in (_floats, _pairs):
            v = act.type(",".join(str(x) if not isinstance(x, list) else ":".join(map(str, x)) for x in v))
        defaults[dest] = v
        act.required = False
    sub.set_defaults(**defaults)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        command, cfg_path = _find_config(argv)
        if command is not None and cfg_path is not None:
            sub = parser._subparsers._group_actions[0].choices[command]
            _apply_config(sub, Path(cfg_path))
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            return int(e.code or 0)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command in STOCHASTIC and args.seed is None:
            raise UsageError(f"{args.command}: --seed is required")
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"maptrack: error: {e}", file=sys.stderr)
        return 2
    except (MapFileError, DatasetError, MappingError, OSError, ValueError, KeyError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())

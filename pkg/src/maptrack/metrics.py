"""Recall and accuracy metrics computed from run logs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import geometry as geo
from .geometry import Pose
from .landmark_map import LandmarkMap


def recall(positions: np.ndarray, localized: Sequence[bool]) -> float:
    """Percent of travelled distance covered by localized segments.

    Segment ``i -> i+1`` counts when timestep ``i`` is localized.
    """
    p = np.asarray(positions, dtype=float)
    flags = np.asarray(localized, dtype=bool)
    if len(p) != len(flags):
        raise ValueError("positions and localized flags differ in length")
    if len(p) < 2:
        raise ValueError("recall needs at least two timesteps")
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    total = seg.sum()
    if total <= 0:
        raise ValueError("zero distance travelled")
    # the ratio can round a hair past 1 when every segment counts
    return float(min(100.0, 100.0 * seg[flags[:-1]].sum() / total))


@dataclass
class ErrorQuantiles:
    n: int
    xyz: tuple[float, float]   # (median, p90) metres
    xy: tuple[float, float]
    y: tuple[float, float]
    rot_deg: tuple[float, float]

    def to_dict(self) -> dict:
        return {"n": self.n, "p_e_xyz": list(self.xyz), "p_e_xy": list(self.xy),
                "p_e_y": list(self.y), "theta_e_xyz": list(self.rot_deg)}


def _q(v: np.ndarray) -> tuple[float, float]:
    return float(np.median(v)), float(np.percentile(v, 90))


def relative_errors(estimates: Sequence[Optional[Pose]], references: Sequence[Pose], m: LandmarkMap,
                    localized: Sequence[bool]) -> np.ndarray:
    """Per-localized-timestep ``(|t|, |t_xy|, |t_y|, angle_deg)`` of the vertex-relative error.

    Both the estimate and the reference are expressed relative to the map
    vertex nearest to the reference pose; the error is the discrepancy between
    the two relative transforms, with translation in the reference body frame.
    """
    rows = []
    for est, ref, ok in zip(estimates, references, localized):
        if not ok or est is None:
            continue
        V = m.nearest_vertex(ref.translation).pose
        rel_est = geo.compose(est.inverse(), V)
        rel_ref = geo.compose(ref.inverse(), V)
        E = geo.compose(rel_est.inverse(), rel_ref)
        # translation of E lives in the vertex frame; report it in the reference body frame
        t = ref.R.T @ (V.R @ E.translation)
        rows.append((np.linalg.norm(t), np.linalg.norm(t[:2]), abs(t[1]), np.degrees(geo.rotation_angle(E))))
    return np.array(rows, dtype=float).reshape(-1, 4)


def accuracy(estimates: Sequence[Optional[Pose]], references: Sequence[Pose], m: LandmarkMap,
             localized: Sequence[bool]) -> Optional[ErrorQuantiles]:
    """Median and 90th percentile errors; None when nothing was localized."""
    e = relative_errors(estimates, references, m, localized)
    if len(e) == 0:
        return None
    return ErrorQuantiles(len(e), _q(e[:, 0]), _q(e[:, 1]), _q(e[:, 2]), _q(e[:, 3]))

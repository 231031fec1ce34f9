"""Map-tracking: locality- and appearance-gated 2D-3D matching against the map."""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .features import DescriptorLengthError, hamming, nbytes_for
from .geometry import CameraModel, Pose, project_points
from .landmark_map import DEFAULT_RETRIEVAL_RADIUS, LandmarkMap


class Status(str, Enum):
    CANDIDATE = "candidate"
    INLIER = "inlier"
    OUTLIER = "outlier"


@dataclass(frozen=True, eq=False)
class LocalizationConstraint:
    landmark_id: int
    camera_index: int
    keypoint: np.ndarray           # observed pixel
    landmark_position: np.ndarray  # map frame
    descriptor_distance: int
    keypoint_index: int = -1
    status: Status = Status.CANDIDATE

    def with_status(self, status: Status) -> "LocalizationConstraint":
        return replace(self, status=status)


@dataclass(frozen=True)
class TrackingConfig:
    delta: int = 100              # descriptor distance threshold, bits
    rho: float = 3.0              # reprojection threshold, px
    search_radius_px: float = 40.0
    retrieval_radius_m: float = DEFAULT_RETRIEVAL_RADIUS
    min_inliers: int = 10

    def validate(self, descriptor_length: int | None = None) -> None:
        if self.delta < 0 or self.rho <= 0 or self.search_radius_px <= 0 or self.retrieval_radius_m <= 0:
            raise ValueError("tracking thresholds must be positive")
        if self.min_inliers < 1:
            raise ValueError("min_inliers must be at least 1")
        if descriptor_length is not None and self.delta > descriptor_length:
            raise ValueError(f"delta {self.delta} exceeds descriptor length {descriptor_length}")


def _match_camera(cam_index: int, cam: CameraModel, kps, prior: Pose, ids, positions, descriptors,
                  cfg: TrackingConfig) -> list[LocalizationConstraint]:
    if len(kps) == 0 or len(ids) == 0:
        return []
    uv, valid = project_points(cam, prior, positions)
    rows = np.flatnonzero(valid)
    if len(rows) == 0:
        return []
    diff = kps.positions[:, None, :] - uv[None, rows, :]
    pix = np.sqrt((diff ** 2).sum(axis=-1))
    ki, lj = np.nonzero(pix < cfg.search_radius_px)
    if len(ki) == 0:
        return []
    lrows = rows[lj]
    ham = hamming(kps.descriptors[ki], descriptors[lrows])
    ok = ham <= cfg.delta
    ki, lrows, ham = ki[ok], lrows[ok], ham[ok]
    if len(ki) == 0:
        return []
    # greedy one-to-one: ascending distance, then landmark id, then keypoint index
    order = np.lexsort((ki, ids[lrows], ham))
    used_k, used_l = set(), set()
    out = []
    for o in order:
        k, r = int(ki[o]), int(lrows[o])
        if k in used_k or r in used_l:
            continue
        used_k.add(k)
        used_l.add(r)
        out.append(LocalizationConstraint(int(ids[r]), cam_index, kps.positions[k].copy(),
                                          positions[r].copy(), int(ham[o]), k))
    out.sort(key=lambda c: c.keypoint_index)
    return out


def match_frame(m: LandmarkMap, rig: Sequence[CameraModel], keypoints: Sequence, prior: Pose,
                cfg: TrackingConfig = TrackingConfig()) -> list[LocalizationConstraint]:
    """Form 2D-3D constraints between current keypoints and map landmarks.

    ``keypoints[c]`` is the :class:`~maptrack.features.KeypointSet` of camera
    ``c`` of ``rig``. Output is sorted by camera index, then keypoint index.
    """
    nb = nbytes_for(m.descriptor_length)
    for kp in keypoints:
        if len(kp) and kp.descriptors.shape[-1] != nb:
            raise DescriptorLengthError(
                f"keypoint descriptors have {kp.descriptors.shape[-1] * 8} bits, map uses {m.descriptor_length}")
    a = m.arrays
    rows = m.nearby_landmark_rows(prior.translation, cfg.retrieval_radius_m)
    ids, pos, desc = a.ids[rows], a.positions[rows], a.descriptors[rows]
    out = []
    for c, (cam, kps) in enumerate(zip(rig, keypoints)):
        out.extend(_match_camera(c, cam, kps, prior, ids, pos, desc, cfg))
    return out


def reprojection_errors(constraints: Sequence[LocalizationConstraint], rig: Sequence[CameraModel],
                        T_MB: Pose) -> np.ndarray:
    """Pixel reprojection error norm per constraint; inf when not projectable."""
    err = np.full(len(constraints), np.inf)
    by_cam: dict[int, list[int]] = {}
    for i, c in enumerate(constraints):
        by_cam.setdefault(c.camera_index, []).append(i)
    for ci, idx in by_cam.items():
        cam = rig[ci]
        P = np.array([constraints[i].landmark_position for i in idx])
        uv, _ = project_points(cam, T_MB, P)
        p_C = (cam.T_BC.inverse() @ T_MB.inverse()).act(P)
        kp = np.array([constraints[i].keypoint for i in idx])
        e = np.linalg.norm(kp - uv, axis=1)
        e[p_C[:, 2] <= 1e-9] = np.inf
        err[idx] = e
    return err


def classify_constraints(constraints: Sequence[LocalizationConstraint], rig: Sequence[CameraModel],
                         T_MB: Pose, cfg: TrackingConfig = TrackingConfig()):
    """Split constraints at the reprojection threshold ``cfg.rho``.

    Returns ``(inliers, outliers, localized)`` where ``localized`` applies the
    minimum-inlier rule.
    """
    err = reprojection_errors(constraints, rig, T_MB)
    inliers, outliers = [], []
    for c, e in zip(constraints, err):
        if e <= cfg.rho:
            inliers.append(c.with_status(Status.INLIER))
        else:
            outliers.append(c.with_status(Status.OUTLIER))
    return inliers, outliers, len(inliers) >= cfg.min_inliers

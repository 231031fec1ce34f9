"""Information-form two-pose estimator fusing odometry with map-tracking constraints.

Each timestep optimises the window ``(T_MB,t, T_MB,t+1)`` under three kinds
of terms: a Gaussian prior on the older pose, the odometry link between the
two, and Huber-robust reprojection terms on the newer pose. The older pose and
the inlier reprojection terms are then folded into the prior of the newer
pose by a Schur complement.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import geometry as geo
from .geometry import CameraModel, Pose
from .tracking import LocalizationConstraint, Status, TrackingConfig, classify_constraints

_EPS_Z = 1e-9


@dataclass(frozen=True, eq=False)
class FilterState:
    pose: Pose
    information: np.ndarray   # 6x6, tangent space at ``pose`` (right perturbation)
    timestamp: float = 0.0

    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.information)


@dataclass(frozen=True, eq=False)
class OdometryMeasurement:
    delta: Pose              # body_t -> body_t+1
    covariance: np.ndarray   # 6x6 in the body frame of the earlier pose

    @property
    def information(self) -> np.ndarray:
        return np.linalg.inv(self.covariance)


@dataclass(frozen=True)
class RobustLossConfig:
    huber_k: float = 2.0
    pixel_sigma: float = 1.0


@dataclass(frozen=True)
class SolverConfig:
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    max_iterations: int = 20
    max_escalations: int = 10
    rel_tol: float = 1e-9
    step_tol: float = 1e-10
    jitter: float = 1e-9


def odometry_covariance(rot_sigma: float, trans_sigma: float) -> np.ndarray:
    return np.diag([rot_sigma ** 2] * 3 + [trans_sigma ** 2] * 3)


def prior_information(pos_sigma: float = 3.0, rot_sigma_deg: float = 10.0) -> np.ndarray:
    rs = np.radians(rot_sigma_deg)
    return np.diag([1 / rs ** 2] * 3 + [1 / pos_sigma ** 2] * 3)


def propagate(state: FilterState, odo: OdometryMeasurement) -> Pose:
    """Forward-propagate the state with an odometry increment."""
    return geo.compose(state.pose, odo.delta)


# --------------------------------------------------------------------------
# reprojection terms
# --------------------------------------------------------------------------

def reprojection_terms(T_MB: Pose, rig: Sequence[CameraModel], cam_idx: np.ndarray,
                       keypoints: np.ndarray, points: np.ndarray, jacobians: bool = True):
    """Residuals ``keypoint - projection`` and their 2x6 Jacobians.

    Vectorised over N constraints. Returns ``(r (N,2), J (N,2,6), valid (N,))``;
    rows with the landmark at or behind the camera plane are flagged invalid.
    """
    n = len(cam_idx)
    r = np.zeros((n, 2))
    J = np.zeros((n, 2, 6))
    valid = np.zeros(n, dtype=bool)
    if n == 0:
        return r, J, valid
    p_B = T_MB.inverse().act(points)
    for ci in np.unique(cam_idx):
        sel = np.flatnonzero(cam_idx == ci)
        cam = rig[ci]
        T_CB = cam.T_BC.inverse()
        R_CB = T_CB.R
        pb = p_B[sel]
        pc = pb @ R_CB.T + T_CB.translation
        x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
        ok = z > _EPS_Z
        zs = np.where(ok, z, 1.0)
        iz = 1.0 / zs
        u = cam.fx * x * iz + cam.cx
        v = cam.fy * y * iz + cam.cy
        r[sel, 0] = keypoints[sel, 0] - u
        r[sel, 1] = keypoints[sel, 1] - v
        valid[sel] = ok
        if not jacobians:
            continue
        Jp = np.zeros((len(sel), 2, 3))
        Jp[:, 0, 0] = cam.fx * iz
        Jp[:, 0, 2] = -cam.fx * x * iz * iz
        Jp[:, 1, 1] = cam.fy * iz
        Jp[:, 1, 2] = -cam.fy * y * iz * iz
        # d p_B / d xi for T_MB <- T_MB exp(xi): [hat(p_B), -I]
        D = np.zeros((len(sel), 3, 6))
        D[:, :, :3] = geo._batch_hat(pb)
        D[:, :, 3:] = -np.eye(3)
        J[sel] = -np.matmul(np.matmul(Jp, R_CB), D)
    r[~valid] = 0.0
    J[~valid] = 0.0
    return r, J, valid


def reprojection_residual_and_jacobian(constraint: LocalizationConstraint, T_MB: Pose, cam: CameraModel):
    """Single-constraint form of :func:`reprojection_terms`.

    Returns ``(residual, jacobian, valid)``.
    """
    r, J, valid = reprojection_terms(T_MB, [cam], np.zeros(1, dtype=np.int64),
                                     np.asarray(constraint.keypoint, dtype=float).reshape(1, 2),
                                     np.asarray(constraint.landmark_position, dtype=float).reshape(1, 3))
    return r[0], J[0], bool(valid[0])


def huber_cost(e: np.ndarray, k: float) -> np.ndarray:
    """Robust cost of whitened residual norms; equals e**2 inside ``k``."""
    return np.where(e <= k, e * e, 2.0 * k * e - k * k)


# --------------------------------------------------------------------------
# window problem
# --------------------------------------------------------------------------

@dataclass
class PriorTerm:
    index: int
    mean: Pose
    information: np.ndarray


@dataclass
class OdometryTerm:
    i: int
    j: int
    delta: Pose
    information: np.ndarray


@dataclass
class ReprojectionTerms:
    index: int
    cam_idx: np.ndarray
    keypoints: np.ndarray
    points: np.ndarray
    robust: bool = True

    @classmethod
    def from_constraints(cls, index: int, constraints: Sequence[LocalizationConstraint], robust=True):
        n = len(constraints)
        return cls(index,
                   np.array([c.camera_index for c in constraints], dtype=np.int64),
                   np.array([c.keypoint for c in constraints], dtype=float).reshape(n, 2),
                   np.array([c.landmark_position for c in constraints], dtype=float).reshape(n, 3),
                   robust)


@dataclass
class Window:
    """A small factor graph over ``n_poses`` SE(3) variables."""

    rig: Sequence[CameraModel]
    n_poses: int
    priors: list = field(default_factory=list)
    odometry: list = field(default_factory=list)
    reprojection: list = field(default_factory=list)
    loss: RobustLossConfig = RobustLossConfig()

    def _loc_whitened(self, term: ReprojectionTerms, pose: Pose, jacobians: bool = True):
        r, J, valid = reprojection_terms(pose, self.rig, term.cam_idx, term.keypoints, term.points, jacobians)
        s = self.loss.pixel_sigma
        e = np.linalg.norm(r, axis=1) / s
        if term.robust:
            cost = huber_cost(e, self.loss.huber_k)
            w = np.where(e <= self.loss.huber_k, 1.0, self.loss.huber_k / np.maximum(e, 1e-300))
        else:
            cost = e * e
            w = np.ones_like(e)
        cost = np.where(valid, cost, 0.0)
        w = np.where(valid, w, 0.0) / (s * s)
        return r, J, cost, w

    def cost(self, poses: Sequence[Pose]) -> float:
        total = 0.0
        for p in self.priors:
            r = geo.box_minus(poses[p.index], p.mean)
            total += r @ p.information @ r
        for o in self.odometry:
            r = geo.log(geo.compose(o.delta.inverse(), geo.compose(poses[o.i].inverse(), poses[o.j])))
            total += r @ o.information @ r
        for t in self.reprojection:
            _, _, c, _ = self._loc_whitened(t, poses[t.index], jacobians=False)
            total += float(c.sum())
        return float(total)

    def linearize(self, poses: Sequence[Pose], robust: bool | None = None):
        """Return ``(cost, H, g)`` of the Gauss-Newton model (``cost ~ r' W r``)."""
        n = 6 * self.n_poses
        H = np.zeros((n, n))
        g = np.zeros(n)
        total = 0.0
        for p in self.priors:
            r = geo.box_minus(poses[p.index], p.mean)
            J = geo.right_jacobian_inv(r)
            s = slice(6 * p.index, 6 * p.index + 6)
            JW = J.T @ p.information
            H[s, s] += JW @ J
            g[s] += JW @ r
            total += r @ p.information @ r
        for o in self.odometry:
            Ti, Tj = poses[o.i], poses[o.j]
            r = geo.log(geo.compose(o.delta.inverse(), geo.compose(Ti.inverse(), Tj)))
            Jr = geo.right_jacobian_inv(r)
            Jj = Jr
            Ji = -Jr @ geo.adjoint(geo.compose(Tj.inverse(), Ti))
            si = slice(6 * o.i, 6 * o.i + 6)
            sj = slice(6 * o.j, 6 * o.j + 6)
            for sa, Ja in ((si, Ji), (sj, Jj)):
                JW = Ja.T @ o.information
                g[sa] += JW @ r
                for sb, Jb in ((si, Ji), (sj, Jj)):
                    H[sa, sb] += JW @ Jb
            total += r @ o.information @ r
        for t in self.reprojection:
            if robust is not None and t.robust != robust:
                t = ReprojectionTerms(t.index, t.cam_idx, t.keypoints, t.points, robust)
            r, J, c, w = self._loc_whitened(t, poses[t.index])
            s = slice(6 * t.index, 6 * t.index + 6)
            Jw = J * w[:, None, None]
            H[s, s] += Jw.reshape(-1, 6).T @ J.reshape(-1, 6)
            g[s] += Jw.reshape(-1, 6).T @ r.reshape(-1)
            total += float(c.sum())
        return total, H, g


@dataclass
class SolveResult:
    poses: list
    cost: float
    iterations: int
    diverged: bool
    costs: list


def levenberg_marquardt(window: Window, poses: Sequence[Pose], cfg: SolverConfig = SolverConfig()) -> SolveResult:
    x = list(poses)
    cost, H, g = window.linearize(x)
    history = [cost]
    lam = cfg.lambda_init
    iterations = 0
    diverged = not np.isfinite(cost)
    n = len(g)
    while not diverged and iterations < cfg.max_iterations:
        accepted = False
        predicted = None
        for _ in range(cfg.max_escalations):
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-9))
            try:
                dx = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= cfg.lambda_up
                continue
            if predicted is None:
                predicted = -(g @ dx) - 0.5 * dx @ H @ dx
            xn = [geo.box_plus(x[i], dx[6 * i:6 * i + 6]) for i in range(n // 6)]
            cn = window.cost(xn)
            if np.isfinite(cn) and cn < cost:
                accepted = True
                break
            lam *= cfg.lambda_up
        if not accepted:
            # stalled: a divergence only if the very first step promised real progress
            diverged = iterations == 0 and predicted is not None and predicted > 1e-3 * max(cost, 1.0)
            break
        iterations += 1
        decrease = cost - cn
        x = xn
        cost, H, g = window.linearize(x)
        history.append(cost)
        lam = max(lam * cfg.lambda_down, 1e-12)
        if decrease <= cfg.rel_tol * max(history[-2], 1e-300) or np.linalg.norm(dx) < cfg.step_tol:
            break
    return SolveResult(x, cost, iterations, diverged, history)


def marginalize_information(H: np.ndarray, n_eliminate: int = 6, jitter: float = 1e-9):
    """Schur complement eliminating the first ``n_eliminate`` variables.

    Returns ``(information, jitter_applied)``.
    """
    a = slice(0, n_eliminate)
    b = slice(n_eliminate, None)
    Haa, Hab, Hbb = H[a, a], H[a, b], H[b, b]
    jittered = False
    try:
        np.linalg.cholesky(Haa)
        X = np.linalg.solve(Haa, Hab)
    except np.linalg.LinAlgError:
        jittered = True
        X = np.linalg.solve(Haa + jitter * np.eye(n_eliminate), Hab)
    info = Hbb - Hab.T @ X
    return 0.5 * (info + info.T), jittered


def marginalize(window: Window, poses: Sequence[Pose], timestamp: float = 0.0,
                cfg: SolverConfig = SolverConfig()):
    """Fold the older pose and all reprojection terms into a prior on the newest pose.

    Linearises non-robustly at ``poses``. Returns ``(FilterState, jitter_applied)``.
    """
    _, H, _ = window.linearize(poses, robust=False)
    if window.n_poses == 1:
        return FilterState(poses[0], 0.5 * (H + H.T), timestamp), False
    info, jittered = marginalize_information(H, 6 * (window.n_poses - 1), cfg.jitter)
    return FilterState(poses[-1], info, timestamp), jittered


# --------------------------------------------------------------------------
# update
# --------------------------------------------------------------------------

@dataclass
class UpdateResult:
    state: FilterState
    inliers: list
    outliers: list
    localized: bool
    iterations: int
    cost: float
    diverged: bool = False
    jittered: bool = False


def _robust_then_refine(window_factory, x0, constraints, rig, track_cfg: TrackingConfig,
                        loss: RobustLossConfig, solver: SolverConfig, loc_index: int):
    # robust solve on all constraints, then classify, then non-robust re-solve on inliers
    win = window_factory()
    iters = 0
    x = list(x0)
    if constraints:
        win.reprojection.append(ReprojectionTerms.from_constraints(loc_index, constraints, robust=True))
        res = levenberg_marquardt(win, x, solver)
        if res.diverged:
            return None
        x, iters = res.poses, res.iterations
    inliers, outliers, _ = classify_constraints(constraints, rig, x[loc_index], track_cfg)
    win = window_factory()
    if inliers:
        win.reprojection.append(ReprojectionTerms.from_constraints(loc_index, inliers, robust=False))
    res = levenberg_marquardt(win, x, solver)
    if res.diverged:
        return None
    return win, res.poses, inliers, outliers, iters + res.iterations, res.cost


def update(state: FilterState, prior_pose: Pose, constraints: Sequence[LocalizationConstraint],
           odo: OdometryMeasurement, rig: Sequence[CameraModel],
           track_cfg: TrackingConfig = TrackingConfig(), loss: RobustLossConfig = RobustLossConfig(),
           solver: SolverConfig = SolverConfig(), timestamp: float | None = None) -> UpdateResult:
    """One filter step over the window (previous pose, current pose)."""
    ts = state.timestamp if timestamp is None else timestamp

    def factory():
        return Window(rig, 2, [PriorTerm(0, state.pose, state.information)],
                      [OdometryTerm(0, 1, odo.delta, odo.information)], [], loss)

    out = _robust_then_refine(factory, [state.pose, prior_pose], list(constraints), rig,
                              track_cfg, loss, solver, 1)
    diverged = out is None
    if diverged:
        # roll back to dead reckoning; the odometry-only marginal grows the covariance by Q
        win, poses = factory(), [state.pose, prior_pose]
        inliers, outliers, iters, cost = [], [c.with_status(Status.OUTLIER) for c in constraints], 0, win.cost(poses)
    else:
        win, poses, inliers, outliers, iters, cost = out
    new_state, jittered = marginalize(win, poses, ts, solver)
    localized = (not diverged) and len(inliers) >= track_cfg.min_inliers
    return UpdateResult(new_state, inliers, outliers, localized, iters, cost, diverged, jittered)


def solve_single_pose(prior_pose: Pose, prior_info: np.ndarray, constraints: Sequence[LocalizationConstraint],
                      rig: Sequence[CameraModel], track_cfg: TrackingConfig = TrackingConfig(),
                      loss: RobustLossConfig = RobustLossConfig(), solver: SolverConfig = SolverConfig(),
                      initial: Pose | None = None, timestamp: float = 0.0) -> UpdateResult:
    """Pose-only variant used for bootstrapping: a prior plus reprojection terms."""

    def factory():
        return Window(rig, 1, [PriorTerm(0, prior_pose, prior_info)], [], [], loss)

    x0 = [initial if initial is not None else prior_pose]
    out = _robust_then_refine(factory, x0, list(constraints), rig, track_cfg, loss, solver, 0)
    if out is None:
        st = FilterState(prior_pose, prior_info, timestamp)
        return UpdateResult(st, [], list(constraints), False, 0, float("nan"), True)
    win, poses, inliers, outliers, iters, cost = out
    st, _ = marginalize(win, poses, timestamp, solver)
    return UpdateResult(st, inliers, outliers, len(inliers) >= track_cfg.min_inliers, iters, cost)

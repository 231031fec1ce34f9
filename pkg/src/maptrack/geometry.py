"""Rigid-body poses, camera projection and multi-view triangulation.

Rotations are unit quaternions stored as (w, x, y, z), Hamilton convention.
A pose ``T_AB`` maps points expressed in frame B into frame A::

    p_A = R_AB @ p_B + t_AB

Tangent vectors are 6-vectors ordered (rotation, translation) and are applied
on the right: ``T @ exp(xi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

Z_MIN = 0.1  # near plane in metres
MIN_PARALLAX_DEG = 1.0

_SMALL = 1e-7


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(w) @ v == cross(w, v)."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def _batch_hat(w: np.ndarray) -> np.ndarray:
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


# --------------------------------------------------------------------------
# quaternions
# --------------------------------------------------------------------------

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError("quaternion has zero or non-finite norm")
    if abs(n - 1.0) > 1e-15:  # leave already-unit input untouched so round trips are exact
        q = q / n
    # canonical hemisphere keeps log() on the short arc
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method, branch on the largest diagonal term
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def so3_exp_quat(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    half = 0.5 * theta
    if theta < _SMALL:
        # sin(x/2)/x series
        k = 0.5 - theta * theta / 48.0
    else:
        k = np.sin(half) / theta
    return quat_normalize(np.concatenate([[np.cos(half)], k * np.asarray(w, dtype=float)]))


def so3_log_quat(q: np.ndarray) -> np.ndarray:
    w = q[0]
    v = np.asarray(q[1:])
    if w < 0:
        w, v = -w, -v
    n = np.linalg.norm(v)
    if n < _SMALL:
        # 2*atan2(n, w)/n series around n = 0
        return (2.0 / w - 2.0 * n * n / (3.0 * w ** 3)) * v
    return (2.0 * np.arctan2(n, w) / n) * v


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    t2 = theta * theta
    return (np.eye(3) + (1 - np.cos(theta)) / t2 * W
            + (theta - np.sin(theta)) / (t2 * theta) * W @ W)


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    t2 = theta * theta
    # theta*sin/(2(1-cos)) written as (theta/2)cot(theta/2), which stays accurate near pi
    half = 0.5 * theta
    c = (1.0 / t2) * (1.0 - half / np.tan(half))
    return np.eye(3) - 0.5 * W + c * W @ W


# --------------------------------------------------------------------------
# SE(3)
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Element of SE(3); immutable."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(self.rotation)
        t = np.array(self.translation, dtype=float).reshape(3)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "_R", None)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "Pose":
        return cls(matrix_to_quat(np.asarray(R, dtype=float)), t)

    @classmethod
    def from_xyz_rpy(cls, x=0.0, y=0.0, z=0.0, roll=0.0, pitch=0.0, yaw=0.0) -> "Pose":
        """Build from a position and ZYX Euler angles (radians)."""
        qz = so3_exp_quat(np.array([0.0, 0.0, yaw]))
        qy = so3_exp_quat(np.array([0.0, pitch, 0.0]))
        qx = so3_exp_quat(np.array([roll, 0.0, 0.0]))
        return cls(quat_multiply(quat_multiply(qz, qy), qx), [x, y, z])

    @property
    def R(self) -> np.ndarray:
        R = self._R
        if R is None:
            R = quat_to_matrix(self.rotation)
            R.setflags(write=False)
            object.__setattr__(self, "_R", R)
        return R

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q, -(self.R.T @ self.translation))

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def act(self, p: np.ndarray) -> np.ndarray:
        """Transform point(s) of shape (3,) or (N, 3)."""
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.translation

    def yaw(self) -> float:
        R = self.R
        return float(np.arctan2(R[1, 0], R[0, 0]))

    def __repr__(self) -> str:
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=4)
        return f"Pose(q={q}, t={t})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def as_array(self) -> np.ndarray:
        """7-vector (qw, qx, qy, qz, tx, ty, tz)."""
        return np.concatenate([self.rotation, self.translation])

    @classmethod
    def from_array(cls, a) -> "Pose":
        a = np.asarray(a, dtype=float)
        return cls(a[:4], a[4:7])


def compose(a: Pose, b: Pose) -> Pose:
    """``a @ b``: maps b's source frame into a's target frame."""
    q = quat_multiply(a.rotation, b.rotation)
    return Pose(q, a.R @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def translate(x: float, y: float, z: float) -> Pose:
    return Pose(translation=[x, y, z])


def _se3_V(w: np.ndarray) -> np.ndarray:
    return so3_left_jacobian(w)


def exp(xi) -> Pose:
    """Exponential map of a twist (wx, wy, wz, vx, vy, vz)."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    return Pose(so3_exp_quat(w), _se3_V(w) @ v)


def log(p: Pose) -> np.ndarray:
    """Logarithm map; inverse of :func:`exp` for rotation angles below pi."""
    w = so3_log_quat(p.rotation)
    v = so3_left_jacobian_inv(w) @ p.translation
    return np.concatenate([w, v])


def adjoint(p: Pose) -> np.ndarray:
    """6x6 adjoint with ``p @ exp(xi) @ p^-1 == exp(adjoint(p) @ xi)``."""
    R = p.R
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[3:, :3] = hat(p.translation) @ R
    return A


def _se3_Q(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    # off-diagonal block of the SE(3) left Jacobian
    theta = np.linalg.norm(w)
    W = hat(w)
    V = hat(v)
    WV = W @ V
    VW = V @ W
    WVW = WV @ W
    if theta < 1e-4:
        return (0.5 * V + (WV + VW + WVW) / 6.0
                - (W @ WV + VW @ W - 3.0 * WVW) / 24.0
                - (WVW @ W + W @ WVW) / 120.0)
    t2 = theta * theta
    s, c = np.sin(theta), np.cos(theta)
    a = (theta - s) / (t2 * theta)
    b = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2)
    d = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta)
    return (0.5 * V + a * (WV + VW + WVW)
            + b * (W @ WV + VW @ W - 3.0 * WVW)
            + d * (WVW @ W + W @ WVW))


def left_jacobian(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    J = np.zeros((6, 6))
    Jw = so3_left_jacobian(w)
    J[:3, :3] = Jw
    J[3:, 3:] = Jw
    J[3:, :3] = _se3_Q(w, v)
    return J


def right_jacobian(xi) -> np.ndarray:
    return left_jacobian(-np.asarray(xi, dtype=float))


def right_jacobian_inv(xi) -> np.ndarray:
    """d log(X exp(d)) / d d at d = 0, where xi = log(X)."""
    xi = np.asarray(xi, dtype=float)
    if np.linalg.norm(xi) < 1e-12:
        return np.eye(6)
    w, v = -xi[:3], -xi[3:]
    Jinv = so3_left_jacobian_inv(w)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ _se3_Q(w, v) @ Jinv
    return out


def box_plus(p: Pose, xi) -> Pose:
    return compose(p, exp(xi))


def box_minus(a: Pose, b: Pose) -> np.ndarray:
    """Twist d with ``b @ exp(d) == a``."""
    return log(compose(b.inverse(), a))


def rotation_angle(p: Pose) -> float:
    """Rotation angle of a pose in radians, in [0, pi]."""
    w = abs(float(p.rotation[0]))
    n = float(np.linalg.norm(p.rotation[1:]))
    return 2.0 * np.arctan2(n, w)


# --------------------------------------------------------------------------
# cameras
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CameraModel:
    """Central projective camera with its extrinsics ``T_BC`` (body <- camera)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    T_BC: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def __eq__(self, other) -> bool:
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height) == (
            other.fx, other.fy, other.cx, other.cy, other.width, other.height
        ) and self.T_BC == other.T_BC

    def __hash__(self):
        return hash((self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.T_BC))

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv)
        return ((uv[..., 0] >= 0) & (uv[..., 0] < self.width)
                & (uv[..., 1] >= 0) & (uv[..., 1] < self.height))

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "T_BC": self.T_BC.as_array().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), Pose.from_array(d["T_BC"]))


def camera_from_map(cam: CameraModel, T_MB: Pose) -> Pose:
    """``T_CM``: the transform taking map points into the camera frame."""
    return compose(T_MB, cam.T_BC).inverse()


def project_points(cam: CameraModel, T_MB: Pose, p_M: np.ndarray):
    """Vectorised projection of (N, 3) map points.

    Returns ``(uv, valid)`` where rows of ``uv`` are only meaningful where
    ``valid`` is True (in front of the near plane and inside the image).
    """
    p_M = np.atleast_2d(np.asarray(p_M, dtype=float))
    p_C = camera_from_map(cam, T_MB).act(p_M)
    z = p_C[:, 2]
    front = z > Z_MIN
    zs = np.where(front, z, 1.0)
    uv = np.empty((len(p_C), 2))
    uv[:, 0] = cam.fx * p_C[:, 0] / zs + cam.cx
    uv[:, 1] = cam.fy * p_C[:, 1] / zs + cam.cy
    valid = front & cam.in_image(uv)
    return uv, valid


def project(cam: CameraModel, T_MB: Pose, p_M) -> Optional[np.ndarray]:
    p_M = np.asarray(p_M, dtype=float)
    if not np.all(np.isfinite(p_M)):
        raise ValueError("point must be finite")
    uv, valid = project_points(cam, T_MB, p_M.reshape(1, 3))
    return uv[0] if valid[0] else None


def bearing(cam: CameraModel, uv: np.ndarray) -> np.ndarray:
    """Unit bearing vectors in the camera frame for (N, 2) pixels."""
    uv = np.atleast_2d(uv)
    b = np.column_stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy, np.ones(len(uv))])
    return b / np.linalg.norm(b, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# triangulation
# --------------------------------------------------------------------------

def _max_parallax_deg(centers: np.ndarray, X: np.ndarray) -> float:
    rays = X - centers
    n = np.linalg.norm(rays, axis=1)
    if np.any(n < 1e-12):
        return 0.0
    rays = rays / n[:, None]
    cosines = np.clip(rays @ rays.T, -1.0, 1.0)
    return float(np.degrees(np.arccos(cosines.min())))


def triangulate(obs: Sequence, min_parallax_deg: float = MIN_PARALLAX_DEG,
                iterations: int = 10) -> Optional[np.ndarray]:
    """Triangulate a map point from ``(camera, T_MB, uv)`` observations.

    Linear DLT start followed by Gauss-Newton on the reprojection error.
    Returns None for fewer than two views, poor conditioning (maximum
    pairwise parallax below ``min_parallax_deg``), or a point behind a camera.
    """
    if len(obs) < 2:
        return None
    n = len(obs)
    R = np.empty((n, 3, 3))
    t = np.empty((n, 3))
    K = np.empty((n, 4))
    uv = np.empty((n, 2))
    for i, (cam, T_MB, p) in enumerate(obs):
        T_CM = camera_from_map(cam, T_MB)
        R[i], t[i] = T_CM.R, T_CM.translation
        K[i] = cam.fx, cam.fy, cam.cx, cam.cy
        uv[i] = p
    return triangulate_arrays(R, t, K, uv, min_parallax_deg, iterations)


def triangulate_arrays(R: np.ndarray, t: np.ndarray, K: np.ndarray, uv: np.ndarray,
                       min_parallax_deg: float = MIN_PARALLAX_DEG, iterations: int = 10):
    """Array form of :func:`triangulate`.

    ``R``, ``t`` hold camera-from-map rotations (n,3,3) and translations (n,3);
    ``K`` rows are (fx, fy, cx, cy).
    """
    n = len(R)
    if n < 2:
        return None
    centers = -np.einsum("nji,nj->ni", R, t)
    if np.max(np.linalg.norm(centers - centers[0], axis=1)) < 1e-9:
        return None
    fx, fy, cx, cy = K.T
    # normalised image coordinates make the DLT rows comparable across views
    x = (uv[:, 0] - cx) / fx
    y = (uv[:, 1] - cy) / fy
    P = np.concatenate([R, t[:, :, None]], axis=2)
    A = np.concatenate([x[:, None] * P[:, 2] - P[:, 0], y[:, None] * P[:, 2] - P[:, 1]])
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12:
        return None
    X = Xh[:3] / Xh[3]

    for _ in range(iterations):
        pc = np.einsum("nij,j->ni", R, X) + t
        z = pc[:, 2]
        if np.any(z <= 1e-9):
            return None
        iz = 1.0 / z
        r = uv - np.column_stack([fx * pc[:, 0] * iz + cx, fy * pc[:, 1] * iz + cy])
        Jp = np.zeros((n, 2, 3))
        Jp[:, 0, 0] = fx * iz
        Jp[:, 0, 2] = -fx * pc[:, 0] * iz * iz
        Jp[:, 1, 1] = fy * iz
        Jp[:, 1, 2] = -fy * pc[:, 1] * iz * iz
        J = -np.einsum("nij,njk->nik", Jp, R)
        H = np.einsum("nij,nik->jk", J, J)
        g = np.einsum("nij,ni->j", J, r)
        try:
            dx = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return None
        X = X + dx
        if np.linalg.norm(dx) < 1e-12 * (1.0 + np.linalg.norm(X)):
            break

    if np.any(np.einsum("nj,j->n", R[:, 2], X) + t[:, 2] <= Z_MIN):
        return None
    if _max_parallax_deg(centers, X) < min_parallax_deg:
        return None
    return X


# --------------------------------------------------------------------------
# absolute pose from three points
# --------------------------------------------------------------------------

def _kabsch(P: np.ndarray, Q: np.ndarray) -> Pose:
    """Rigid transform T with T.act(P) ~= Q (least squares)."""
    cp, cq = P.mean(axis=0), Q.mean(axis=0)
    U, _, Vt = np.linalg.svd((P - cp).T @ (Q - cq))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return Pose.from_rt(R, cq - R @ cp)


def p3p(bearings: np.ndarray, points: np.ndarray) -> list[Pose]:
    """Grunert's three-point absolute pose solver.

    ``bearings`` are unit rays in the camera frame, ``points`` the matching
    world points. Returns the candidate camera-from-world transforms ``T_CW``.
    """
    j1, j2, j3 = bearings
    p1, p2, p3 = points
    a2 = np.sum((p2 - p3) ** 2)
    b2 = np.sum((p1 - p3) ** 2)
    c2 = np.sum((p1 - p2) ** 2)
    if min(a2, b2, c2) < 1e-12:
        return []
    ca, cb, cg = j2 @ j3, j1 @ j3, j1 @ j2
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca ** 2
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca ** 2 * cb)
    A2 = 2 * (amc ** 2 - 1 + 2 * amc ** 2 * cb ** 2 + 2 * (b2 - c2) / b2 * ca ** 2
              - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg ** 2)
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg ** 2 * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg ** 2
    coeffs = np.array([A4, A3, A2, A1, A0])
    if not np.all(np.isfinite(coeffs)) or np.allclose(coeffs, 0):
        return []
    out = []
    for v in np.roots(coeffs):
        if abs(v.imag) > 1e-6 * max(1.0, abs(v.real)) or v.real <= 0:
            continue
        v = v.real
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-12:
            continue
        u = ((-1 + amc) * v * v - 2 * amc * cb * v + 1 + amc) / den
        if u <= 0:
            continue
        s1sq = c2 / (1 + u * u - 2 * u * cg)
        if s1sq <= 0:
            continue
        s1 = np.sqrt(s1sq)
        Q = np.array([s1 * j1, u * s1 * j2, v * s1 * j3])
        out.append(_kabsch(points, Q))
    return out

"""Pinhole cameras, axis-angle poses and the differentiable transforms that
connect pixels, rays and world points.

Conventions: poses are camera-to-world (``X_w = R X_c + t``), camera axes are
x right, y down, z forward, and pixel ``(u, v)`` has its center at
``(u + 0.5, v + 0.5)``. Depth is distance along the (unit) ray.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(f, f, 0.5 * width, 0.5 * height, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def pixel_grid(self, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Flattened integer ``(u, v)`` for a strided grid of pixels."""
        vs, us = np.meshgrid(np.arange(0, self.height, stride),
                             np.arange(0, self.width, stride), indexing="ij")
        return us.reshape(-1), vs.reshape(-1)

    def camera_dirs(self, us, vs) -> np.ndarray:
        """Unit ray directions in the camera frame, shape ``(N, 3)``."""
        us = np.asarray(us, dtype=np.float64)
        vs = np.asarray(vs, dtype=np.float64)
        d = np.stack([(us + 0.5 - self.cx) / self.fx,
                      (vs + 0.5 - self.cy) / self.fy,
                      np.ones_like(us)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])


def _coeffs(theta2):
    """``sin(th)/th``, ``(1-cos(th))/th^2`` and their derivatives in ``th^2``."""
    theta2 = np.asarray(theta2, dtype=np.float64)
    small = theta2 < 1e-6
    th = np.sqrt(np.where(small, 1.0, theta2))
    s, c = np.sin(th), np.cos(th)
    t2 = np.where(small, 1.0, theta2)
    a = np.where(small, 1 - theta2 / 6 + theta2 ** 2 / 120, s / th)
    b = np.where(small, 0.5 - theta2 / 24 + theta2 ** 2 / 720, (1 - c) / t2)
    da = np.where(small, -1 / 6 + theta2 / 60 - theta2 ** 2 / 2520,
                  (th * c - s) / (2 * th * t2))
    db = np.where(small, -1 / 24 + theta2 / 360 - theta2 ** 2 / 13440,
                  (th * s - 2 * (1 - c)) / (2 * t2 * t2))
    return a, b, da, db


def so3_exp(omega) -> np.ndarray:
    """Rodrigues' formula."""
    omega = np.asarray(omega, dtype=np.float64)
    a, b, _, _ = _coeffs(omega @ omega)
    k = hat(omega)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(R) -> np.ndarray:
    """Axis-angle of a rotation matrix with angle in [0, pi)."""
    R = np.asarray(R, dtype=np.float64)
    q = rotation_to_quaternion(R)
    v, w = q[:3], q[3]
    n = np.linalg.norm(v)
    angle = 2 * np.arctan2(n, w)
    if angle >= np.pi - 1e-9:
        raise GeometryError("rotation angle at pi is on the chart boundary")
    if n < 1e-12:
        return 2 * v / w
    return v * (angle / n)


def se3_exp(omega, t_param) -> tuple[np.ndarray, np.ndarray]:
    """Decoupled parameterization: rotation by Rodrigues, translation as is."""
    return so3_exp(omega), np.array(t_param, dtype=np.float64)


def se3_log(R, t) -> tuple[np.ndarray, np.ndarray]:
    return so3_log(R), np.array(t, dtype=np.float64)


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    R = np.asarray(R, dtype=np.float64)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(w), 0.5 * (np.trace(R) - 1)))


def rotation_to_quaternion(R) -> np.ndarray:
    """``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2 * np.sqrt(tr + 1)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, s / 4])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2 * np.sqrt(1 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[i] = s / 4
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


@dataclass
class PoseSE3:
    """Camera-to-world pose as axis-angle rotation plus translation."""

    omega: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.omega = np.array(self.omega, dtype=np.float64).reshape(3)
        self.t = np.array(self.t, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_rt(cls, R, t) -> "PoseSE3":
        return cls(so3_log(R), t)

    @property
    def R(self) -> np.ndarray:
        return so3_exp(self.omega)

    @property
    def center(self) -> np.ndarray:
        return self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self * other`` as rigid transforms."""
        R = self.R @ other.R
        return PoseSE3.from_rt(R, self.R @ other.t + self.t)

    def inverse(self) -> "PoseSE3":
        R = self.R
        return PoseSE3(-self.omega, -R.T @ self.t)


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None
    frame: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("point cloud has non-finite coordinates")

    def __len__(self):
        return len(self.points)


def generate_ray(K: CameraIntrinsics, pose: PoseSE3, pixel) -> tuple[np.ndarray, np.ndarray]:
    u, v = pixel
    d = K.camera_dirs(np.array([u]), np.array([v]))[0]
    return pose.t.copy(), pose.R @ d


def generate_rays(K: CameraIntrinsics, pose: PoseSE3, us, vs) -> tuple[np.ndarray, np.ndarray]:
    d = K.camera_dirs(us, vs) @ pose.R.T
    return np.broadcast_to(pose.t, d.shape).copy(), d


def backproject(depth: np.ndarray, K: CameraIntrinsics, pose: PoseSE3,
                stride: int = 1) -> PointCloud:
    """World points ``o + depth * dir`` for every pixel with positive depth."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth < 0):
        raise GeometryError("depth must be non-negative")
    us, vs = K.pixel_grid(stride)
    d = depth[vs, us]
    keep = d > 0
    if not np.any(keep):
        raise GeometryError("depth map has no valid pixels")
    o, dirs = generate_rays(K, pose, us[keep], vs[keep])
    return PointCloud(o + d[keep, None] * dirs)


def project(K: CameraIntrinsics, pose: PoseSE3, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous pixel coordinates and camera-frame z of world points.

    Points with ``z <= 1e-9`` get NaN coordinates; callers mask them.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Xc = (X - pose.t) @ pose.R
    z = Xc[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    u = np.where(ok, K.fx * Xc[:, 0] / zs + K.cx - 0.5, np.nan)
    v = np.where(ok, K.fy * Xc[:, 1] / zs + K.cy - 0.5, np.nan)
    return u, v, z


def relative_pose(pose_m: PoseSE3, pose_n: PoseSE3) -> tuple[np.ndarray, np.ndarray]:
    """Transform taking camera-m coordinates to camera-n coordinates."""
    Rm, Rn = pose_m.R, pose_n.R
    return Rn.T @ Rm, Rn.T @ (pose_m.t - pose_n.t)


# ---------------------------------------------------------------- autodiff

_HAT_BASIS = np.stack([hat(e) for e in np.eye(3)], axis=-1).reshape(9, 3)


def _rodrigues_coeffs_var(theta2: ad.Var) -> ad.Var:
    a, b, da, db = _coeffs(theta2.value)
    value = np.stack([a, b], axis=-1)

    def vjp(g):
        return (g[..., 0] * da + g[..., 1] * db,)

    return ad.custom("rodrigues_coeffs", [theta2], value, vjp)


def bmm(a, b):
    """Batched ``(..., i, k) @ (..., k, j)`` built from elementwise ops."""
    a4 = ad.reshape(a, a.shape[:-1] + (a.shape[-1], 1)) if isinstance(a, ad.Var) else a[..., :, :, None]
    b4 = ad.reshape(b, b.shape[:-2] + (1,) + b.shape[-2:]) if isinstance(b, ad.Var) else b[..., None, :, :]
    return ad.sum(a4 * b4, axis=-2)


def so3_exp_var(omega: ad.Var) -> ad.Var:
    """Differentiable Rodrigues for ``omega`` of shape ``(3,)`` or ``(F, 3)``."""
    batch = omega.shape[:-1]
    theta2 = ad.sum(omega * omega, axis=-1)
    coeffs = _rodrigues_coeffs_var(theta2)
    k = ad.reshape(ad.matmul(omega, _HAT_BASIS.T) if omega.value.ndim == 2
                   else ad.matvec(_HAT_BASIS, omega), batch + (3, 3))
    a = ad.reshape(coeffs[..., 0], batch + (1, 1))
    b = ad.reshape(coeffs[..., 1], batch + (1, 1))
    return np.eye(3) + a * k + b * bmm(k, k)


def generate_ray_var(K: CameraIntrinsics, omega: ad.Var, t: ad.Var, pixel):
    d = K.camera_dirs(np.array([pixel[0]]), np.array([pixel[1]]))[0]
    R = so3_exp_var(omega)
    return t, ad.matvec(R, d)


def rotate_points(R: ad.Var, pts):
    """``pts @ R.T`` for a single ``(3, 3)`` rotation."""
    return ad.matmul(pts, ad.transpose(R))


def project_var(K: CameraIntrinsics, R: ad.Var, t: ad.Var, X):
    """Differentiable projection; also returns the validity mask (z > 1e-9)."""
    Xc = ad.matmul(X - t, R)
    z = Xc[:, 2]
    ok = z.value > 1e-9
    zs = ad.add(z, np.where(ok, 0.0, 1.0 - z.value))
    u = Xc[:, 0] / zs * K.fx + (K.cx - 0.5)
    v = Xc[:, 1] / zs * K.fy + (K.cy - 0.5)
    return u, v, z, ok


# ---------------------------------------------------------- trajectory file

def write_trajectory(path, poses: list[PoseSE3], frame_ids=None) -> None:
    """One line per frame: ``index tx ty tz qx qy qz qw``."""
    frame_ids = range(len(poses)) if frame_ids is None else frame_ids
    lines = []
    for i, p in zip(frame_ids, poses):
        q = rotation_to_quaternion(p.R)
        vals = " ".join(repr(float(x)) for x in (*p.t, *q))
        lines.append(f"{int(i)} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> tuple[list[int], list[PoseSE3]]:
    ids, poses = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise GeometryError(f"bad trajectory line: {line!r}")
        vals = [float(x) for x in parts[1:]]
        ids.append(int(parts[0]))
        poses.append(PoseSE3.from_rt(quaternion_to_rotation(vals[3:]), vals[:3]))
    return ids, poses

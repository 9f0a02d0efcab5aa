"""Image quality (PSNR, SSIM) and trajectory accuracy (ATE, RPE)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import PoseSE3, rotation_angle

PSNR_CAP = 99.0


class MetricError(ValueError):
    pass


def psnr(img_a, img_b, peak: float = 1.0) -> float:
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"psnr: shapes {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(peak ** 2 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable filter, keeping only windows fully inside the image
    h = len(w) // 2
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim(img_a, img_b, peak: float = 1.0, win: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all full 11x11 Gaussian windows of the channel-mean images."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"ssim: shapes {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    if a.shape[0] < win or a.shape[1] < win:
        raise MetricError(f"ssim: image {a.shape} smaller than the {win}x{win} window")
    w = _gaussian_window(win, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    saa = _filter_valid(a * a, w) - mu_a ** 2
    sbb = _filter_valid(b * b, w) - mu_b ** 2
    sab = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


# -------------------------------------------------------------- trajectory

@dataclass
class Trajectory:
    ids: list[int]
    poses: list[PoseSE3]

    def __post_init__(self):
        if len(self.ids) != len(self.poses):
            raise MetricError("ids and poses differ in length")
        if any(b <= a for a, b in zip(self.ids, self.ids[1:])):
            raise MetricError("frame ids must be strictly increasing")

    @classmethod
    def of(cls, poses: Sequence[PoseSE3], ids: Sequence[int] | None = None) -> "Trajectory":
        return cls(list(range(len(poses))) if ids is None else list(ids), list(poses))

    @property
    def centers(self) -> np.ndarray:
        return np.array([p.t for p in self.poses])

    def __len__(self):
        return len(self.poses)


def _as_traj(x) -> Trajectory:
    return x if isinstance(x, Trajectory) else Trajectory.of(x)


def _check_pair(est: Trajectory, ref: Trajectory, min_len: int):
    if est.ids != ref.ids:
        raise MetricError("trajectories must have matching frame ids")
    if len(est) < min_len:
        raise MetricError(f"need at least {min_len} poses, got {len(est)}")


def align_sim3(est, ref, with_scale: bool = False) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares ``(s, R, t)`` with ``ref_center ~ s R est_center + t`` (Umeyama)."""
    est, ref = _as_traj(est), _as_traj(ref)
    _check_pair(est, ref, 3)
    x, y = est.centers, ref.centers
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    var_x = float(np.sum(xc ** 2)) / len(x)
    cov = yc.T @ xc / len(x)
    U, S, Vt = np.linalg.svd(cov)
    # rank check: collinear or coincident centres leave the rotation undetermined
    if S[1] < 1e-12 * max(S[0], 1e-300) or S[0] < 1e-18:
        raise MetricError("degenerate trajectory: camera centres are collinear")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / var_x) if with_scale else 1.0
    t = my - s * R @ mx
    return s, R, t


def apply_alignment(poses: Sequence[PoseSE3], s: float, R: np.ndarray, t: np.ndarray) -> list[PoseSE3]:
    return [PoseSE3.from_rt(R @ p.R, s * R @ p.t + t) for p in poses]


def ate(est, ref, with_scale: bool = False) -> float:
    """RMSE of camera-centre error after alignment."""
    est, ref = _as_traj(est), _as_traj(ref)
    s, R, t = align_sim3(est, ref, with_scale)
    err = (s * est.centers @ R.T + t) - ref.centers
    return float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))


def _relative(a: PoseSE3, b: PoseSE3) -> tuple[np.ndarray, np.ndarray]:
    # motion from a to b expressed as a^-1 b
    Ra = a.R
    return Ra.T @ b.R, Ra.T @ (b.t - a.t)


def rpe(est, ref, delta: int = 1) -> tuple[float, float]:
    """``(rpe_t, rpe_r in degrees)`` over steps of ``delta`` frames."""
    est, ref = _as_traj(est), _as_traj(ref)
    _check_pair(est, ref, delta + 1)
    if delta < 1:
        raise MetricError("delta must be >= 1")
    et, er = [], []
    for i in range(len(est) - delta):
        Rr, tr = _relative(ref.poses[i], ref.poses[i + delta])
        Re, te = _relative(est.poses[i], est.poses[i + delta])
        # E = rel_ref^-1 rel_est
        RE = Rr.T @ Re
        tE = Rr.T @ (te - tr)
        et.append(float(np.linalg.norm(tE)))
        er.append(np.degrees(rotation_angle(RE)))
    return (float(np.sqrt(np.mean(np.square(et)))), float(np.sqrt(np.mean(np.square(er)))))

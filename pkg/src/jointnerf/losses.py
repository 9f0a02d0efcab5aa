"""Supervision terms: photometric, self-depth with per-frame undistortion,
Gaussian point constraint, Chamfer baseline and reprojection.

Every loss accepts tape Vars (or plain arrays, treated as constants) and
returns a scalar Var.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from . import kernels
from .geometry import CameraIntrinsics, PointCloud, PoseSE3, project_var

log = logging.getLogger(__name__)


class LossError(ValueError):
    pass


@dataclass
class UndistortParams:
    """Per-frame affine map ``s * D + k`` with ``s = softplus(z)``."""

    z: float = float(np.log(np.e - 1.0))   # softplus(z) = 1
    k: float = 0.0

    @property
    def s(self) -> float:
        return float(np.logaddexp(0.0, self.z))

    @staticmethod
    def z_for(s: float) -> float:
        if not s > 0:
            raise LossError("scale must be positive")
        return float(s + np.log(-np.expm1(-s)))


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.04
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise LossError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class GpcConfig:
    sigma_pc: float = 1.0
    correspondence: Literal["nearest_neighbor"] = "nearest_neighbor"
    bidirectional: bool = True

    def __post_init__(self):
        if not self.sigma_pc > 0:
            raise LossError("sigma_pc must be positive")
        if self.correspondence != "nearest_neighbor":
            raise LossError(f"unknown correspondence {self.correspondence!r}")


def _lift(tape: ad.Tape, x):
    if isinstance(x, PointCloud):
        x = x.points
    return tape.lift(x)


def _tape(*xs) -> ad.Tape:
    for x in xs:
        if isinstance(x, ad.Var):
            return x.tape
    return ad.Tape()


# ------------------------------------------------------------- photometric

def loss_rgb(pred, target) -> ad.Var:
    """Mean squared error over pixels and channels."""
    tape = _tape(pred, target)
    pred, target = tape.lift(pred), tape.lift(target)
    if pred.shape != target.shape:
        raise LossError(f"loss_rgb: shapes {pred.shape} vs {target.shape}")
    if pred.value.size == 0:
        raise LossError("loss_rgb: empty batch")
    r = pred - target
    return ad.mean(r * r)


# ------------------------------------------------------------- self-depth

def loss_self_depth(d_nerf, d_prior, s, k, opacity=None, threshold: float = 0.5,
                    norm: Literal["l1", "l2"] = "l1") -> ad.Var:
    """Mean ``|s * D_prior + k - D_nerf|`` over pixels with opacity above ``threshold``.

    ``s`` and ``k`` broadcast against the depth vectors, so a per-ray gather of
    the per-frame parameters works as well as a pair of scalars.
    """
    tape = _tape(d_nerf, d_prior, s, k)
    d_nerf = tape.lift(d_nerf)
    prior = np.asarray(d_prior.value if isinstance(d_prior, ad.Var) else d_prior,
                       dtype=np.float64)
    if d_nerf.shape != prior.shape:
        raise LossError(f"loss_self_depth: shapes {d_nerf.shape} vs {prior.shape}")
    if opacity is None:
        mask = np.ones(prior.shape, dtype=bool)
    else:
        mask = np.asarray(opacity.value if isinstance(opacity, ad.Var) else opacity) > threshold
    n = int(mask.sum())
    if n == 0:
        log.warning("self-depth loss: no pixels above opacity %.2f", threshold)
        return tape.const(0.0)
    r = s * prior + k - d_nerf
    r = ad.abs(r) if norm == "l1" else r * r
    return ad.sum(r * mask.astype(np.float64)) * (1.0 / n)


# ------------------------------------------------------------ point clouds

def gaussian_weight(p_i, p_j, sigma_pc: float):
    """``exp(-|p_i - p_j|^2 / (2 sigma_pc^2))``; broadcasts over leading axes."""
    if not sigma_pc > 0:
        raise LossError("sigma_pc must be positive")
    d = np.asarray(p_i, dtype=np.float64) - np.asarray(p_j, dtype=np.float64)
    return np.exp(-np.sum(d * d, axis=-1) / (2.0 * sigma_pc ** 2))


def row_norm(x: ad.Var) -> ad.Var:
    """Euclidean norm of each row; the gradient at a zero row is zero."""
    xv = x.value
    n = np.sqrt(np.sum(xv * xv, axis=-1))

    def vjp(g):
        scale = np.divide(g, n, out=np.zeros_like(n), where=n > 0)
        return (scale[..., None] * xv,)

    return ad.custom("row_norm", [x], n, vjp)


def _nn_distances(src: ad.Var, dst: ad.Var) -> ad.Var:
    if src.shape[0] == 0 or dst.shape[0] == 0:
        raise LossError("point cloud is empty")
    idx, _ = kernels.nearest_neighbors(src.value, dst.value)
    return row_norm(src - ad.take(dst, idx))


def _directional(src, dst, weight_fn) -> ad.Var:
    d = _nn_distances(src, dst)
    return ad.mean(weight_fn(d) * d if weight_fn else d)


def loss_gpc(cloud_m, cloud_n, cfg: GpcConfig = GpcConfig()) -> ad.Var:
    """Gaussian-weighted nearest-neighbor distance between two clouds.

    Each point of one cloud is paired with its nearest neighbor in the other
    (pairs fixed during the evaluation); the pair contributes ``w * d`` with
    ``w = exp(-d^2 / (2 sigma_pc^2))``. The sum is normalized by point count
    and, when bidirectional, averaged over both directions.
    """
    tape = _tape(cloud_m, cloud_n)
    a, b = _lift(tape, cloud_m), _lift(tape, cloud_n)
    inv = -1.0 / (2.0 * cfg.sigma_pc ** 2)

    def weight(d):
        return ad.exp(d * d * inv)

    out = _directional(a, b, weight)
    if cfg.bidirectional:
        out = (out + _directional(b, a, weight)) * 0.5
    return out


def loss_chamfer(cloud_m, cloud_n) -> ad.Var:
    """Symmetric mean nearest-neighbor distance."""
    tape = _tape(cloud_m, cloud_n)
    a, b = _lift(tape, cloud_m), _lift(tape, cloud_n)
    return (_directional(a, b, None) + _directional(b, a, None)) * 0.5


# ------------------------------------------------------------ reprojection

def bilinear_sample(image: np.ndarray, u, v) -> ad.Var:
    """Sample an ``(H, W, C)`` image at continuous pixel coordinates.

    Coordinates are in pixel-index units (pixel ``i`` sits at ``i``) and are
    clamped to the image; gradients flow to ``u`` and ``v``.
    """
    tape = _tape(u, v)
    u, v = tape.lift(u), tape.lift(v)
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[:2]
    uc = np.clip(u.value, 0.0, W - 1.0)
    vc = np.clip(v.value, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(uc).astype(np.int64), W - 2) if W > 1 else np.zeros(len(uc), np.int64)
    y0 = np.minimum(np.floor(vc).astype(np.int64), H - 2) if H > 1 else np.zeros(len(vc), np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (uc - x0)[:, None]
    fy = (vc - y0)[:, None]
    i00, i01 = img[y0, x0], img[y0, x1]
    i10, i11 = img[y1, x0], img[y1, x1]
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    out = top + fy * (bot - top)
    inside_u = ((u.value >= 0) & (u.value <= W - 1))[:, None]
    inside_v = ((v.value >= 0) & (v.value <= H - 1))[:, None]

    def vjp(g):
        du = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
        dv = bot - top
        return (np.sum(g * du * inside_u, axis=-1), np.sum(g * dv * inside_v, axis=-1))

    return ad.custom("bilinear", [u, v], out, vjp)


def _pose_vars(tape: ad.Tape, pose):
    """``(R, t)`` Vars from a PoseSE3 or an existing pair."""
    if isinstance(pose, PoseSE3):
        return tape.const(pose.R), tape.const(pose.t)
    R, t = pose
    return tape.lift(R), tape.lift(t)


def reproj_from_points(points_world, colors_src, image_n: np.ndarray,
                       K: CameraIntrinsics, pose_n) -> ad.Var:
    """L1 color error between source colors and frame ``n`` sampled at the
    projections of ``points_world``. Points behind the camera or projecting
    outside the image are masked; the mean runs over valid points.
    """
    tape = _tape(points_world, *(pose_n if isinstance(pose_n, tuple) else ()))
    X = tape.lift(points_world)
    R, t = _pose_vars(tape, pose_n)
    u, v, _, ok = project_var(K, R, t, X)
    H, W = image_n.shape[:2]
    ok = ok & (u.value >= 0) & (u.value <= W - 1) & (v.value >= 0) & (v.value <= H - 1)
    n = int(ok.sum())
    if n == 0:
        log.warning("reprojection loss: no valid pixels")
        return tape.const(0.0)
    sampled = bilinear_sample(image_n, u, v)
    r = ad.abs(sampled - np.asarray(colors_src, dtype=np.float64))
    return ad.sum(r * ok[:, None].astype(np.float64)) * (1.0 / (3 * n))


def backproject_var(depth, K: CameraIntrinsics, pose, us, vs) -> ad.Var:
    """World points ``t + depth * R d_cam`` for pixels ``(us, vs)``."""
    tape = _tape(depth, *(pose if isinstance(pose, tuple) else ()))
    R, t = _pose_vars(tape, pose)
    depth = tape.lift(depth)
    dirs = ad.matmul(tape.const(K.camera_dirs(us, vs)), ad.transpose(R))
    return t + dirs * ad.reshape(depth, (depth.shape[0], 1))


def loss_reproj(image_m: np.ndarray, image_n: np.ndarray, depth_m, K: CameraIntrinsics,
                pose_m, pose_n, stride: int = 1) -> ad.Var:
    """Warp frame ``m`` into frame ``n`` through ``depth_m`` and compare colors.

    ``depth_m`` is an ``(H, W)`` array or a Var over the strided pixel grid;
    poses are PoseSE3 or ``(R, t)`` Var pairs.
    """
    image_m = np.asarray(image_m, dtype=np.float64)
    image_n = np.asarray(image_n, dtype=np.float64)
    if image_m.shape != image_n.shape:
        raise LossError(f"loss_reproj: image shapes {image_m.shape} vs {image_n.shape}")
    us, vs = K.pixel_grid(stride)
    if isinstance(depth_m, ad.Var):
        d = depth_m
    else:
        d = np.asarray(depth_m, dtype=np.float64)[vs, us]
    keep = (d.value if isinstance(d, ad.Var) else d) > 0
    tape = _tape(d, *(p for pose in (pose_m, pose_n) if isinstance(pose, tuple) for p in pose))
    d = tape.lift(d)
    if not np.all(keep):
        d = ad.take(d, np.flatnonzero(keep))
        us, vs = us[keep], vs[keep]
    if len(us) == 0:
        log.warning("reprojection loss: no pixels with positive depth")
        return tape.const(0.0)
    X = backproject_var(d, K, pose_m if isinstance(pose_m, tuple) else _pose_vars(tape, pose_m),
                        us, vs)
    return reproj_from_points(X, image_m[vs, us], image_n, K,
                              pose_n if isinstance(pose_n, tuple) else _pose_vars(tape, pose_n))


# ------------------------------------------------------------------ total

COMPONENTS = ("rgb", "depth", "gpc", "reproj")


def total_loss(components: dict, weights: LossWeights = LossWeights()) -> ad.Var:
    """``L_rgb + l1 * L_depth + l2 * L_gpc + l3 * L_reproj``.

    Missing components count as zero. A non-finite component raises, naming it.
    """
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise LossError(f"unknown loss components {sorted(unknown)}")
    for name, val in components.items():
        v = val.value if isinstance(val, ad.Var) else np.asarray(val, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise LossError(f"non-finite loss component {name!r}")
    if "rgb" not in components:
        raise LossError("the rgb component is required")
    lam = {"depth": weights.lambda1, "gpc": weights.lambda2, "reproj": weights.lambda3}
    out = components["rgb"]
    for name in ("depth", "gpc", "reproj"):
        if name in components and lam[name] != 0.0:
            out = out + components[name] * lam[name]
    if not isinstance(out, ad.Var):
        out = ad.Tape().const(out)
    return out

"""Synthetic ground truth: analytic density scenes, reference renders,
simulated coarse depth priors, camera trajectories and pose perturbation.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import kernels
from .geometry import CameraIntrinsics, PoseSE3, generate_rays, so3_exp


@dataclass
class Primitive:
    """Sphere (``size`` = radius) or axis-aligned box (``size`` = half extents)."""

    shape: Literal["sphere", "box"]
    center: Sequence[float]
    size: float | Sequence[float]
    density: float = 30.0
    albedo: Sequence[float] = (0.8, 0.8, 0.8)
    edge_softness: float = 0.02
    # optional sinusoidal albedo modulation: amplitude in [0, 1], spatial frequency (rad/unit)
    texture_amp: float = 0.0
    texture_freq: float = 6.0

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        if self.density < 0:
            raise ValueError("density amplitude must be >= 0")
        alb = np.asarray(self.albedo, dtype=np.float64)
        if alb.shape != (3,) or np.any(alb < 0) or np.any(alb > 1):
            raise ValueError("albedo must be a 3-vector in [0, 1]")
        if not self.edge_softness > 0:
            raise ValueError("edge_softness must be positive")
        if not 0 <= self.texture_amp <= 1:
            raise ValueError("texture_amp must be in [0, 1]")

    def sdf(self, x: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        p = x - c
        if self.shape == "sphere":
            return np.linalg.norm(p, axis=-1) - float(self.size)
        q = np.abs(p) - np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,))
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(np.max(q, axis=-1), 0.0)

    def ray_interval(self, o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Entry/exit depths of rays through the bounding box where density can be nonzero."""
        c = np.asarray(self.center, dtype=np.float64)
        half = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,)) + self.edge_softness
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t_a = (c - half - o) * inv
            t_b = (c + half - o) * inv
        lo = np.where(np.isnan(t_a), -np.inf, np.minimum(t_a, t_b))
        hi = np.where(np.isnan(t_b), np.inf, np.maximum(t_a, t_b))
        return lo.max(axis=-1), hi.min(axis=-1)

    def albedo_at(self, x: np.ndarray) -> np.ndarray:
        alb = np.asarray(self.albedo, dtype=np.float64)
        if self.texture_amp == 0:
            return np.broadcast_to(alb, x.shape).copy()
        f = self.texture_freq
        # per-channel phase offsets so the pattern is not grey
        phase = np.array([0.0, 2.1, 4.2])
        pat = 0.5 + 0.5 * np.sin(f * x[..., :1] + phase) * np.cos(f * x[..., 1:2] - phase) \
            * np.cos(0.5 * f * x[..., 2:3] + phase)
        return alb * (1 - self.texture_amp + self.texture_amp * pat)


@dataclass
class AnalyticScene:
    primitives: list[Primitive] = field(default_factory=list)
    near: float = 0.1
    far: float = 4.0

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError("need near < far")


def smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def scene_field(scene: AnalyticScene, x) -> tuple[np.ndarray, np.ndarray]:
    """Density and color at points ``x`` of shape ``(..., 3)``.

    Each primitive contributes ``density * smoothstep(0.5 - sdf / edge)``,
    a plateau inside that falls to zero across a band of width ``edge``
    centred on the surface. Color is the density-weighted albedo blend.
    """
    x = np.asarray(x, dtype=np.float64)
    sigma = np.zeros(x.shape[:-1])
    acc = np.zeros(x.shape)
    for p in scene.primitives:
        occ = smoothstep(0.5 - p.sdf(x) / p.edge_softness)
        s = p.density * occ
        if not np.any(s):
            continue
        sigma += s
        acc += s[..., None] * p.albedo_at(x)
    color = np.divide(acc, sigma[..., None], out=np.zeros_like(acc),
                      where=sigma[..., None] > 0)
    return sigma, color


def render_rays_gt(scene: AnalyticScene, origins, dirs, n_samples: int = 4096,
                   chunk: int = 128) -> np.ndarray:
    """Midpoint-quadrature render of the analytic field; ``(R, 5)`` like the renderer.

    Each primitive is only evaluated at samples inside its bounding box, which
    gives the same values as :func:`scene_field` because density vanishes
    outside it.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    R = len(origins)
    step = (scene.far - scene.near) / n_samples
    base = scene.near + step * (np.arange(n_samples) + 0.5)
    out = np.empty((R, 5))
    for s in range(0, R, chunk):
        o, d = origins[s:s + chunk], dirs[s:s + chunk]
        n = len(o)
        ts = np.ascontiguousarray(np.broadcast_to(base, (n, n_samples)))
        sigma = np.zeros((n, n_samples))
        acc = np.zeros((n, n_samples, 3))
        for p in scene.primitives:
            t0, t1 = p.ray_interval(o, d)
            m = (ts >= t0[:, None]) & (ts <= t1[:, None])
            if not m.any():
                continue
            ri, si = np.nonzero(m)
            pts = o[ri] + d[ri] * ts[ri, si][:, None]
            sv = p.density * smoothstep(0.5 - p.sdf(pts) / p.edge_softness)
            sigma[ri, si] += sv
            acc[ri, si] += sv[:, None] * p.albedo_at(pts)
        color = np.divide(acc, sigma[..., None], out=np.zeros_like(acc),
                          where=sigma[..., None] > 0)
        out[s:s + n], _, _ = kernels.composite_forward(sigma, color, ts, step)
    return out


def render_ground_truth(scene: AnalyticScene, K: CameraIntrinsics, pose: PoseSE3,
                        n_samples: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """``(rgb (H, W, 3), depth (H, W))`` by 4096-sample uniform quadrature."""
    us, vs = K.pixel_grid()
    o, d = generate_rays(K, pose, us, vs)
    out = render_rays_gt(scene, o, d, n_samples)
    H, W = K.height, K.width
    return out[:, :3].reshape(H, W, 3), out[:, 3].reshape(H, W)


# ------------------------------------------------------------- depth prior

@dataclass
class PriorDepthConfig:
    s_true: float | Sequence[float] = 1.0
    k_true: float | Sequence[float] = 0.0
    noise_std: float = 0.0
    corruption_fraction: float = 0.0
    corruption_patch: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0 <= self.corruption_fraction <= 1:
            raise ValueError("corruption_fraction must be in [0, 1]")
        if self.corruption_patch < 1:
            raise ValueError("corruption_patch must be >= 1")
        if np.any(np.asarray(self.s_true) <= 0):
            raise ValueError("s_true must be positive")

    def for_frame(self, i: int) -> tuple[float, float]:
        s = np.atleast_1d(np.asarray(self.s_true, dtype=np.float64))
        k = np.atleast_1d(np.asarray(self.k_true, dtype=np.float64))
        return float(s[i % len(s)]), float(k[i % len(k)])


def make_coarse_depth(depth_gt: np.ndarray, cfg: PriorDepthConfig, rng=None, frame: int = 0,
                      bounds: tuple[float, float] = (0.1, 4.0)) -> np.ndarray:
    """Prior with ``s * prior + k = depth_gt`` up to noise, plus corrupted patches.

    Corruption picks ``round(fraction * cells)`` cells of a grid of
    ``corruption_patch``-sized squares and fills each with one wrong depth
    drawn uniformly from ``bounds`` (mapped through the inverse affine).
    """
    rng = np.random.default_rng([cfg.rng_seed, frame]) if rng is None else rng
    depth_gt = np.asarray(depth_gt, dtype=np.float64)
    s, k = cfg.for_frame(frame)
    prior = (depth_gt - k) / s
    if cfg.noise_std > 0:
        prior = prior + rng.normal(0.0, cfg.noise_std, size=prior.shape)
    if cfg.corruption_fraction > 0:
        H, W = depth_gt.shape
        P = cfg.corruption_patch
        gy, gx = -(-H // P), -(-W // P)
        n_cells = gy * gx
        n_bad = int(round(cfg.corruption_fraction * n_cells))
        cells = rng.choice(n_cells, size=n_bad, replace=False)
        wrong = rng.uniform(bounds[0], bounds[1], size=n_bad)
        for c, w in zip(cells, wrong):
            y, x = divmod(int(c), gx)
            prior[y * P:(y + 1) * P, x * P:(x + 1) * P] = (w - k) / s
    return prior


# -------------------------------------------------------------- trajectory

def look_at(center, target, down=(0.0, 1.0, 0.0)) -> PoseSE3:
    """Camera-to-world pose at ``center`` whose +z axis points at ``target``."""
    c = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - c
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return PoseSE3.from_rt(np.stack([x, y, z], axis=1), c)


def make_trajectory(kind: Literal["orbit", "forward_facing"], n_frames: int,
                    radius: float = 2.5, target=(0.0, 0.0, 0.0), step: float = 0.1,
                    height: float = 0.0, phase: float = 0.3) -> list[PoseSE3]:
    """Deterministic camera paths that all look at ``target``.

    ``orbit``: centres on a horizontal circle of ``radius`` about ``target``
    (offset by ``height`` along the world y axis), starting ``phase`` radians
    round so that no frame sits at exactly a half turn, which the axis-angle
    chart cannot represent. ``forward_facing``: centres
    on a line along x spaced by ``step``, with a small vertical wiggle,
    ``radius`` in front of the target.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    target = np.asarray(target, dtype=np.float64)
    poses = []
    for i in range(n_frames):
        if kind == "orbit":
            th = 2 * np.pi * i / n_frames + phase
            c = target + np.array([radius * np.sin(th), height, -radius * np.cos(th)])
        elif kind == "forward_facing":
            x = step * (i - 0.5 * (n_frames - 1))
            c = target + np.array([x, 0.25 * step * np.sin(1.3 * i), -radius])
        else:
            raise ValueError(f"unknown trajectory kind {kind!r}")
        poses.append(look_at(c, target))
    return poses


def random_unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def perturb_poses(poses: Sequence[PoseSE3], rot_deg: float, trans_mag: float, rng,
                  keep: Sequence[int] = (), min_frac: float = 0.5
                  ) -> tuple[list[PoseSE3], list[tuple[np.ndarray, np.ndarray]]]:
    """Right-compose each pose with a random rotation and shift its centre.

    Rotation angles are drawn from ``[min_frac, 1] * rot_deg`` about a random
    axis and translation norms from ``[min_frac, 1] * trans_mag``. Frames in
    ``keep`` are returned unchanged. Returns the poses and the applied
    ``(omega, dt)`` per frame.
    """
    if rot_deg < 0 or trans_mag < 0:
        raise ValueError("perturbation magnitudes must be >= 0")
    out, applied = [], []
    for i, p in enumerate(poses):
        u = rng.uniform(min_frac, 1.0, size=2)
        omega = random_unit(rng) * np.radians(rot_deg) * u[0]
        dt = random_unit(rng) * trans_mag * u[1]
        if i in keep:
            omega, dt = np.zeros(3), np.zeros(3)
        out.append(PoseSE3.from_rt(p.R @ so3_exp(omega), p.t + dt))
        applied.append((omega, dt))
    return out, applied


# ------------------------------------------------------------ desk scene

def desk_scene(texture: bool = True) -> AnalyticScene:
    """Three spheres in front of a box backdrop, all within ``[0.1, 4.0]``."""
    amp = 0.6 if texture else 0.0
    return AnalyticScene([
        Primitive("sphere", (-0.45, 0.15, 2.1), 0.32, albedo=(0.9, 0.3, 0.2), texture_amp=amp),
        Primitive("sphere", (0.4, 0.25, 1.8), 0.28, albedo=(0.2, 0.7, 0.3), texture_amp=amp),
        Primitive("sphere", (0.05, -0.4, 2.25), 0.28, albedo=(0.25, 0.35, 0.9), texture_amp=amp),
        Primitive("box", (0.0, 0.0, 2.75), (3.0, 3.0, 0.15), albedo=(0.8, 0.75, 0.6),
                  texture_amp=amp, texture_freq=4.0),
    ], near=0.1, far=4.0)


def scene_to_dict(scene: AnalyticScene) -> dict:
    return {"near": scene.near, "far": scene.far,
            "primitives": [_jsonable(asdict(p)) for p in scene.primitives]}


def scene_from_dict(d: dict) -> AnalyticScene:
    return AnalyticScene([Primitive(**p) for p in d["primitives"]], d["near"], d["far"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in np.asarray(obj).tolist()] if isinstance(obj, np.ndarray) \
            else [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj

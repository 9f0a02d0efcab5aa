"""Synthetic dataset generation and the on-disk layout.

Layout of a dataset directory::

    manifest.json          intrinsics, bounds, scene, prior config, seeds, splits
    rgb_000.ppm ...        8-bit binary PPM per frame
    depth_000.npy ...      ground-truth expected depth (float64)
    prior_000.npy ...      simulated coarse depth prior (float64)
    gt_traj.txt            ground-truth camera-to-world poses
    init_traj.txt          perturbed poses used to initialise training
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, PoseSE3, read_trajectory, write_trajectory
from .scenegen import (AnalyticScene, PriorDepthConfig, desk_scene, make_coarse_depth,
                       make_trajectory, perturb_poses, render_ground_truth, scene_from_dict,
                       scene_to_dict)


class DatasetError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    n_frames: int = 9
    width: int = 48
    height: int = 48
    fov_deg: float = 60.0
    trajectory: str = "forward_facing"
    radius: float = 2.5
    step: float = 0.1
    target_z: float = 2.5
    rot_deg: float = 5.0
    trans_mag: float = 0.1
    texture: bool = True
    gt_samples: int = 4096
    holdout_every: int = 8
    seed: int = 0


@dataclass
class Dataset:
    K: CameraIntrinsics
    images: np.ndarray          # (F, H, W, 3) in [0, 1]
    depths: np.ndarray          # (F, H, W)
    priors: np.ndarray          # (F, H, W)
    gt_poses: list[PoseSE3]
    init_poses: list[PoseSE3]
    near: float
    far: float
    train_ids: list[int]
    holdout_ids: list[int]
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.images)


def split_ids(n_frames: int, every: int) -> tuple[list[int], list[int]]:
    """Every ``every``-th frame (starting at 0) is held out."""
    hold = list(range(0, n_frames, every)) if every > 0 else []
    train = [i for i in range(n_frames) if i not in hold]
    if not train:
        raise DatasetError("no training frames left after the hold-out split")
    return train, hold


_GT_CACHE: dict[str, tuple[np.ndarray, np.ndarray]] = {}


def _render_cached(scene: AnalyticScene, K: CameraIntrinsics, pose: PoseSE3, n: int):
    key = hashlib.sha256(json.dumps(
        [scene_to_dict(scene), asdict(K), pose.omega.tolist(), pose.t.tolist(), n],
        sort_keys=True).encode()).hexdigest()
    if key not in _GT_CACHE:
        _GT_CACHE[key] = render_ground_truth(scene, K, pose, n)
    rgb, depth = _GT_CACHE[key]
    return rgb.copy(), depth.copy()


def quantize(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0, 1) * 255.0) / 255.0


def generate_dataset(cfg: SceneConfig = SceneConfig(),
                     prior: PriorDepthConfig = PriorDepthConfig(),
                     scene: AnalyticScene | None = None) -> Dataset:
    scene = desk_scene(cfg.texture) if scene is None else scene
    K = CameraIntrinsics.from_fov(cfg.width, cfg.height, cfg.fov_deg)
    target = (0.0, 0.0, cfg.target_z)
    poses = make_trajectory(cfg.trajectory, cfg.n_frames, radius=cfg.radius,
                            target=target, step=cfg.step)
    train, hold = split_ids(cfg.n_frames, cfg.holdout_every)
    rng = np.random.default_rng(cfg.seed)
    # the anchor (first training frame) and held-out frames keep their true pose
    init, _ = perturb_poses(poses, cfg.rot_deg, cfg.trans_mag, rng, keep=[train[0], *hold])
    images, depths, priors = [], [], []
    for i, p in enumerate(poses):
        rgb, depth = _render_cached(scene, K, p, cfg.gt_samples)
        images.append(quantize(rgb))
        depths.append(depth)
        priors.append(make_coarse_depth(depth, prior, frame=i, bounds=(scene.near, scene.far)))
    meta = {"scene_config": asdict(cfg), "prior_config": _prior_dict(prior),
            "scene": scene_to_dict(scene)}
    return Dataset(K, np.array(images), np.array(depths), np.array(priors), poses, init,
                   scene.near, scene.far, train, hold, meta)


def _prior_dict(p: PriorDepthConfig) -> dict:
    d = asdict(p)
    for k in ("s_true", "k_true"):
        d[k] = np.asarray(d[k]).tolist()
    return d


# ---------------------------------------------------------------- disk I/O

def write_ppm(path, rgb: np.ndarray) -> None:
    arr = np.round(np.clip(rgb, 0, 1) * 255.0).astype(np.uint8)
    H, W = arr.shape[:2]
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + arr.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        # header tokens, skipping comments
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise DatasetError(f"{path}: not an 8-bit binary PPM")
    W, H = int(parts[1]), int(parts[2])
    pix = np.frombuffer(data[pos + 1:pos + 1 + W * H * 3], dtype=np.uint8)
    return pix.reshape(H, W, 3).astype(np.float64) / 255.0


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(ds.n_frames):
        write_ppm(out / f"rgb_{i:03d}.ppm", ds.images[i])
        np.save(out / f"depth_{i:03d}.npy", ds.depths[i])
        np.save(out / f"prior_{i:03d}.npy", ds.priors[i])
    write_trajectory(out / "gt_traj.txt", ds.gt_poses)
    write_trajectory(out / "init_traj.txt", ds.init_poses)
    manifest = {
        "intrinsics": asdict(ds.K), "near": ds.near, "far": ds.far,
        "n_frames": ds.n_frames, "train_ids": ds.train_ids, "holdout_ids": ds.holdout_ids,
        **ds.meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.exists():
        raise DatasetError(f"{root}: no manifest.json")
    m = json.loads(mf.read_text())
    n = m["n_frames"]
    try:
        images = np.array([read_ppm(root / f"rgb_{i:03d}.ppm") for i in range(n)])
        depths = np.array([np.load(root / f"depth_{i:03d}.npy") for i in range(n)])
        priors = np.array([np.load(root / f"prior_{i:03d}.npy") for i in range(n)])
        _, gt = read_trajectory(root / "gt_traj.txt")
        _, init = read_trajectory(root / "init_traj.txt")
    except FileNotFoundError as e:
        raise DatasetError(f"{root}: missing file {e.filename}") from None
    meta = {k: m[k] for k in ("scene_config", "prior_config", "scene") if k in m}
    return Dataset(CameraIntrinsics(**m["intrinsics"]), images, depths, priors, gt, init,
                   m["near"], m["far"], m["train_ids"], m["holdout_ids"], meta)


def scene_of(ds: Dataset) -> AnalyticScene:
    return scene_from_dict(ds.meta["scene"])

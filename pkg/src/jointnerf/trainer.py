"""Joint optimisation of the radiance field, camera poses and per-frame depth
undistortion with Adam.

One epoch is one optimisation step on a ray batch drawn uniformly over
(training frame, pixel) pairs. Every epoch draws its random numbers from a
stream seeded by ``(seed, epoch)``, so a run resumed from a checkpoint
replays the uninterrupted run exactly.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from . import autodiff as ad
from .dataset import Dataset
from .field import FieldParams, save_npz_atomic
from .geometry import PoseSE3, bmm, so3_exp, so3_exp_var
from .losses import (GpcConfig, LossWeights, UndistortParams, backproject_var, loss_chamfer,
                     loss_gpc, loss_rgb, loss_self_depth, reproj_from_points, total_loss)
from .metrics import Trajectory, ate, rpe
from .rendering import render_rays, sample_ts
from .sampling import SamplingConfig, select_strategy

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "l_rgb", "l_depth", "l_gpc", "l_reproj", "total", "strategy",
              "ate", "rpe_t", "rpe_r"]


class TrainingError(RuntimeError):
    pass


@dataclass
class FieldConfig:
    width: int = 64
    depth: int = 4
    L_pos: int = 6
    L_dir: int = 4
    # positions are divided by this before encoding; the encoding has period 2
    pos_scale: float = 4.0
    density_bias: float = 0.5


@dataclass
class TrainConfig:
    epochs: int = 3000
    rays_per_batch: int = 1024
    lr_field: float = 1e-3
    lr_pose: float = 5e-4
    lr_undistort: float = 5e-4
    phase1: float = 0.5
    phase2: float = 0.8
    lr_final_frac: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    sampling: SamplingConfig = field(default_factory=lambda: SamplingConfig(
        n_samples=128, T_s=250, near=0.1, far=4.0, sigma_bar=0.39))
    constraint: Literal["gpc", "chamfer", "none"] = "gpc"
    gpc: GpcConfig = field(default_factory=GpcConfig)
    use_reproj: bool = True
    cloud_stride: int = 2
    # let the point constraint push on (s, k); off because a mean nearest-neighbour
    # distance shrinks with the point spacing, which pulls every s towards 0
    cloud_grad_undistort: bool = False
    depth_norm: Literal["l1", "l2"] = "l1"
    # phase 3 refines only the field; poses and (s, k) stop moving
    phase3_field_only: bool = False
    # starting undistortion (s, k) for every frame
    init_scale: float = 1.0
    init_shift: float = 0.0
    opacity_threshold: float = 0.5
    field: FieldConfig = field(default_factory=FieldConfig)
    seed: int = 0
    checkpoint_every: int = 0
    metrics_every: int = 1

    def __post_init__(self):
        if not 0 < self.phase1 < self.phase2 < 1:
            raise TrainingError("need 0 < phase1 < phase2 < 1")
        for name in ("lr_field", "lr_pose", "lr_undistort"):
            if not getattr(self, name) >= 0:
                raise TrainingError(f"{name} must be >= 0")
        if self.constraint not in ("gpc", "chamfer", "none"):
            raise TrainingError(f"unknown constraint {self.constraint!r}")
        if not self.init_scale > 0:
            raise TrainingError("init_scale must be > 0")
        if self.epochs < 0 or self.rays_per_batch < 1:
            raise TrainingError("epochs must be >= 0 and rays_per_batch >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        d["sampling"] = SamplingConfig(**d["sampling"])
        d["gpc"] = GpcConfig(**d["gpc"])
        d["field"] = FieldConfig(**d["field"])
        return cls(**d)


# ---------------------------------------------------------------- schedule

def _bounds(epoch: int, cfg: TrainConfig) -> tuple[float, float]:
    return cfg.phase1 * cfg.epochs, cfg.phase2 * cfg.epochs


def phase_weights(epoch: int, cfg: TrainConfig) -> LossWeights:
    """Initial weights in phase 1, linear decay to 0 in phase 2, zero in phase 3."""
    p1, p2 = _bounds(epoch, cfg)
    w = cfg.weights
    if epoch < p1:
        f = 1.0
    elif epoch < p2:
        f = 1.0 - (epoch - p1) / (p2 - p1)
    else:
        f = 0.0
    return LossWeights(w.lambda1 * f, w.lambda2 * f, w.lambda3 * f)


def lr_factor(epoch: int, cfg: TrainConfig) -> float:
    """1 in phase 1, then cosine decay to ``lr_final_frac`` by the last epoch."""
    p1, _ = _bounds(epoch, cfg)
    if epoch < p1 or cfg.epochs <= p1:
        return 1.0
    x = (epoch - p1) / max(cfg.epochs - p1, 1.0)
    return cfg.lr_final_frac + (1 - cfg.lr_final_frac) * 0.5 * (1 + np.cos(np.pi * x))


# ------------------------------------------------------------------- Adam

@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, x: np.ndarray) -> "AdamMoments":
        return cls(np.zeros_like(x), np.zeros_like(x))


def adam_step(param: np.ndarray, grad: np.ndarray, mom: AdamMoments, lr: float, t: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              mask: np.ndarray | None = None) -> np.ndarray:
    """Bias-corrected Adam; updates ``mom`` in place and returns the new parameter.

    Entries where ``mask`` is False keep their value and moments untouched.
    """
    if t < 1:
        raise TrainingError("Adam step counter must be >= 1")
    if param.shape != grad.shape or mom.m.shape != param.shape:
        raise TrainingError(f"adam_step: shapes {param.shape}, {grad.shape}, {mom.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient")
    m = beta1 * mom.m + (1 - beta1) * grad
    v = beta2 * mom.v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    new = param - lr * mhat / (np.sqrt(vhat) + eps)
    if mask is not None:
        mask = np.broadcast_to(mask, param.shape)
        new = np.where(mask, new, param)
        m = np.where(mask, m, mom.m)
        v = np.where(mask, v, mom.v)
    mom.m, mom.v = m, v
    return new


# ------------------------------------------------------------------ state

@dataclass
class TrainState:
    field: FieldParams
    base_R: np.ndarray          # (F, 3, 3) initial rotations
    base_t: np.ndarray          # (F, 3) initial centres
    d_omega: np.ndarray         # (F, 3) right-multiplied rotation update
    d_t: np.ndarray             # (F, 3) translation update
    undistort_z: np.ndarray     # (F,) s = softplus(z)
    undistort_k: np.ndarray     # (F,)
    moments: dict[str, AdamMoments]
    epoch: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"field/{k}": v for k, v in self.field.arrays.items()}
        out.update({"pose/omega": self.d_omega, "pose/t": self.d_t,
                    "undistort/z": self.undistort_z, "undistort/k": self.undistort_k})
        return out

    @property
    def poses(self) -> list[PoseSE3]:
        return [PoseSE3.from_rt(self.base_R[i] @ so3_exp(self.d_omega[i]),
                                self.base_t[i] + self.d_t[i]) for i in range(len(self.d_t))]

    @property
    def undistort(self) -> list[UndistortParams]:
        return [UndistortParams(float(z), float(k))
                for z, k in zip(self.undistort_z, self.undistort_k)]

    @property
    def scales(self) -> np.ndarray:
        return np.logaddexp(0.0, self.undistort_z)


def init_state(cfg: TrainConfig, ds: Dataset) -> TrainState:
    rng = np.random.default_rng([cfg.seed, 0xF1E1D])
    fc = cfg.field
    params = FieldParams.init(rng, density_bias=fc.density_bias, L_pos=fc.L_pos,
                              L_dir=fc.L_dir, width=fc.width, depth=fc.depth,
                              pos_scale=fc.pos_scale)
    F = ds.n_frames
    st = TrainState(params, np.array([p.R for p in ds.init_poses]),
                    np.array([p.t for p in ds.init_poses]), np.zeros((F, 3)), np.zeros((F, 3)),
                    np.full(F, UndistortParams.z_for(cfg.init_scale)),
                    np.full(F, float(cfg.init_shift)), {})
    st.moments = {k: AdamMoments.zeros_like(v) for k, v in st.arrays().items()}
    return st


def _set_array(st: TrainState, name: str, value: np.ndarray) -> None:
    group, key = name.split("/", 1)
    if group == "field":
        st.field.arrays[key] = value
    elif name == "pose/omega":
        st.d_omega = value
    elif name == "pose/t":
        st.d_t = value
    elif name == "undistort/z":
        st.undistort_z = value
    else:
        st.undistort_k = value


# ------------------------------------------------------------- train step

@dataclass
class _Frames:
    """Per-dataset constants reused by every epoch."""

    dirs_cam: np.ndarray        # (H*W, 3)
    images: np.ndarray          # (F, H*W, 3)
    priors: np.ndarray          # (F, H*W)
    train_ids: np.ndarray
    cloud_px: np.ndarray        # strided pixel indices for clouds and reprojection
    us: np.ndarray
    vs: np.ndarray


def _frames(ds: Dataset, cfg: TrainConfig) -> _Frames:
    us, vs = ds.K.pixel_grid()
    H, W = ds.K.height, ds.K.width
    cu, cv = ds.K.pixel_grid(cfg.cloud_stride)
    return _Frames(ds.K.camera_dirs(us, vs), ds.images.reshape(ds.n_frames, H * W, 3),
                   ds.priors.reshape(ds.n_frames, H * W), np.asarray(ds.train_ids),
                   cv * W + cu, cu, cv)


def _pose_mask(ds: Dataset, F: int) -> np.ndarray:
    # only training frames move, and the first of them is the gauge anchor
    mask = np.zeros((F, 1), dtype=bool)
    mask[ds.train_ids[1:]] = True
    return mask


def _finite(name: str, v: ad.Var, epoch: int, seed: int):
    if not np.all(np.isfinite(v.value)):
        raise TrainingError(f"non-finite {name} at epoch {epoch} (batch seed {seed}, {epoch})")


@dataclass
class EpochGraph:
    """Loss graph of one epoch before the update."""

    tape: ad.Tape
    leaves: dict[str, ad.Var]
    comps: dict[str, ad.Var]
    total: ad.Var
    strategy: str


def epoch_graph(st: TrainState, ds: Dataset, cfg: TrainConfig, frames: _Frames | None = None
                ) -> EpochGraph:
    """Build the epoch-``st.epoch`` loss on a fresh tape without stepping."""
    frames = _frames(ds, cfg) if frames is None else frames
    e = st.epoch
    rng = np.random.default_rng([cfg.seed, e])
    weights = phase_weights(e, cfg) if cfg.epochs else cfg.weights
    strategy = select_strategy(e, cfg.sampling)
    tape = ad.Tape()
    fw = st.field.on_tape(tape)
    omega = tape.var(st.d_omega)
    dt = tape.var(st.d_t)
    uz = tape.var(st.undistort_z)
    uk = tape.var(st.undistort_k)
    R_all = bmm(tape.const(st.base_R), so3_exp_var(omega))
    t_all = st.base_t + dt
    s_all = ad.softplus(uz)

    # ---- ray batch
    B = cfg.rays_per_batch
    fi = frames.train_ids[rng.integers(len(frames.train_ids), size=B)]
    pi = rng.integers(frames.dirs_cam.shape[0], size=B)
    Rb = ad.take(R_all, fi)
    dirs = ad.sum(Rb * frames.dirs_cam[pi][:, None, :], axis=-1)
    origins = ad.take(t_all, fi)
    prior_px = frames.priors[fi, pi]
    s_b, k_b = ad.take(s_all, fi), ad.take(uk, fi)
    mu = s_b.value * prior_px + k_b.value
    if not np.all(np.isfinite(mu)):
        raise TrainingError(f"non-finite prior depth at epoch {e} (batch seed {cfg.seed}, {e})")
    ts = sample_ts(strategy, mu, B, cfg.sampling, rng)
    out = render_rays(st.field, origins, dirs, ts, cfg.sampling.delta_cap, tape, fw)
    _finite("render", out, e, cfg.seed)

    comps = {"rgb": loss_rgb(out[:, :3], frames.images[fi, pi])}
    comps["depth"] = loss_self_depth(out[:, 3], prior_px, s_b, k_b, out.value[:, 4],
                                     cfg.opacity_threshold, cfg.depth_norm)

    # ---- inter-frame terms on consecutive training frames
    need_pc = cfg.constraint != "none" or cfg.use_reproj
    if need_pc and len(frames.train_ids) > 1:
        px = frames.cloud_px
        clouds, rp_clouds = {}, {}
        for i in map(int, frames.train_ids):
            pose = (R_all[i], t_all[i])
            live = s_all[i] * frames.priors[i, px] + uk[i]
            rp_clouds[i] = backproject_var(live, ds.K, pose, frames.us, frames.vs)
            if cfg.cloud_grad_undistort:
                clouds[i] = rp_clouds[i]
            else:
                # (s, k) held constant inside the point constraint
                fixed = st.scales[i] * frames.priors[i, px] + st.undistort_k[i]
                clouds[i] = backproject_var(tape.const(fixed), ds.K, pose, frames.us, frames.vs)
        pairs = list(zip(frames.train_ids[:-1], frames.train_ids[1:]))
        pc_terms, rp_terms = [], []
        for m, n in pairs:
            m, n = int(m), int(n)
            if cfg.constraint == "gpc":
                pc_terms.append(loss_gpc(clouds[m], clouds[n], cfg.gpc))
            elif cfg.constraint == "chamfer":
                pc_terms.append(loss_chamfer(clouds[m], clouds[n]))
            if cfg.use_reproj:
                rp_terms.append(reproj_from_points(rp_clouds[m], frames.images[m, px],
                                                   ds.images[n], ds.K, (R_all[n], t_all[n])))
        if pc_terms:
            comps["gpc"] = ad.sum(ad.concat([ad.reshape(t, (1,)) for t in pc_terms])) \
                * (1.0 / len(pc_terms))
        if rp_terms:
            comps["reproj"] = ad.sum(ad.concat([ad.reshape(t, (1,)) for t in rp_terms])) \
                * (1.0 / len(rp_terms))

    for name, v in comps.items():
        _finite(f"loss component {name!r}", v, e, cfg.seed)
    total = total_loss(comps, weights)
    leaves = {f"field/{k}": fw[k] for k in st.field.arrays}
    leaves.update({"pose/omega": omega, "pose/t": dt, "undistort/z": uz, "undistort/k": uk})
    return EpochGraph(tape, leaves, comps, total, strategy)


def train_epoch(st: TrainState, ds: Dataset, cfg: TrainConfig, frames: _Frames | None = None
                ) -> dict:
    """One optimisation step; mutates ``st`` and returns the loss record."""
    frames = _frames(ds, cfg) if frames is None else frames
    e = st.epoch
    graph = epoch_graph(st, ds, cfg, frames)
    graph.tape.backward(graph.total)
    comps, total, strategy, lv = graph.comps, graph.total, graph.strategy, graph.leaves

    # ---- Adam
    t = e + 1
    f = lr_factor(e, cfg)
    pose_mask = _pose_mask(ds, ds.n_frames)
    train_mask = np.zeros(ds.n_frames, dtype=bool)
    train_mask[frames.train_ids] = True
    groups = [(f"field/{k}", lv[f"field/{k}"], cfg.lr_field, None) for k in st.field.arrays]
    groups += [("pose/omega", lv["pose/omega"], cfg.lr_pose, pose_mask),
               ("pose/t", lv["pose/t"], cfg.lr_pose, pose_mask),
               ("undistort/z", lv["undistort/z"], cfg.lr_undistort, train_mask),
               ("undistort/k", lv["undistort/k"], cfg.lr_undistort, train_mask)]
    if cfg.phase3_field_only and e >= cfg.phase2 * cfg.epochs:
        groups = groups[:len(st.field.arrays)]
    for name, var, lr, mask in groups:
        g = var.grad
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} at epoch {e} "
                                f"(batch seed {cfg.seed}, {e})")
        old = st.arrays()[name]
        _set_array(st, name, adam_step(old, g, st.moments[name], lr * f, t, mask=mask))
    st.epoch += 1
    rec = {"epoch": e, "strategy": strategy, "total": float(total.value)}
    for name, key in (("rgb", "l_rgb"), ("depth", "l_depth"), ("gpc", "l_gpc"),
                      ("reproj", "l_reproj")):
        rec[key] = float(comps[name].value) if name in comps else 0.0
    return rec


# ------------------------------------------------------------ evaluation

def pose_errors(st: TrainState, ds: Dataset) -> tuple[float, float, float]:
    """``(ate, rpe_t, rpe_r)`` of the training frames against ground truth."""
    ids = list(ds.train_ids)
    est = Trajectory(ids, [st.poses[i] for i in ids])
    ref = Trajectory(ids, [ds.gt_poses[i] for i in ids])
    a = ate(est, ref) if len(ids) >= 3 else float(np.linalg.norm(est.centers - ref.centers))
    rt, rr = rpe(est, ref) if len(ids) >= 2 else (0.0, 0.0)
    return a, rt, rr


def initial_pose_errors(ds: Dataset) -> tuple[float, float, float]:
    ids = list(ds.train_ids)
    est = Trajectory(ids, [ds.init_poses[i] for i in ids])
    ref = Trajectory(ids, [ds.gt_poses[i] for i in ids])
    return (ate(est, ref), *rpe(est, ref))


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path, st: TrainState, cfg: TrainConfig, rows: list[dict]) -> None:
    arrays = {f"p/{k}": v for k, v in st.arrays().items()}
    arrays.update({f"m/{k}": m.m for k, m in st.moments.items()})
    arrays.update({f"v/{k}": m.v for k, m in st.moments.items()})
    arrays["base_R"] = st.base_R
    arrays["base_t"] = st.base_t
    meta = {"epoch": st.epoch, "config": cfg.to_dict(), "field": st.field.meta(),
            # every epoch reseeds from (seed, epoch): this pair is the RNG state
            "rng": {"seed": cfg.seed, "next_epoch": st.epoch}, "log": rows}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    save_npz_atomic(path, arrays)


def load_checkpoint(path) -> tuple[TrainState, TrainConfig, list[dict]]:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        data = {k: z[k].copy() for k in z.files if k != "meta"}
    fp = FieldParams(**meta["field"])
    fp.arrays = {k[len("p/field/"):]: v for k, v in data.items() if k.startswith("p/field/")}
    fp.arrays = {k: fp.arrays[k] for k in fp.layer_shapes()}
    st = TrainState(fp, data["base_R"], data["base_t"], data["p/pose/omega"], data["p/pose/t"],
                    data["p/undistort/z"], data["p/undistort/k"], {}, meta["epoch"])
    st.moments = {k: AdamMoments(data[f"m/{k}"], data[f"v/{k}"]) for k in st.arrays()}
    return st, TrainConfig.from_dict(meta["config"]), meta["log"]


def _fmt(v) -> str:
    return v if isinstance(v, str) else repr(float(v)) if not isinstance(v, int) else str(v)


def log_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in LOG_HEADER])
    return buf.getvalue()


def read_log_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        d = {k: (r[k] if k == "strategy" else int(r[k]) if k == "epoch" else float(r[k]))
             for k in LOG_HEADER}
        out.append(d)
    return out


# ------------------------------------------------------------------ driver

def run_training(cfg: TrainConfig, ds: Dataset, out_dir=None, resume_from=None,
                 stop_at: int | None = None, progress=None) -> tuple[TrainState, list[dict]]:
    """Full loop. Returns the final state and the per-epoch log.

    With ``out_dir``, writes ``metrics.csv`` at the end and ``checkpoint.npz``
    every ``checkpoint_every`` epochs and at the end. ``stop_at`` ends the
    loop early (the schedule still follows ``cfg.epochs``), which is how an
    interrupted run is simulated.
    """
    if resume_from is not None:
        st, saved_cfg, rows = load_checkpoint(resume_from)
        if saved_cfg.to_dict() != cfg.to_dict():
            raise TrainingError("checkpoint was written with a different config")
    else:
        st, rows = init_state(cfg, ds), []
    out = Path(out_dir) if out_dir is not None else None
    frames = _frames(ds, cfg)
    end = cfg.epochs if stop_at is None else min(stop_at, cfg.epochs)
    while st.epoch < end:
        rec = train_epoch(st, ds, cfg, frames)
        if cfg.metrics_every and (rec["epoch"] % cfg.metrics_every == 0 or st.epoch == end):
            rec["ate"], rec["rpe_t"], rec["rpe_r"] = pose_errors(st, ds)
        else:
            rec["ate"] = rec["rpe_t"] = rec["rpe_r"] = float("nan")
        rows.append(rec)
        if progress is not None:
            progress(rec)
        if out is not None and cfg.checkpoint_every and st.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out / "checkpoint.npz", st, cfg, rows)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.npz", st, cfg, rows)
        (out / "metrics.csv").write_text(log_to_csv(rows))
    return st, rows


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    """Copy of ``cfg`` with top-level or ``sampling.*`` fields replaced."""
    samp = {k[len("sampling."):]: v for k, v in kw.items() if k.startswith("sampling.")}
    top = {k: v for k, v in kw.items() if not k.startswith("sampling.")}
    if samp:
        top["sampling"] = replace(cfg.sampling, **samp)
    return replace(cfg, **top)

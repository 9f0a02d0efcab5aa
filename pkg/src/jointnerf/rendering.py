"""Discrete volume rendering of color, expected depth and opacity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .field import FieldParams, field_forward
from .sampling import (RaySampleSet, SamplingConfig, select_strategy, tdbs_ts,
                       uniform_ts)


class RenderError(ValueError):
    pass


@dataclass
class RenderedPixel:
    color: np.ndarray
    depth: float
    opacity: float


def composite(sigmas, colors, ts, cap: float, depth_mode: str = "expected") -> ad.Var:
    """Fused compositing op over ``R`` rays of ``S`` samples.

    Returns a ``(R, 5)`` Var: color (3), depth, opacity. ``depth_mode =
    "literal"`` reports the bare integral of ``T * sigma`` (equal to the
    opacity) in the depth column, for comparison only.
    """
    tape = next((x.tape for x in (sigmas, colors, ts) if isinstance(x, ad.Var)), None)
    tape = ad.Tape() if tape is None else tape
    sigmas, colors, ts = tape.lift(sigmas), tape.lift(colors), tape.lift(ts)
    sv, cv, tv = sigmas.value, colors.value, ts.value
    if sv.shape != tv.shape or cv.shape != sv.shape + (3,):
        raise RenderError(
            f"composite: shapes sigma {sv.shape}, color {cv.shape}, ts {tv.shape}")
    if np.any(sv < 0):
        raise RenderError("negative density")
    out, w, tr = kernels.composite_forward(sv, cv, tv, cap)
    if depth_mode == "literal":
        out = out.copy()
        out[:, 3] = out[:, 4]

    def vjp(g):
        g = np.array(g, dtype=np.float64)
        if depth_mode == "literal":
            g[:, 4] += g[:, 3]
            g[:, 3] = 0.0
        return kernels.composite_backward(g, sv, cv, tv, cap, w, tr)

    return ad.custom("composite", [sigmas, colors, ts], out, vjp)


def compositing_weights(sigmas: np.ndarray, ts: np.ndarray, cap: float) -> np.ndarray:
    sv = np.atleast_2d(sigmas)
    _, w, _ = kernels.composite_forward(sv, np.zeros(sv.shape + (3,)), np.atleast_2d(ts), cap)
    return w


def _single(sigmas, samples: RaySampleSet, colors):
    ts = samples.ts
    tape = next((x.tape for x in (sigmas, colors, ts) if isinstance(x, ad.Var)), None)
    tape = ad.Tape() if tape is None else tape
    n = np.shape(ts.value if isinstance(ts, ad.Var) else ts)[0]
    if colors is None:
        colors = np.zeros((n, 3))
    s = ad.reshape(tape.lift(sigmas), (1, n))
    c = ad.reshape(tape.lift(colors), (1, n, 3))
    t = ad.reshape(tape.lift(ts), (1, n))
    return composite(s, c, t, float(np.asarray(samples.deltas)[-1]))


def composite_color(sigmas, colors, samples: RaySampleSet) -> ad.Var:
    """Color of one ray; ``(3,)`` Var."""
    out = _single(sigmas, samples, colors)
    return ad.reshape(out[0, :3], (3,))


def composite_depth(sigmas, samples: RaySampleSet) -> ad.Var:
    """Expected termination depth of one ray (0 for an empty ray)."""
    out = _single(sigmas, samples, None)
    return out[0, 3]


def sample_ts(strategy: str, prior_depth, n_rays: int, cfg: SamplingConfig, rng,
              sigma_bar: float | None = None) -> np.ndarray:
    if strategy == "tdbs":
        return tdbs_ts(prior_depth, cfg, sigma_bar, rng)
    return uniform_ts(n_rays, cfg, rng)


def render_rays(params: FieldParams, origins, dirs, ts: np.ndarray, cap: float,
                tape: ad.Tape, weights=None, depth_mode: str = "expected") -> ad.Var:
    """Render ``R`` rays at sample depths ``ts`` (``(R, S)``); ``(R, 5)`` Var."""
    origins = tape.lift(origins)
    dirs = tape.lift(dirs)
    R, S = ts.shape
    pts = ad.reshape(origins, (R, 1, 3)) + ad.reshape(dirs, (R, 1, 3)) * ts[:, :, None]
    pts = ad.reshape(pts, (R * S, 3))
    # evaluate the direction encoding once per ray, not per sample
    rep = np.repeat(np.arange(R), S)
    rgb, sigma = field_forward(params, pts, dirs, tape, weights, dir_index=rep)
    return composite(ad.reshape(sigma, (R, S)), ad.reshape(rgb, (R, S, 3)), ts, cap,
                     depth_mode)


def render_ray(params: FieldParams, origin, direction, cfg: SamplingConfig,
               prior_depth: float, epoch: int, rng, tape: ad.Tape | None = None,
               weights=None) -> RenderedPixel:
    tape = ad.Tape() if tape is None else tape
    strategy = select_strategy(epoch, cfg)
    ts = sample_ts(strategy, np.array([prior_depth]), 1, cfg, rng)
    out = render_rays(params, np.asarray(origin, dtype=np.float64)[None],
                      np.asarray(direction, dtype=np.float64)[None], ts,
                      cfg.delta_cap, tape, weights).value[0]
    return RenderedPixel(out[:3].copy(), float(out[3]), float(out[4]))


def render_image(params: FieldParams, K, pose, cfg: SamplingConfig, prior=None,
                 strategy: str = "uniform", rng=None, chunk: int = 2048):
    """Forward-only image render; returns ``(rgb, depth, opacity)`` arrays."""
    from .geometry import generate_rays

    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    us, vs = K.pixel_grid()
    o, d = generate_rays(K, pose, us, vs)
    out = np.empty((len(us), 5))
    prior_flat = None if prior is None else np.asarray(prior).reshape(-1)
    for s in range(0, len(us), chunk):
        sl = slice(s, s + chunk)
        n = len(us[sl])
        ts = sample_ts(strategy, None if prior_flat is None else prior_flat[sl], n, cfg, rng)
        out[sl] = render_rays(params, o[sl], d[sl], ts, cfg.delta_cap, ad.Tape()).value
    H, W = K.height, K.width
    return (out[:, :3].reshape(H, W, 3), out[:, 3].reshape(H, W),
            out[:, 4].reshape(H, W))

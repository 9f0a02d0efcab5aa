import numpy as np
import pytest
from scipy import integrate

from jointnerf import autodiff as ad
from jointnerf import kernels
from jointnerf.field import FieldParams
from jointnerf.geometry import CameraIntrinsics, PoseSE3
from jointnerf.rendering import (RenderError, composite, composite_color, composite_depth,
                                 compositing_weights, render_image, render_ray, render_rays)
from jointnerf.sampling import RaySampleSet, SamplingConfig, sample_uniform, tdbs_ts, uniform_ts
from jointnerf.scenegen import AnalyticScene, Primitive, scene_field


def grid(n, near=0.0, far=1.0):
    cfg = SamplingConfig(n_samples=n, near=near, far=far, stratified_jitter=False)
    return sample_uniform(cfg)


def test_transparent_ray(backend):
    s = grid(16)
    c = composite_color(np.zeros(16), np.ones((16, 3)), s)
    np.testing.assert_array_equal(c.value, 0.0)
    assert float(composite_depth(np.zeros(16), s).value) == 0.0


def test_homogeneous_medium(backend):
    s = grid(128)
    c0 = np.array([1.0, 0.5, 0.25])
    col = composite_color(np.full(128, 2.0), np.tile(c0, (128, 1)), s).value
    np.testing.assert_allclose(col, c0 * (1 - np.exp(-2.0)), atol=1e-3)


def test_homogeneous_depth_quadrature(backend):
    # samples start half a cell in; the medium spans [t0, t0 + 1]
    n, sig = 1024, 2.0
    s = grid(n)
    t0 = s.ts[0]
    x = np.linspace(t0, t0 + 1, 100_001)
    ref = integrate.simpson(x * sig * np.exp(-sig * (x - t0)), x=x)
    assert abs(float(composite_depth(np.full(n, sig), s).value) - ref) < 1e-3


def test_single_opaque_sample(backend):
    s = grid(64)
    k = int(np.argmin(np.abs(s.ts - 0.7)))
    s = RaySampleSet(s.ts + (0.7 - s.ts[k]), s.deltas)
    sig = np.zeros(64)
    sig[k] = 20.0 / s.deltas[k]
    cols = np.random.default_rng(0).uniform(size=(64, 3))
    np.testing.assert_allclose(composite_color(sig, cols, s).value, cols[k], atol=1e-8)
    assert abs(float(composite_depth(sig, s).value) - 0.7) < 1e-6


def test_negative_density_rejected(backend):
    with pytest.raises(RenderError):
        composite_color(-np.ones(4), np.ones((4, 3)), grid(4))


def test_weights_nonnegative_and_bounded(rng, backend):
    sig = rng.exponential(3.0, (50, 32))
    ts = np.sort(rng.uniform(0.1, 4, (50, 32)), axis=1)
    w = compositing_weights(sig, ts, 0.1)
    assert np.all(w >= 0)
    assert np.all(w.sum(axis=1) <= 1 + 1e-12)


def test_composite_gradients(rng, backend):
    R, S = 3, 12
    sig0 = rng.uniform(0.1, 3, (R, S))
    col0 = rng.uniform(size=(R, S, 3))
    ts0 = np.sort(rng.uniform(0.2, 2.0, (R, S)), axis=1)
    g = rng.normal(size=(R, 5))

    def make(which):
        def f(t, x):
            args = {"s": sig0, "c": col0, "t": ts0}
            args[which] = x
            return ad.sum(composite(args["s"], args["c"], args["t"], 0.05) * g)
        return f

    assert ad.finite_diff_check(make("s"), sig0) < 1e-5
    assert ad.finite_diff_check(make("c"), col0) < 1e-5
    assert ad.finite_diff_check(make("t"), ts0) < 1e-5


def test_literal_depth_mode_reports_opacity(rng):
    sig = rng.uniform(0, 2, (2, 8))
    ts = np.sort(rng.uniform(0, 1, (2, 8)), axis=1)
    out = composite(sig, np.zeros((2, 8, 3)), ts, 0.1, depth_mode="literal").value
    np.testing.assert_allclose(out[:, 3], out[:, 4], rtol=0, atol=0)


def test_permute_then_sort_invariant(rng):
    s = np.sort(rng.uniform(0.1, 2, 20))
    sig = rng.uniform(0, 3, 20)
    cols = rng.uniform(size=(20, 3))
    base = composite(sig[None], cols[None], s[None], 0.1).value
    p = rng.permutation(20)
    order = np.argsort(s[p])
    again = composite(sig[p][order][None], cols[p][order][None], s[p][order][None], 0.1).value
    np.testing.assert_array_equal(base, again)


def _constant_field(albedo, bias):
    p = FieldParams.init(np.random.default_rng(0), width=8, depth=1, L_pos=1, L_dir=1)
    for k in p.arrays:
        p.arrays[k][:] = 0.0
    p.arrays["sigma.b"][:] = bias
    logit = np.log(albedo / (1 - albedo))
    p.arrays["rgb.b"][:] = logit
    return p


def test_constant_field_pixel(rng):
    albedo = np.array([0.2, 0.6, 0.9])
    p = _constant_field(albedo, 1.0)
    cfg = SamplingConfig(n_samples=64, near=0.1, far=2.0)
    px = render_ray(p, np.zeros(3), np.array([0, 0, 1.0]), cfg, 1.0, 0, rng)
    np.testing.assert_allclose(px.color, albedo * px.opacity, atol=1e-12)
    assert 0 < px.opacity < 1


def test_render_ray_deterministic():
    p = FieldParams.init(np.random.default_rng(3))
    cfg = SamplingConfig(n_samples=32, near=0.1, far=3.0, T_s=5)
    d = np.array([0.1, -0.2, 1.0]) / np.linalg.norm([0.1, -0.2, 1.0])
    a = render_ray(p, np.zeros(3), d, cfg, 1.5, 2, np.random.default_rng(7))
    b = render_ray(p, np.zeros(3), d, cfg, 1.5, 2, np.random.default_rng(7))
    assert a.color.tobytes() == b.color.tobytes() and a.depth == b.depth


def _random_rays(rng, n):
    d = rng.normal(size=(n, 3)) * [0.3, 0.3, 1] + [0, 0, 1]
    return np.zeros((n, 3)), d / np.linalg.norm(d, axis=1, keepdims=True)


def test_field_render_matches_fine_reference(rng, backend):
    p = FieldParams.init(np.random.default_rng(11), pos_scale=4.0)
    o, d = _random_rays(rng, 10)
    coarse = SamplingConfig(n_samples=128, near=0.1, far=4.0, stratified_jitter=False)
    fine = SamplingConfig(n_samples=4096, near=0.1, far=4.0, stratified_jitter=False)
    a = render_rays(p, o, d, uniform_ts(10, coarse, None), coarse.delta_cap, ad.Tape()).value
    b = render_rays(p, o, d, uniform_ts(10, fine, None), fine.delta_cap, ad.Tape()).value
    assert np.max(np.abs(a[:, :3] - b[:, :3])) < 2e-3


def test_field_render_gradient_wrt_pose(rng):
    p = FieldParams.init(np.random.default_rng(2), width=8, depth=2, L_pos=2, L_dir=1)
    ts = np.sort(rng.uniform(0.5, 2.0, (2, 8)), axis=1)
    dcam = np.array([[0.1, 0.0, 1.0], [-0.2, 0.1, 1.0]])
    dcam /= np.linalg.norm(dcam, axis=1, keepdims=True)
    from jointnerf.geometry import so3_exp_var

    def f(t, w):
        R = so3_exp_var(w)
        dirs = ad.matmul(dcam, ad.transpose(R))
        out = render_rays(p, np.zeros((2, 3)), dirs, ts, 0.1, t)
        return ad.sum(out * np.array([1.0, 0.5, -0.3, 0.2, 0.1]))
    assert ad.finite_diff_check(f, np.array([0.05, -0.02, 0.01])) < 1e-5


def test_tdbs_closer_than_uniform_near_surface(rng):
    # a thin slab; TDBS samples cluster around the (nearly right) prior
    scene = AnalyticScene([Primitive("box", (0, 0, 2.0), (5, 5, 0.05), density=60,
                                     albedo=(0.8, 0.4, 0.2), texture_amp=0.5)], 0.1, 4.0)
    o, d = _random_rays(rng, 100)
    cfg = SamplingConfig(n_samples=128, near=0.1, far=4.0, sigma_bar=0.2)

    def render(ts):
        pts = o[:, None] + d[:, None] * ts[..., None]
        sig, col = scene_field(scene, pts)
        return kernels.composite_forward(sig, col, ts, cfg.delta_cap)[0]

    ref_ts = np.broadcast_to(0.1 + 3.9 * (np.arange(4096) + 0.5) / 4096, (100, 4096)).copy()
    ref = render(ref_ts)
    true_depth = (2.0 - 0.05) / d[:, 2]
    prior = true_depth + rng.uniform(-0.05, 0.05, 100)
    e_tdbs = np.abs(render(tdbs_ts(prior, cfg, None, rng)) - ref)[:, :3].max(axis=1)
    e_uni = np.abs(render(uniform_ts(100, cfg, rng)) - ref)[:, :3].max(axis=1)
    assert np.median(e_tdbs) <= np.median(e_uni)


def test_render_image_shapes():
    p = FieldParams.init(np.random.default_rng(0))
    K = CameraIntrinsics.from_fov(8, 6, 60)
    cfg = SamplingConfig(n_samples=8, near=0.1, far=4.0)
    rgb, depth, acc = render_image(p, K, PoseSE3.identity(), cfg, rng=np.random.default_rng(0),
                                   chunk=7)
    assert rgb.shape == (6, 8, 3) and depth.shape == (6, 8) and acc.shape == (6, 8)
    assert np.all((acc >= 0) & (acc <= 1))

import dataclasses

import numpy as np
import pytest

from jointnerf import trainer as T
from jointnerf.dataset import SceneConfig, generate_dataset
from jointnerf.losses import LossWeights
from jointnerf.sampling import SamplingConfig
from jointnerf.scenegen import PriorDepthConfig

TINY = SceneConfig(n_frames=5, width=16, height=16, gt_samples=256, holdout_every=4)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_dataset(TINY, PriorDepthConfig(s_true=1.2, k_true=0.05, noise_std=0.02,
                                                   corruption_fraction=0.05))


def tiny_cfg(**kw):
    base = dict(epochs=12, rays_per_batch=32, cloud_stride=4,
                sampling=SamplingConfig(n_samples=16, T_s=4, near=0.1, far=4.0,
                                        sigma_bar=0.39),
                field=T.FieldConfig(width=16, depth=2, L_pos=3, L_dir=2))
    base.update(kw)
    return T.TrainConfig(**base)


# --------------------------------------------------------------- schedule

def test_phase_weights():
    cfg = T.TrainConfig(epochs=100, weights=LossWeights(0.04, 1.0, 2.0))
    assert T.phase_weights(0, cfg) == LossWeights(0.04, 1.0, 2.0)
    assert T.phase_weights(49, cfg) == LossWeights(0.04, 1.0, 2.0)
    w = T.phase_weights(65, cfg)
    assert w.lambda2 == pytest.approx(0.5) and w.lambda3 == pytest.approx(1.0)
    assert T.phase_weights(80, cfg) == LossWeights(0.0, 0.0, 0.0)
    assert T.phase_weights(99, cfg) == LossWeights(0.0, 0.0, 0.0)


def test_lr_factor():
    cfg = T.TrainConfig(epochs=100)
    assert T.lr_factor(0, cfg) == 1.0 and T.lr_factor(49, cfg) == 1.0
    assert T.lr_factor(50, cfg) == pytest.approx(1.0)
    assert T.lr_factor(75, cfg) == pytest.approx(0.55)
    assert T.lr_factor(100, cfg) == pytest.approx(0.1)
    f = [T.lr_factor(e, cfg) for e in range(50, 101)]
    assert all(a >= b for a, b in zip(f, f[1:]))


def test_config_validation():
    with pytest.raises(T.TrainingError):
        T.TrainConfig(phase1=0.9, phase2=0.8)
    with pytest.raises(T.TrainingError):
        T.TrainConfig(lr_pose=-1.0)
    with pytest.raises(T.TrainingError):
        T.TrainConfig(constraint="icp")
    with pytest.raises(T.TrainingError):
        T.TrainConfig(init_scale=0.0)
    cfg = tiny_cfg()
    assert T.TrainConfig.from_dict(cfg.to_dict()) == cfg


# ------------------------------------------------------------------- Adam

def test_adam_matches_reference(rng):
    p = rng.normal(size=(4, 3))
    mom = T.AdamMoments.zeros_like(p)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    ref = p.copy()
    for t in range(1, 6):
        g = rng.normal(size=p.shape)
        p = T.adam_step(p, g, mom, 0.01, t)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-14)


def test_adam_first_step_is_lr_sign():
    p = np.zeros(3)
    out = T.adam_step(p, np.array([2.0, -0.5, 1e-3]), T.AdamMoments.zeros_like(p), 0.1, 1)
    np.testing.assert_allclose(out, [-0.1, 0.1, -0.1], rtol=1e-4)


def test_adam_mask_and_errors():
    p = np.ones((3, 2))
    mom = T.AdamMoments.zeros_like(p)
    mask = np.array([[True], [False], [True]])
    out = T.adam_step(p, np.ones_like(p), mom, 0.1, 1, mask=mask)
    assert np.array_equal(out[1], p[1]) and np.all(mom.m[1] == 0)
    assert np.all(out[0] < 1)
    with pytest.raises(T.TrainingError):
        T.adam_step(p, np.ones_like(p), mom, 0.1, 0)
    with pytest.raises(T.TrainingError):
        T.adam_step(p, np.full_like(p, np.nan), mom, 0.1, 1)
    with pytest.raises(T.TrainingError):
        T.adam_step(p, np.ones(2), mom, 0.1, 1)


# ----------------------------------------------------------------- training

def test_anchor_and_holdout_bit_identical(tiny_ds):
    cfg = tiny_cfg(lr_pose=1e-2)
    st, _ = T.run_training(cfg, tiny_ds)
    st0 = T.init_state(cfg, tiny_ds)
    for i in [0, tiny_ds.train_ids[0], *tiny_ds.holdout_ids]:
        assert np.array_equal(st.d_omega[i], st0.d_omega[i])
        assert np.array_equal(st.d_t[i], st0.d_t[i])
        assert np.array_equal(st.poses[i].matrix(), st0.poses[i].matrix())
    moved = [i for i in tiny_ds.train_ids[1:] if not np.array_equal(st.d_t[i], st0.d_t[i])]
    assert moved == tiny_ds.train_ids[1:]


def test_zero_pose_lr_field_still_learns():
    ds = generate_dataset(TINY, PriorDepthConfig())
    ds = dataclasses.replace(ds, init_poses=list(ds.gt_poses))
    cfg = tiny_cfg(epochs=80, lr_pose=0.0, lr_field=5e-3, rays_per_batch=64)
    st, rows = T.run_training(cfg, ds)
    st0 = T.init_state(cfg, ds)
    assert np.array_equal(st.d_omega, st0.d_omega) and np.array_equal(st.d_t, st0.d_t)
    for a, b in zip(st.poses, st0.poses):
        assert np.array_equal(a.matrix(), b.matrix())
    first = np.mean([r["l_rgb"] for r in rows[:10]])
    last = np.mean([r["l_rgb"] for r in rows[-10:]])
    assert last < first


def test_strategy_log(tiny_ds):
    _, rows = T.run_training(tiny_cfg(), tiny_ds)
    assert [r["strategy"] for r in rows] == ["tdbs"] * 4 + ["uniform"] * 8
    cfg = tiny_cfg(sampling=dataclasses.replace(tiny_cfg().sampling, strategy="uniform"))
    _, rows = T.run_training(cfg, tiny_ds)
    assert {r["strategy"] for r in rows} == {"uniform"}


def test_finite_losses_over_seeds(tiny_ds):
    for seed in range(3):
        _, rows = T.run_training(tiny_cfg(seed=seed, epochs=6), tiny_ds)
        assert all(np.isfinite(r["total"]) for r in rows)
        assert all(np.isfinite(r["ate"]) for r in rows)


def test_resume_is_bit_exact(tiny_ds, tmp_path):
    cfg = tiny_cfg(checkpoint_every=5)
    full, rows_full = T.run_training(cfg, tiny_ds, tmp_path / "a")
    T.run_training(cfg, tiny_ds, tmp_path / "b", stop_at=5)
    res, rows_res = T.run_training(cfg, tiny_ds, tmp_path / "b",
                                   resume_from=tmp_path / "b" / "checkpoint.npz")
    for k, v in full.arrays().items():
        assert np.array_equal(v, res.arrays()[k]), k
    for k in full.moments:
        assert np.array_equal(full.moments[k].m, res.moments[k].m)
        assert np.array_equal(full.moments[k].v, res.moments[k].v)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
        (tmp_path / "b" / "metrics.csv").read_bytes()
    with pytest.raises(T.TrainingError):
        T.run_training(tiny_cfg(seed=5), tiny_ds, resume_from=tmp_path / "a" / "checkpoint.npz")


def test_checkpoint_roundtrip(tiny_ds, tmp_path):
    cfg = tiny_cfg(epochs=3)
    st, rows = T.run_training(cfg, tiny_ds)
    T.save_checkpoint(tmp_path / "c.npz", st, cfg, rows)
    back, cfg2, rows2 = T.load_checkpoint(tmp_path / "c.npz")
    assert cfg2 == cfg and back.epoch == 3 and len(rows2) == 3
    for k, v in st.arrays().items():
        assert np.array_equal(v, back.arrays()[k])


def test_zero_epochs(tiny_ds, tmp_path):
    cfg = tiny_cfg(epochs=0)
    st, rows = T.run_training(cfg, tiny_ds, tmp_path)
    assert rows == [] and st.epoch == 0
    for a, b in zip(st.poses, tiny_ds.init_poses):
        np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-15)
    assert (tmp_path / "metrics.csv").read_text().strip() == ",".join(T.LOG_HEADER)


def test_log_csv_roundtrip(tiny_ds, tmp_path):
    _, rows = T.run_training(tiny_cfg(epochs=3), tiny_ds, tmp_path)
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == \
        "epoch,l_rgb,l_depth,l_gpc,l_reproj,total,strategy,ate,rpe_t,rpe_r"
    back = T.read_log_csv(tmp_path / "metrics.csv")
    assert back == rows


def test_nan_prior_aborts_with_diagnostic(tiny_ds):
    ds = dataclasses.replace(tiny_ds, priors=tiny_ds.priors.copy())
    ds.priors[:] = np.nan
    with pytest.raises(T.TrainingError, match="epoch 0"):
        T.run_training(tiny_cfg(epochs=2), ds)


def test_ablation_switches(tiny_ds):
    _, rows = T.run_training(tiny_cfg(epochs=2, constraint="none", use_reproj=False), tiny_ds)
    assert all(r["l_gpc"] == 0 and r["l_reproj"] == 0 for r in rows)
    _, rows = T.run_training(tiny_cfg(epochs=2, constraint="chamfer"), tiny_ds)
    assert all(r["l_gpc"] > 0 and r["l_reproj"] > 0 for r in rows)


def test_phase3_freezes_poses(tiny_ds):
    cfg = tiny_cfg(epochs=10, phase3_field_only=True)
    st8, _ = T.run_training(cfg, tiny_ds, stop_at=8)
    st10, _ = T.run_training(cfg, tiny_ds)
    assert np.array_equal(st8.d_t, st10.d_t) and np.array_equal(st8.undistort_k, st10.undistort_k)
    assert not np.array_equal(st8.field.arrays["h0.W"], st10.field.arrays["h0.W"])


def test_init_scale(tiny_ds):
    st = T.init_state(tiny_cfg(init_scale=1.2, init_shift=0.05), tiny_ds)
    np.testing.assert_allclose(st.scales, 1.2, rtol=1e-12)
    np.testing.assert_allclose(st.undistort_k, 0.05)


def test_overrides():
    cfg = T.with_overrides(tiny_cfg(), epochs=3, **{"sampling.strategy": "tdbs"})
    assert cfg.epochs == 3 and cfg.sampling.strategy == "tdbs"

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointnerf import autodiff as ad
from jointnerf.geometry import (CameraIntrinsics, GeometryError, PoseSE3, backproject,
                                generate_ray, generate_ray_var, generate_rays, project,
                                project_var, read_trajectory, relative_pose, se3_exp, se3_log,
                                so3_exp, so3_exp_var, so3_log, write_trajectory)

K = CameraIntrinsics(40.0, 42.0, 24.0, 20.0, 48, 40)


def random_pose(rng, max_angle=3.0):
    w = rng.normal(size=3)
    w *= rng.uniform(0, max_angle) / np.linalg.norm(w)
    return PoseSE3(w, rng.normal(size=3))


def test_intrinsics_validate():
    with pytest.raises(GeometryError):
        CameraIntrinsics(0, 1, 1, 1, 4, 4)
    with pytest.raises(GeometryError):
        CameraIntrinsics(1, 1, 5, 1, 4, 4)


def test_exp_identity_and_quarter_turn():
    R, t = se3_exp(np.zeros(3), np.zeros(3))
    np.testing.assert_array_equal(R, np.eye(3))
    np.testing.assert_array_equal(t, np.zeros(3))
    R = so3_exp([0, 0, np.pi / 2])
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


def test_log_exp_round_trip(rng):
    for _ in range(100):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 3) / np.linalg.norm(w)
        R = so3_exp(w)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-10)
        assert abs(np.linalg.det(R) - 1) < 1e-10
        np.testing.assert_allclose(so3_log(R), w, atol=1e-9)
    w, t = se3_log(*se3_exp([0.1, 0.2, 0.3], [1, 2, 3]))
    np.testing.assert_allclose(w, [0.1, 0.2, 0.3], atol=1e-12)


def test_log_small_angle():
    w = np.array([1e-9, -2e-9, 3e-10])
    np.testing.assert_allclose(so3_log(so3_exp(w)), w, rtol=1e-6, atol=1e-18)


def test_log_at_pi_raises():
    with pytest.raises(GeometryError):
        so3_log(np.diag([1.0, -1.0, -1.0]))


def test_principal_ray():
    o, d = generate_ray(K, PoseSE3.identity(), (K.cx - 0.5, K.cy - 0.5))
    np.testing.assert_allclose(d, [0, 0, 1], atol=1e-15)
    np.testing.assert_array_equal(o, 0)
    p = PoseSE3(np.zeros(3), [1.0, 2.0, 3.0])
    o2, d2 = generate_ray(K, p, (3, 7))
    np.testing.assert_array_equal(o2, [1, 2, 3])
    np.testing.assert_allclose(d2, generate_ray(K, PoseSE3.identity(), (3, 7))[1], atol=0)


def test_ray_directions_unit(rng):
    us, vs = K.pixel_grid()
    _, d = generate_rays(K, random_pose(rng), us, vs)
    assert np.max(np.abs(np.linalg.norm(d, axis=1) - 1)) < 1e-12


def test_direction_gradient_wrt_omega(rng):
    w0 = rng.normal(size=3) * 0.5
    c = rng.normal(size=3)

    def f(t, w):
        _, d = generate_ray_var(K, w, t.const(np.zeros(3)), (5, 9))
        return ad.sum(d * c)
    assert ad.finite_diff_check(f, w0) < 1e-6
    assert ad.finite_diff_check(f, np.zeros(3)) < 1e-6


def test_so3_exp_var_batched_matches_numpy(rng):
    W = rng.normal(size=(4, 3))
    t = ad.Tape()
    R = so3_exp_var(t.var(W)).value
    for i in range(4):
        np.testing.assert_allclose(R[i], so3_exp(W[i]), atol=1e-14)


def test_backproject_principal():
    # principal point on a pixel centre
    Kc = CameraIntrinsics(40.0, 40.0, 24.5, 20.5, 48, 40)
    depth = np.ones((K.height, K.width))
    cloud = backproject(depth, Kc, PoseSE3.identity())
    us, vs = Kc.pixel_grid()
    i = np.flatnonzero((us == 24) & (vs == 20))[0]
    np.testing.assert_allclose(cloud.points[i], [0, 0, 1], atol=1e-15)
    with pytest.raises(GeometryError):
        backproject(np.zeros((K.height, K.width)), K, PoseSE3.identity())
    with pytest.raises(GeometryError):
        backproject(-depth, K, PoseSE3.identity())


def test_project_backproject_inverse(rng):
    for _ in range(5):
        pose = random_pose(rng)
        depth = rng.uniform(0.5, 5, (K.height, K.width))
        cloud = backproject(depth, K, pose)
        u, v, z = project(K, pose, cloud.points)
        us, vs = K.pixel_grid()
        assert np.max(np.abs(u - us)) < 1e-9 and np.max(np.abs(v - vs)) < 1e-9
        assert np.all(z > 0)


def test_project_principal_and_linearity():
    u, v, z = project(K, PoseSE3.identity(), [0, 0, 1.0])
    assert (u[0], v[0], z[0]) == (K.cx - 0.5, K.cy - 0.5, 1.0)
    K2 = CameraIntrinsics(2 * K.fx, K.fy, K.cx, K.cy, K.width, K.height)
    X = np.array([[0.3, -0.2, 2.0]])
    u1, _, _ = project(K, PoseSE3.identity(), X)
    u2, _, _ = project(K2, PoseSE3.identity(), X)
    assert abs((u2[0] - K.cx + 0.5) - 2 * (u1[0] - K.cx + 0.5)) < 1e-12


def test_project_behind_camera_masked():
    u, v, z = project(K, PoseSE3.identity(), [[0, 0, -1.0], [0, 0, 1.0]])
    assert np.isnan(u[0]) and np.isnan(v[0]) and not np.isnan(u[1])


def test_project_var_gradient(rng):
    X = rng.normal(size=(5, 3)) + [0, 0, 4]
    w0, t0 = rng.normal(size=3) * 0.1, rng.normal(size=3) * 0.1

    def fw(t, w):
        u, v, _, _ = project_var(K, so3_exp_var(w), t.const(t0), X)
        return ad.sum(u) + ad.sum(v * v) * 0.01
    assert ad.finite_diff_check(fw, w0) < 1e-6

    def ft(t, tt):
        u, v, _, _ = project_var(K, t.const(so3_exp(w0)), tt, X)
        return ad.sum(u * v) * 0.01
    assert ad.finite_diff_check(ft, t0) < 1e-6


def test_relative_pose(rng):
    p = random_pose(rng)
    R, t = relative_pose(p, p)
    np.testing.assert_allclose(R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t, 0, atol=1e-12)
    a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
    Rab, tab = relative_pose(a, b)
    Rbc, tbc = relative_pose(b, c)
    Rac, tac = relative_pose(a, c)
    np.testing.assert_allclose(Rbc @ Rab, Rac, atol=1e-10)
    np.testing.assert_allclose(Rbc @ tab + tbc, tac, atol=1e-10)
    m = PoseSE3(np.zeros(3), [0.1, 0, 0])
    R, t = relative_pose(m, PoseSE3.identity())
    np.testing.assert_array_equal(R, np.eye(3))
    np.testing.assert_array_equal(t, [0.1, 0, 0])


def test_compose_inverse(rng):
    p = random_pose(rng, 2.5)
    e = p.compose(p.inverse())
    np.testing.assert_allclose(e.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(e.t, 0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1.7, 1.7), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_pose_matrix_is_rigid(w, t):
    m = PoseSE3(w, t).matrix()
    np.testing.assert_allclose(m[:3, :3].T @ m[:3, :3], np.eye(3), atol=1e-10)
    np.testing.assert_array_equal(m[3], [0, 0, 0, 1])


def test_trajectory_file_round_trip(tmp_path, rng):
    poses = [random_pose(rng, 2.5) for _ in range(4)]
    write_trajectory(tmp_path / "t.txt", poses, [3, 5, 6, 9])
    line = (tmp_path / "t.txt").read_text().splitlines()[0].split()
    assert line[0] == "3" and len(line) == 8
    ids, back = read_trajectory(tmp_path / "t.txt")
    assert ids == [3, 5, 6, 9]
    for a, b in zip(poses, back):
        np.testing.assert_allclose(a.R, b.R, atol=1e-12)
        np.testing.assert_array_equal(a.t, b.t)
    (tmp_path / "bad.txt").write_text("0 1 2 3\n")
    with pytest.raises(GeometryError):
        read_trajectory(tmp_path / "bad.txt")

import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import grid_camera, grid_mesh, random_splats
from oracles import central_difference
from uvsplat.mesh import TemplateMesh, deform
from uvsplat.rotations import axis_angle_to_matrix, matrix_to_quat, quat_multiply
from uvsplat.splats import (
    COV2D_FLOOR,
    Camera,
    SplatSet,
    UvAnchor,
    build_covariance,
    decode_checkpoint,
    encode_checkpoint,
    globalize,
    globalize_one,
    load_checkpoint,
    project,
    project_all,
    project_backward,
    save_checkpoint,
)


def test_uv_anchor_validates_barycentrics():
    UvAnchor(0, (0.2, 0.3, 0.5))
    with pytest.raises(ValueError):
        UvAnchor(0, (0.5, 0.6, 0.0))
    with pytest.raises(ValueError):
        UvAnchor(0, (-0.1, 0.6, 0.5))


def test_globalize_neutral_frame_is_identity():
    mesh = grid_mesh(4)
    s = random_splats(mesh, 20)
    state = deform(mesh)
    for i in (0, 7, 19):
        _, r_prime, s_prime = globalize_one(i, s, state)
        q = s.quat[i] * np.sign(s.quat[i] @ r_prime)
        assert np.allclose(r_prime, q, atol=1e-9)
        assert np.allclose(s_prime, np.exp(s.log_scale[i]), atol=1e-9)


def test_globalize_scales_by_k():
    base = grid_mesh(4)
    mesh = TemplateMesh(base.vertices, base.faces, base.uv_corners, expr_basis=base.vertices[None].copy())
    s = SplatSet.create([3], [[0.2, 0.3, 0.5]], log_scale=0.0)
    _, _, s_prime = globalize_one(0, s, deform(mesh, expr=[1.0]))
    assert np.allclose(s_prime, 2.0, atol=1e-6)


def test_face_rotated_about_normal_rotates_covariance():
    # single flat triangle in the xy plane, rotated 90 degrees about z
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    rz = axis_angle_to_matrix(np.array([0, 0, np.pi / 2]))
    basis = (verts @ rz.T - verts)[None]
    mesh = TemplateMesh(verts, [[0, 1, 2]], [[[0, 0], [1, 0], [0, 1]]], expr_basis=basis)
    s = SplatSet.create([0], [[1 / 3, 1 / 3, 1 / 3]])
    s.quat = np.array([[0.9, 0.1, -0.3, 0.2]]) / np.linalg.norm([0.9, 0.1, -0.3, 0.2])
    s.log_scale = np.log([[0.3, 0.1, 0.05]])
    state = deform(mesh, expr=[1.0])
    assert np.allclose(state.rot[0], rz, atol=1e-12)
    _, r_prime, _ = globalize_one(0, s, state)
    expected_q = quat_multiply(matrix_to_quat(rz), s.quat[0])
    assert np.allclose(r_prime * np.sign(r_prime @ expected_q), expected_q, atol=1e-12)
    cov0 = build_covariance(s.quat[0], np.exp(s.log_scale[0]))
    assert np.allclose(globalize(s, state).cov[0], rz @ cov0 @ rz.T, atol=1e-8)


def test_rigid_motion_conjugates_covariance():
    mesh = grid_mesh(4)
    s = random_splats(mesh, 30)
    rest = globalize(s, deform(mesh))
    aa = np.array([[0.4, -0.2, 0.9]])
    moved = globalize(s, deform(mesh, joint_rotations=aa))
    r = axis_angle_to_matrix(aa[0])
    assert np.allclose(moved.cov, r @ rest.cov @ r.T, atol=1e-8)
    assert np.allclose(moved.mean, rest.mean @ r.T, atol=1e-8)


def test_build_covariance_examples():
    ident = np.array([1.0, 0, 0, 0])
    assert np.allclose(build_covariance(ident, [1.0, 2.0, 3.0]), np.diag([1.0, 4.0, 9.0]), atol=1e-15)
    rng = np.random.default_rng(0)
    q = rng.normal(size=4)
    assert np.allclose(build_covariance(q, [0.7] * 3), 0.49 * np.eye(3), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1),
       arrays(np.float64, 3, elements=st.floats(0.01, 3)))
def test_covariance_spectrum_and_sign_invariance(q, s):
    cov = build_covariance(q, s)
    assert np.allclose(cov, cov.T, atol=0)
    assert np.allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(s**2), atol=1e-9)
    assert np.array_equal(cov, build_covariance(-q, s))


def _axis_camera(fx=50.0, fy=50.0):
    return Camera(fx, fy, 16.0, 12.0, 32, 24, np.eye(4))


def test_projection_on_optical_axis():
    cam = _axis_camera()
    sigma, z = 0.1, 2.0
    p = project([0.0, 0.0, z], sigma**2 * np.eye(3), cam)
    assert np.allclose(p.mean_2d, [cam.cx, cam.cy])
    assert np.allclose(p.cov_2d, ((cam.fx * sigma / z) ** 2 + COV2D_FLOOR) * np.eye(2), atol=1e-12)
    assert not p.culled and p.depth == z


def test_projected_std_halves_when_depth_doubles():
    cam = _axis_camera()
    cov = build_covariance([0.8, 0.1, 0.2, -0.3], [0.1, 0.05, 0.2])
    a = project([0.1, -0.1, 2.0], cov, cam).cov_2d - COV2D_FLOOR * np.eye(2)
    b = project([0.2, -0.2, 4.0], cov, cam).cov_2d - COV2D_FLOOR * np.eye(2)
    assert np.allclose(np.sqrt(np.linalg.eigvalsh(b)), 0.5 * np.sqrt(np.linalg.eigvalsh(a)), rtol=1e-6)


def test_splat_behind_camera_is_culled():
    assert project([0.0, 0.0, -1.0], np.eye(3) * 0.01, _axis_camera()).culled
    assert project([0.0, 0.0, 0.0], np.eye(3) * 0.01, _axis_camera()).culled


def test_camera_rejects_invalid_input():
    with pytest.raises(ValueError):
        Camera(-1.0, 1.0, 0, 0, 4, 4, np.eye(4))
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 0, 0, 4, 4, bad)


def test_projection_gradients_match_fd():
    cam = grid_camera()
    rng = np.random.default_rng(3)
    mean = rng.normal(size=(4, 3)) * 0.5
    cov = build_covariance(rng.normal(size=(4, 4)), rng.uniform(0.05, 0.3, (4, 3)))
    w_mean, w_cov = rng.normal(size=(4, 2)), rng.normal(size=(4, 2, 2))

    def loss(m, c):
        p = project_all(m, c, cam)
        return np.sum(w_mean * p.mean2d) + np.sum(w_cov * p.cov2d)

    d_mean, d_cov = project_backward(project_all(mean, cov, cam), cam, cov, w_mean, w_cov)
    h = 1e-4
    for idx in np.ndindex(mean.shape):
        fd = central_difference(lambda: loss(mean, cov), mean, idx, h)
        assert abs(fd - d_mean[idx]) <= 1e-4 * max(1.0, abs(fd))
    for idx in [(0, 0, 0), (1, 0, 2), (2, 1, 1), (3, 2, 0)]:
        fd = central_difference(lambda: loss(mean, cov), cov, idx, h)
        assert abs(fd - d_cov[idx]) <= 1e-4 * max(1.0, abs(fd))


def test_checkpoint_round_trip_and_layout(tmp_path):
    mesh = grid_mesh(4)
    s = random_splats(mesh, 17)
    dp, de = np.zeros((2, 16, 3)), np.full((1, 16, 3), 0.25)
    blob = encode_checkpoint(s, dp, de)
    assert blob[:4] == b"UVGS"
    assert struct.unpack("<IQ", blob[4:16]) == (1, 17)
    bary = np.frombuffer(blob[16:16 + 17 * 12], dtype="<f4").reshape(17, 3)
    assert np.array_equal(bary, s.bary.astype(np.float32))
    path = tmp_path / "c.uvgs"
    save_checkpoint(path, s, dp, de, extra=b"tail")
    back, dp2, de2, extra = load_checkpoint(path)
    assert extra == b"tail"
    assert np.array_equal(back.face, s.face)
    for name in ("bary", "offset", "quat", "log_scale", "opacity_logit", "color"):
        assert np.array_equal(getattr(back, name), getattr(s, name).astype(np.float32).astype(np.float64))
    assert np.array_equal(dp2, dp) and np.array_equal(de2, de)
    with pytest.raises(ValueError):
        decode_checkpoint(b"XXXX" + blob[4:])

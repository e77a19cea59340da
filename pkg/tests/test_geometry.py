"""Geometry: covariance composition, projection, visibility.

The projection oracle is a central finite-difference Jacobian of the exact
pinhole map, built here independently of the library code.
"""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from splat4d.geometry import (
    DTYPE,
    NEAR_PLANE,
    CameraModel,
    GaussianPrimitive,
    build_covariance,
    build_covariance_batch,
    eigenvalues_2x2,
    project_gaussian,
    quat_multiply,
    quat_normalize,
    quat_slerp,
    quat_to_rotmat,
    stabilize_cov2d,
    visibility,
)

from conftest import identity_camera, make_primitive, random_unit_quat, rotation_quat


# ---------------------------------------------------------------------------
# quaternions

def test_quat_to_rotmat_identity():
    q = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE)
    assert torch.allclose(quat_to_rotmat(q), torch.eye(3, dtype=DTYPE))


def test_quat_to_rotmat_orthonormal(gen):
    for _ in range(50):
        R = quat_to_rotmat(random_unit_quat(gen))
        assert torch.allclose(R @ R.T, torch.eye(3, dtype=DTYPE), atol=1e-12)
        assert abs(float(torch.linalg.det(R)) - 1.0) < 1e-12


def test_quat_multiply_matches_rotmat_product(gen):
    a, b = random_unit_quat(gen), random_unit_quat(gen)
    lhs = quat_to_rotmat(quat_multiply(a, b))
    rhs = quat_to_rotmat(a) @ quat_to_rotmat(b)
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_quat_slerp_endpoints(gen):
    a, b = random_unit_quat(gen), random_unit_quat(gen)
    assert torch.allclose(quat_slerp(a, b, 0.0).abs(), a.abs(), atol=1e-9)
    assert torch.allclose(quat_slerp(a, b, 1.0).abs(), b.abs(), atol=1e-9)


def test_quat_slerp_near_parallel_is_finite():
    a = quat_normalize(torch.tensor([1.0, 1e-9, 0.0, 0.0], dtype=DTYPE))
    b = quat_normalize(torch.tensor([1.0, 0.0, 1e-9, 0.0], dtype=DTYPE))
    out = quat_slerp(a, b, 0.5)
    assert bool(torch.isfinite(out).all())
    assert abs(float(out.norm()) - 1.0) < 1e-12


def test_quat_slerp_constant_angular_velocity():
    a = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE)
    b = rotation_quat((0, 0, 1), 90.0)
    mid = quat_slerp(a, b, 0.5)
    assert torch.allclose(mid, rotation_quat((0, 0, 1), 45.0), atol=1e-12)


# ---------------------------------------------------------------------------
# covariance composition

def test_build_covariance_identity():
    q = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE)
    s = torch.ones(3, dtype=DTYPE)
    assert torch.allclose(build_covariance(q, s), torch.eye(3, dtype=DTYPE))


def test_build_covariance_axis_aligned():
    q = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE)
    s = torch.tensor([2.0, 1.0, 1.0], dtype=DTYPE)
    expected = torch.diag(torch.tensor([4.0, 1.0, 1.0], dtype=DTYPE))
    assert torch.allclose(build_covariance(q, s), expected)


def test_build_covariance_rotated_90deg():
    # rotating the x-stretched Gaussian 90 degrees about z moves the long
    # axis onto y; verified against a plain matrix-product oracle
    q = rotation_quat((0, 0, 1), 90.0)
    s = torch.tensor([2.0, 1.0, 1.0], dtype=DTYPE)
    out = build_covariance(q, s)
    expected = torch.diag(torch.tensor([1.0, 4.0, 1.0], dtype=DTYPE))
    assert torch.allclose(out, expected, atol=1e-12)
    R = quat_to_rotmat(q)
    oracle = R @ torch.diag(s * s) @ R.T
    assert torch.allclose(out, oracle, atol=1e-14)


def test_build_covariance_rejects_bad_inputs():
    with pytest.raises(ValueError):
        build_covariance(torch.tensor([2.0, 0.0, 0.0, 0.0]), torch.ones(3))
    with pytest.raises(ValueError):
        build_covariance(torch.tensor([1.0, 0.0, 0.0, 0.0]),
                         torch.tensor([1.0, -1.0, 1.0]))


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_build_covariance_spd_and_symmetric(seed):
    g = torch.Generator().manual_seed(seed)
    q = random_unit_quat(g)
    s = 10.0 ** (-3 + 4 * torch.rand(3, generator=g, dtype=DTYPE))
    cov = build_covariance(q, s)
    assert float((cov - cov.T).abs().max()) < 1e-12
    eig = torch.linalg.eigvalsh(cov)
    assert bool((eig > 0).all())


# ---------------------------------------------------------------------------
# projection

def _random_camera(g, width=64, height=64):
    q = random_unit_quat(g)
    return CameraModel(
        f=float(50.0 + 200.0 * torch.rand(1, generator=g, dtype=DTYPE)),
        principal_point=torch.tensor([width / 2.0, height / 2.0], dtype=DTYPE),
        width=width,
        height=height,
        rotation=quat_to_rotmat(q),
        translation=torch.randn(3, generator=g, dtype=DTYPE),
    )


def _fd_projected_covariance(position, cov3, camera, h=1e-6):
    """Oracle: numeric Jacobian of the exact pinhole map u(p), then J Σ J^T."""
    p = position.numpy()

    def pinhole(pt):
        cam = camera.rotation.numpy() @ pt + camera.translation.numpy()
        return camera.f * cam[:2] / cam[2] + camera.principal_point.numpy()

    J = np.zeros((2, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        J[:, i] = (pinhole(p + e) - pinhole(p - e)) / (2 * h)
    return J @ cov3.numpy() @ J.T


def test_projection_matches_fd_jacobian_oracle(gen):
    for _ in range(1000):
        camera = _random_camera(gen)
        # keep the point safely in front of the camera
        depth = 1.0 + 3.0 * torch.rand(1, generator=gen, dtype=DTYPE)
        xy = 0.5 * torch.randn(2, generator=gen, dtype=DTYPE)
        cam_pt = torch.cat([xy, depth])
        position = (cam_pt - camera.translation) @ camera.rotation
        q = random_unit_quat(gen)
        s = 0.02 + 0.2 * torch.rand(3, generator=gen, dtype=DTYPE)
        g = GaussianPrimitive(id=0, position=position, rotation=quat_normalize(q),
                              scale=s, opacity=1.0,
                              color=torch.zeros(3, dtype=DTYPE))
        out = project_gaussian(g, camera)
        assert out is not None
        cov2d, center, d = out
        oracle = _fd_projected_covariance(position, g.covariance, camera)
        rel = np.abs(cov2d.matrix.numpy() - oracle) / max(np.abs(oracle).max(), 1e-12)
        assert rel.max() <= 1e-5
        assert abs(d - float(depth)) < 1e-9


def test_projection_on_axis_isotropic():
    camera = identity_camera(f=100.0)
    g = make_primitive(position=(0.0, 0.0, 2.0), scale=(0.1, 0.1, 0.1))
    cov2d, center, depth = project_gaussian(g, camera)
    m = cov2d.matrix
    assert abs(float(m[0, 0] - m[1, 1])) < 1e-12
    assert abs(float(m[0, 1])) < 1e-12
    assert torch.allclose(center, torch.tensor([32.0, 32.0], dtype=DTYPE))
    # f/z = 50, variance scales by (f/z)^2
    assert abs(float(m[0, 0]) - (50.0 * 0.1) ** 2) < 1e-9


def test_projection_focal_scaling():
    g_off = make_primitive(position=(0.1, 0.0, 2.0))
    cam1 = identity_camera(f=100.0)
    cam2 = identity_camera(f=200.0)
    _, c1, _ = project_gaussian(g_off, cam1)
    _, c2, _ = project_gaussian(g_off, cam2)
    off1 = c1 - cam1.principal_point
    off2 = c2 - cam2.principal_point
    assert torch.allclose(off2, 2.0 * off1, atol=1e-12)
    g_on = make_primitive(position=(0.0, 0.0, 2.0))
    m1 = project_gaussian(g_on, cam1)[0].matrix
    m2 = project_gaussian(g_on, cam2)[0].matrix
    assert torch.allclose(m2, 4.0 * m1, atol=1e-9)


def test_projection_culls_behind_near_plane():
    camera = identity_camera()
    behind = make_primitive(position=(0.0, 0.0, -1.0))
    assert project_gaussian(behind, camera) is None
    at_plane = make_primitive(position=(0.0, 0.0, NEAR_PLANE))
    assert project_gaussian(at_plane, camera) is None


def test_stabilize_cov2d_floors_eigenvalues():
    degenerate = torch.zeros(2, 2, dtype=DTYPE)
    fixed = stabilize_cov2d(degenerate)
    low, _ = eigenvalues_2x2(fixed)
    assert float(low) >= 1e-12 - 1e-18


# ---------------------------------------------------------------------------
# visibility

def test_visibility_behind_camera_false():
    assert not visibility(make_primitive(position=(0.0, 0.0, -2.0)),
                          identity_camera())


def test_visibility_center_true():
    assert visibility(make_primitive(position=(0.0, 0.0, 2.0),
                                     scale=(0.01, 0.01, 0.01)),
                      identity_camera())


def test_visibility_three_sigma_margin():
    camera = identity_camera(f=100.0, width=64, height=64)
    z, scale = 2.0, 0.02

    def sigma_at(u):
        # largest projected standard deviation at screen position u
        x = (u - 32.0) * z / camera.f
        g = make_primitive(position=(x, 0.0, z), scale=(scale,) * 3)
        cov2d, _, _ = project_gaussian(g, camera)
        _, hi = eigenvalues_2x2(cov2d.matrix)
        return math.sqrt(float(hi))

    for sigmas_out, expected in [(2.9, True), (3.1, False)]:
        u = -sigmas_out * sigma_at(0.0)
        u = -sigmas_out * sigma_at(u)  # refine at the actual position
        g = make_primitive(position=((u - 32.0) * z / camera.f, 0.0, z),
                           scale=(scale,) * 3)
        assert visibility(g, camera) is expected


def test_visibility_monotone_in_image_size(gen):
    small = identity_camera(width=32, height=32)
    import dataclasses
    large = dataclasses.replace(small, width=128, height=128)
    for _ in range(100):
        p = torch.randn(3, generator=gen, dtype=DTYPE) * 2.0
        p[2] = p[2].abs() + 0.5
        g = GaussianPrimitive(id=0, position=p,
                              rotation=random_unit_quat(gen).clone(),
                              scale=0.05 + 0.1 * torch.rand(3, generator=gen, dtype=DTYPE),
                              opacity=1.0, color=torch.zeros(3, dtype=DTYPE))
        if visibility(g, small):
            assert visibility(g, large)


# ---------------------------------------------------------------------------
# cameras

def test_camera_rejects_invalid():
    with pytest.raises(ValueError):
        CameraModel(f=-1.0, principal_point=torch.zeros(2), width=4, height=4,
                    rotation=torch.eye(3), translation=torch.zeros(3))
    with pytest.raises(ValueError):
        CameraModel(f=1.0, principal_point=torch.zeros(2), width=4, height=4,
                    rotation=2 * torch.eye(3), translation=torch.zeros(3))


def test_look_at_points_forward_at_target():
    cam = CameraModel.look_at(eye=(0.0, 0.0, -4.0), target=(0.0, 0.0, 0.0),
                              f=64.0, width=32, height=32)
    uv, depth = cam.project_points(torch.zeros(1, 3, dtype=DTYPE))
    assert abs(float(depth[0]) - 4.0) < 1e-12
    assert torch.allclose(uv[0], torch.tensor([16.0, 16.0], dtype=DTYPE), atol=1e-9)
    det = float(torch.linalg.det(cam.rotation))
    assert abs(det - 1.0) < 1e-9


def test_camera_rescaled():
    cam = identity_camera(f=100.0, width=64, height=64)
    half = cam.rescaled(0.5)
    assert (half.f, half.width, half.height) == (50.0, 32, 32)
    with pytest.raises(ValueError):
        cam.rescaled(1e-4)


def test_primitive_validation():
    with pytest.raises(ValueError):
        make_primitive(rotation=(2.0, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        make_primitive(scale=(0.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        make_primitive(opacity=1.5)

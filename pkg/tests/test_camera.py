import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from avatar3d.camera import CameraPose, GimbalError, camera_matrix, generate_rays


def test_canonical_pose_position_and_forward():
    m = camera_matrix(0.0, 0.0, (0.0, 0.0, 0.0), 2.7)
    assert torch.allclose(m[:3, 3], torch.tensor([0.0, 0.0, 2.7]))
    assert torch.allclose(m[:3, 2], torch.tensor([0.0, 0.0, -1.0]))


def test_position_formula():
    c = (0.0, 0.05, 0.17)
    r = 2.7
    theta, phi = 0.3, -0.2
    m = camera_matrix(theta, phi, c, r)
    expected = torch.tensor(c) + r * torch.tensor([
        math.sin(theta) * math.cos(phi),
        math.sin(phi),
        math.cos(theta) * math.cos(phi),
    ])
    assert torch.allclose(m[:3, 3], expected, atol=1e-6)


def test_aligned_canonical_position_norm():
    # With the stated offset and radius the canonical camera sits at
    # c + r*z_hat; its norm follows from the position formula.
    m = camera_matrix(0.0, 0.0, (0.0, 0.05, 0.17), 2.7)
    expected = torch.tensor([0.0, 0.05, 2.87]).norm()
    assert abs(m[:3, 3].norm() - expected) < 1e-6


def test_yaw_mirror_symmetry():
    c = (0.1, -0.05, 0.2)
    ma = camera_matrix(0.4, 0.0, c, 2.7)
    mb = camera_matrix(-0.4, 0.0, c, 2.7)
    pa, pb = ma[:3, 3], mb[:3, 3]
    assert abs((pa[0] - c[0]) + (pb[0] - c[0])) < 1e-6  # x mirrored about c_x
    assert torch.allclose(pa[1:], pb[1:], atol=1e-6)


@given(
    theta=st.floats(-math.pi, math.pi),
    phi=st.floats(-1.4, 1.4),
    r=st.floats(0.5, 5.0),
)
@settings(max_examples=50, deadline=None)
def test_rotation_block_orthonormal_and_position_on_sphere(theta, phi, r):
    m = camera_matrix(theta, phi, (0.1, 0.2, -0.1), r)
    rot = m[:3, :3]
    assert torch.linalg.norm(rot.T @ rot - torch.eye(3)) < 1e-5
    dist = (m[:3, 3] - torch.tensor([0.1, 0.2, -0.1])).norm()
    assert abs(dist - r) < 1e-5


def test_gimbal_rejected():
    with pytest.raises(GimbalError):
        camera_matrix(0.0, math.pi / 2, (0, 0, 0), 2.7)
    with pytest.raises(GimbalError):
        camera_matrix(0.0, -1.8, (0, 0, 0), 2.7)


def test_nonpositive_radius_rejected():
    with pytest.raises(ValueError):
        camera_matrix(0.0, 0.0, (0, 0, 0), 0.0)


def test_rays_unit_norm_and_center_pixel_along_forward():
    pose = CameraPose(0.2, -0.1, 2.7, (0.0, 0.05, 0.17))
    origins, dirs = generate_rays(pose, 64)
    assert origins.shape == (64 * 64, 3)
    assert torch.allclose(dirs.norm(dim=-1), torch.ones(64 * 64), atol=1e-6)
    m = pose.matrix()
    assert torch.allclose(origins[0], m[:3, 3], atol=1e-6)
    # mean of the four center pixels points along camera forward
    center = dirs.reshape(64, 64, 3)[31:33, 31:33].mean(dim=(0, 1))
    center = center / center.norm()
    assert torch.allclose(center, m[:3, 2], atol=1e-4)


def test_rays_top_left_points_up_left():
    pose = CameraPose(0.0, 0.0, 2.7)
    _, dirs = generate_rays(pose, 32)
    d = dirs.reshape(32, 32, 3)
    # at canonical pose: right = +x, up = +y, forward = -z
    assert d[0, 0, 0] < 0 and d[0, 0, 1] > 0          # top-left: left and up
    assert d[-1, -1, 0] > 0 and d[-1, -1, 1] < 0       # bottom-right

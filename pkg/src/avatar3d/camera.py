"""Camera model shared by every module.

Convention (fixed here, imported everywhere else): world is y-up, the
camera at yaw=pitch=0 sits at lookat + (0, 0, r) and looks down -z.
The camera-to-world rotation columns are (right, up, forward).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

DEFAULT_FOV_DEG = 12.0


class GimbalError(ValueError):
    """Pitch at or beyond +-pi/2 makes the y-up frame degenerate."""


@dataclass
class CameraPose:
    theta: float = 0.0
    phi: float = 0.0
    radius: float = 2.7
    lookat: tuple[float, float, float] = (0.0, 0.0, 0.0)
    fov_deg: float = DEFAULT_FOV_DEG

    def matrix(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return camera_matrix(self.theta, self.phi, self.lookat, self.radius, dtype=dtype)


def camera_matrix(
    theta: float,
    phi: float,
    lookat,
    radius: float,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """4x4 camera-to-world matrix from spherical extrinsics.

    Position is lookat + r * (sin(theta)cos(phi), sin(phi), cos(theta)cos(phi)).
    """
    if abs(phi) >= math.pi / 2:
        raise GimbalError(f"pitch {phi} outside (-pi/2, pi/2)")
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    c = torch.as_tensor(lookat, dtype=dtype)
    offset = torch.tensor(
        [
            math.sin(theta) * math.cos(phi),
            math.sin(phi),
            math.cos(theta) * math.cos(phi),
        ],
        dtype=dtype,
    )
    position = c + radius * offset
    forward = -offset  # unit by construction
    world_up = torch.tensor([0.0, 1.0, 0.0], dtype=dtype)
    right = torch.linalg.cross(forward, world_up)
    right = right / torch.linalg.norm(right)
    up = torch.linalg.cross(right, forward)

    m = torch.eye(4, dtype=dtype)
    m[:3, 0] = right
    m[:3, 1] = up
    m[:3, 2] = forward
    m[:3, 3] = position
    return m


def generate_rays(
    pose: CameraPose,
    resolution: int,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel ray origins and unit directions, shape [H*W, 3] each.

    Pixel (0, 0) is the top-left corner; directions use the pinhole model
    with the configured vertical FOV and square pixels.
    """
    m = pose.matrix(dtype=dtype)
    right, up, forward, origin = m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3]
    half = math.tan(math.radians(pose.fov_deg) / 2)
    steps = (torch.arange(resolution, dtype=dtype) + 0.5) / resolution
    u = (2 * steps - 1) * half            # left -> right
    v = (1 - 2 * steps) * half            # top -> bottom
    vgrid, ugrid = torch.meshgrid(v, u, indexing="ij")  # [H, W]
    dirs = (
        vgrid.reshape(-1, 1) * up
        + ugrid.reshape(-1, 1) * right
        + forward
    )
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)
    origins = origin.expand_as(dirs)
    return origins, dirs

"""Volume renderer: uniform ray marching with alpha compositing.

Depth is the opacity-weighted expected ray termination distance; pixels
whose accumulated opacity falls below the background threshold clamp to
the far plane so background depth is always well defined.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import torch

from .camera import CameraPose, generate_rays

FieldQuery = Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


class NonFiniteDensity(ValueError):
    pass


@dataclass
class RenderConfig:
    resolution: int = 64
    n_steps: int = 48
    near: float = 2.25
    far: float = 3.3
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    epsilon_bg: float = 0.5
    check_finite: bool = True


@dataclass
class RenderOutput:
    rgb: torch.Tensor    # [3, H, W] in [0, 1]
    depth: torch.Tensor  # [H, W] scene units
    alpha: torch.Tensor  # [H, W] in [0, 1]
    pose: CameraPose | None = None

    def detached(self) -> "RenderOutput":
        return RenderOutput(self.rgb.detach(), self.depth.detach(), self.alpha.detach(), self.pose)


def march_rays(
    field_query: FieldQuery,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    cfg: RenderConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Composite one batch of rays.

    field_query maps points [N, 3] to (density [N], rgb [N, 3]); density
    must be non-negative and finite. Returns (color [R, 3], depth [R],
    alpha [R]) where depth clamps to the far plane for empty rays.
    """
    if cfg.n_steps < 16:
        raise ValueError(f"n_steps must be >= 16, got {cfg.n_steps}")
    if not cfg.far > cfg.near > 0:
        raise ValueError(f"invalid ray bounds near={cfg.near} far={cfg.far}")
    n_rays = origins.shape[0]
    dtype = origins.dtype
    delta = (cfg.far - cfg.near) / cfg.n_steps
    t = cfg.near + delta * (torch.arange(cfg.n_steps, dtype=dtype) + 0.5)

    points = origins[:, None, :] + dirs[:, None, :] * t[None, :, None]
    density, rgb = field_query(points.reshape(-1, 3))
    density = density.reshape(n_rays, cfg.n_steps)
    rgb = rgb.reshape(n_rays, cfg.n_steps, 3)
    if cfg.check_finite and not torch.isfinite(density).all():
        raise NonFiniteDensity("field returned non-finite densities")

    step_alpha = 1.0 - torch.exp(-density * delta)
    trans = torch.cumprod(1.0 - step_alpha + 1e-10, dim=1)
    ones = torch.ones(n_rays, 1, dtype=dtype)
    trans = torch.cat([ones, trans[:, :-1]], dim=1)  # exclusive cumprod
    weights = trans * step_alpha            # [R, S]
    alpha = weights.sum(dim=1)

    color = (weights[..., None] * rgb).sum(dim=1)
    bg = torch.as_tensor(cfg.background, dtype=dtype)
    color = color + (1.0 - alpha)[:, None] * bg
    depth = (weights * t[None, :]).sum(dim=1) + (1.0 - alpha) * cfg.far
    return color, depth, alpha


def march_rays_batch(
    field_query_batch,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    cfg: RenderConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batched variant: origins/dirs [B, R, 3], field over points [B, M, 3].

    Returns (color [B, R, 3], depth [B, R], alpha [B, R]).
    """
    b, r, _ = origins.shape
    dtype = origins.dtype
    delta = (cfg.far - cfg.near) / cfg.n_steps
    t = cfg.near + delta * (torch.arange(cfg.n_steps, dtype=dtype) + 0.5)
    points = origins[:, :, None, :] + dirs[:, :, None, :] * t[None, None, :, None]
    density, rgb = field_query_batch(points.reshape(b, r * cfg.n_steps, 3))
    density = density.reshape(b, r, cfg.n_steps)
    rgb = rgb.reshape(b, r, cfg.n_steps, 3)
    if cfg.check_finite and not torch.isfinite(density).all():
        raise NonFiniteDensity("field returned non-finite densities")
    step_alpha = 1.0 - torch.exp(-density * delta)
    trans = torch.cumprod(1.0 - step_alpha + 1e-10, dim=-1)
    ones = torch.ones(b, r, 1, dtype=dtype)
    trans = torch.cat([ones, trans[..., :-1]], dim=-1)
    weights = trans * step_alpha
    alpha = weights.sum(dim=-1)
    color = (weights[..., None] * rgb).sum(dim=-2)
    bg = torch.as_tensor(cfg.background, dtype=dtype)
    color = color + (1.0 - alpha)[..., None] * bg
    depth = (weights * t).sum(dim=-1) + (1.0 - alpha) * cfg.far
    return color, depth, alpha


def render_batch(field_query_batch, poses, cfg: RenderConfig) -> list[RenderOutput]:
    """Render one image per batch entry; poses is a list of length B."""
    from .camera import generate_rays

    res = cfg.resolution
    origins, dirs = [], []
    for pose in poses:
        o, d = generate_rays(pose, res)
        origins.append(o)
        dirs.append(d)
    color, depth, alpha = march_rays_batch(
        field_query_batch, torch.stack(origins), torch.stack(dirs), cfg
    )
    return [
        RenderOutput(
            color[i].T.reshape(3, res, res).clamp(0.0, 1.0),
            depth[i].reshape(res, res),
            alpha[i].reshape(res, res),
            poses[i],
        )
        for i in range(len(poses))
    ]


def render_field(field_query: FieldQuery, pose: CameraPose, cfg: RenderConfig) -> RenderOutput:
    """Render a full image of a (density, rgb) field. Deterministic."""
    res = cfg.resolution
    dtype = _field_dtype(field_query)
    origins, dirs = generate_rays(pose, res, dtype=dtype)
    color, depth, alpha = march_rays(field_query, origins, dirs, cfg)
    rgb = color.T.reshape(3, res, res).clamp(0.0, 1.0)
    return RenderOutput(rgb, depth.reshape(res, res), alpha.reshape(res, res), pose)


def _field_dtype(field_query) -> torch.dtype:
    return getattr(field_query, "dtype", torch.float32)


def background_mask(out: RenderOutput, epsilon_bg: float = 0.5) -> torch.Tensor:
    """Binary [H, W] mask, 1 where the render is background (alpha below threshold)."""
    return (out.alpha < epsilon_bg).to(out.alpha.dtype)

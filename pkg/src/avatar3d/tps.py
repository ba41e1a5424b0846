"""Thin-plate-spline warping of the front tri-plane.

Core math: classic TPS interpolation with kernel U(d) = d^2 log d^2 and
an affine term. Images are warped backward (the interpolant is fitted on
moved-point -> identity-point correspondences) so sampling stays on the
regular output grid and everything is differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


class SingularSystem(RuntimeError):
    """TPS linear system is rank-deficient (e.g. coincident control points)."""


@dataclass
class TpsRegWeights:
    alpha: float = 150.0
    beta: float = 1.0
    sigma: float = 3.0
    weight_rt2: float = 1.0


def identity_grid(n: int, margin: float = 0.08) -> torch.Tensor:
    """[n*n, 2] uniform control points in [-1+margin, 1-margin]^2."""
    xs = torch.linspace(-1 + margin, 1 - margin, n)
    yy, xx = torch.meshgrid(xs, xs, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)


@dataclass
class TpsField:
    """Control-point warp: content at identity point i moves by offsets[i]."""

    identity_points: torch.Tensor  # [K, 2] in normalized [-1, 1] coords
    offsets: torch.Tensor          # [K, 2]


def _kernel(d2: torch.Tensor) -> torch.Tensor:
    # U(d) = d^2 log d^2, with U(0) = 0
    return d2 * torch.log(d2 + 1e-9)


def tps_fit(src: torch.Tensor, dst: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Fit a TPS mapping src -> dst; returns (weights [K, 2], affine [3, 2]).

    The interpolant is exact at the control points.
    """
    k = src.shape[0]
    d2 = ((src[:, None, :] - src[None, :, :]) ** 2).sum(-1)
    kmat = _kernel(d2)
    p = torch.cat([torch.ones(k, 1, dtype=src.dtype), src], dim=1)  # [K, 3]
    top = torch.cat([kmat, p], dim=1)
    bottom = torch.cat([p.T, torch.zeros(3, 3, dtype=src.dtype)], dim=1)
    a = torch.cat([top, bottom], dim=0)
    rhs = torch.cat([dst, torch.zeros(3, 2, dtype=src.dtype)], dim=0)
    try:
        sol = torch.linalg.solve(a, rhs)
    except torch.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    if not torch.isfinite(sol).all():
        raise SingularSystem("non-finite TPS solution")
    return sol[:k], sol[k:]


def tps_apply(
    src: torch.Tensor, weights: torch.Tensor, affine: torch.Tensor, query: torch.Tensor
) -> torch.Tensor:
    """Evaluate the fitted interpolant at query points [N, 2]."""
    d2 = ((query[:, None, :] - src[None, :, :]) ** 2).sum(-1)
    u = _kernel(d2)
    p = torch.cat([torch.ones(query.shape[0], 1, dtype=query.dtype), query], dim=1)
    return u @ weights + p @ affine


def tps_point_map(src: torch.Tensor, dst: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
    w, a = tps_fit(src, dst)
    return tps_apply(src, w, a, query)


def warp_image(img: torch.Tensor, field: TpsField) -> torch.Tensor:
    """Backward-warp an image (or feature plane) [C, H, W] by a TPS field.

    Content at identity point c_I appears at c_I + offset in the output.
    Differentiable w.r.t. both img and field.offsets.
    """
    c, h, w = img.shape
    src = field.identity_points + field.offsets  # output-space anchors
    dst = field.identity_points                  # where to sample the input
    weights, affine = tps_fit(src, dst)
    xs = torch.linspace(-1 + 1 / w, 1 - 1 / w, w, dtype=img.dtype)
    ys = torch.linspace(-1 + 1 / h, 1 - 1 / h, h, dtype=img.dtype)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    grid = torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)
    sample_at = tps_apply(src, weights, affine, grid).reshape(1, h, w, 2)
    out = F.grid_sample(
        img[None], sample_at, mode="bilinear", padding_mode="border", align_corners=False
    )
    return out[0]


def warp_points(points: torch.Tensor, field: TpsField) -> torch.Tensor:
    """Forward-map points [N, 2] (normalized coords) through the field."""
    return tps_point_map(field.identity_points, field.identity_points + field.offsets, points)


def warp_plane(front: torch.Tensor, field: TpsField) -> torch.Tensor:
    """Warp the front tri-plane only; side planes never pass through here."""
    lim = 1.0
    pts = field.identity_points + field.offsets
    if pts.abs().max() >= lim:
        raise ValueError("warped control points left the [-1, 1] plane")
    return warp_image(front, field)


class TpsPredictor(nn.Module):
    """Predicts control-point offsets from (w, front plane).

    A modulated conv block over the downsampled front plane followed by a
    small MLP head; the head's last layer is zero-initialized and the
    output is tanh-bounded so a fresh module is the identity warp.
    """

    def __init__(
        self,
        w_dim: int = 64,
        plane_channels: int = 16,
        grid: int = 8,
        max_offset: float = 0.25,
        hidden: int = 64,
    ):
        super().__init__()
        self.grid = grid
        self.max_offset = max_offset
        self.register_buffer("identity_points", identity_grid(grid))
        self.conv = nn.Conv2d(plane_channels, hidden, 3, stride=2, padding=1)
        self.mod = nn.Linear(w_dim, hidden)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, stride=2, padding=1)
        self.head = nn.Sequential(
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, grid * grid * 2),
        )
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    def forward(self, w: torch.Tensor, front: torch.Tensor) -> torch.Tensor:
        """w [w_dim], front [C, H, W] -> offsets [grid^2, 2]."""
        x = F.leaky_relu(self.conv(front[None]), 0.2)
        style = self.mod(w).reshape(1, -1, 1, 1)
        x = x * (1 + style)
        x = F.leaky_relu(self.conv2(x), 0.2)
        x = x.mean(dim=(2, 3))
        raw = self.head(x)[0].reshape(-1, 2)
        return torch.tanh(raw) * self.max_offset

    def field(self, w: torch.Tensor, front: torch.Tensor) -> TpsField:
        return TpsField(self.identity_points, self(w, front))


def reg_t1(
    c_i: torch.Tensor,
    c1: torch.Tensor,
    c2: torch.Tensor,
    c1_swapped: torch.Tensor,
    c2_swapped: torch.Tensor,
    weights: TpsRegWeights,
) -> torch.Tensor:
    """Anchor-to-identity penalty minus deformation-diversity bonuses."""
    anchor = (c_i - c1).abs().sum() + (c_i - c2).abs().sum()
    return (
        weights.alpha * anchor
        - weights.beta * (c1 - c2).abs().sum()
        - weights.sigma * (c1_swapped - c2_swapped).abs().sum()
    )


def reg_t2(rendered: torch.Tensor, target: torch.Tensor, segmentation) -> torch.Tensor:
    """L1 distance between soft-argmax segmentation summaries of two images."""
    return (segmentation(rendered) - segmentation(target)).abs().sum()


class Divergence(RuntimeError):
    pass


def render_with_tps(g, w, tps: "TpsPredictor", pose, rcfg, interp: float = 1.0):
    """Render through the deformation path: warp the front plane, leave
    the side planes untouched, then decode and march as usual."""
    planes = g.synthesize(w, g.delta_s, interp)
    fld = tps.field(w, planes.front)
    warped = type(planes)(warp_image(planes.front, fld), planes.side_a, planes.side_b)
    return _render_planes(g, warped, pose, rcfg)


def _render_planes(g, planes, pose, rcfg):
    from .render import render_field

    return render_field(g.plane_field(planes), pose, rcfg)


def train_tps(
    g_t,
    data,
    weights: TpsRegWeights | None = None,
    clip: float = 1.0,
    steps: int = 300,
    batch: int = 2,
    lr: float = 2e-3,
    resolution: int = 32,
    n_ray_steps: int = 24,
    segmentation=None,
    alignment=None,
    seed: int = 0,
    progress: bool = False,
) -> TpsPredictor:
    """Fit the deformation module against target images, generator frozen.

    Loss per step: non-saturating adversarial term on TPS-warped renders,
    an anchor/diversity penalty on paired control points (with the
    latent-swap re-evaluation), and a segmentation-summary match against
    a random target sample. Gradient norms on the TPS parameters are
    clipped at `clip`. steps=0 returns a fresh identity module.
    """
    from .adapt import DualDiscriminator
    from .camera import CameraPose
    from .oracles import SoftSegmentation
    from .render import RenderConfig

    weights = weights or TpsRegWeights()
    segmentation = segmentation or SoftSegmentation()
    tps = TpsPredictor()
    if steps == 0:
        return tps
    pose = alignment.canonical_pose() if alignment is not None else CameraPose(0.0, 0.0, 2.7)
    rcfg = RenderConfig(resolution=resolution, n_steps=n_ray_steps)
    disc = DualDiscriminator(resolution=resolution * 2)
    opt = torch.optim.Adam(tps.parameters(), lr=lr, betas=(0.0, 0.99))
    opt_d = torch.optim.Adam(disc.parameters(), lr=lr, betas=(0.0, 0.99))
    rng = torch.Generator().manual_seed(seed)
    images = data.images()
    for p in g_t.parameters():
        p.requires_grad_(False)

    def fakes():
        outs, offs, offs_swapped = [], [], []
        zs = torch.randn(2, 64, generator=rng)
        ws = [g_t.map_latent(z) for z in zs]
        fronts = []
        for w in ws:
            planes = g_t.synthesize(w, g_t.delta_s, 1.0)
            fronts.append(planes.front)
            off = tps(w, planes.front)
            fld = TpsField(tps.identity_points, off)
            warped = type(planes)(warp_image(planes.front, fld), planes.side_a, planes.side_b)
            outs.append(_render_planes(g_t, warped, pose, rcfg))
            offs.append(off)
        offs_swapped = [tps(ws[1], fronts[0]), tps(ws[0], fronts[1])]
        raw = torch.stack([o.rgb for o in outs])
        final = g_t.upsampler(raw)
        raw_up = F.interpolate(raw, scale_factor=2, mode="bilinear", align_corners=False)
        return outs, offs, offs_swapped, raw_up, final

    for step in range(steps):
        # discriminator update
        opt_d.zero_grad()
        with torch.no_grad():
            _, _, _, fk_raw, fk_final = fakes()
        idx = torch.randint(images.shape[0], (batch,), generator=rng)
        real = images[idx]
        if real.shape[-1] != 2 * resolution:
            real = F.interpolate(real, size=(2 * resolution, 2 * resolution),
                                 mode="bilinear", align_corners=False)
        real_low = F.interpolate(real, size=(resolution, resolution), mode="bilinear",
                                 align_corners=False)
        real_raw = F.interpolate(real_low, size=real.shape[-2:], mode="bilinear",
                                 align_corners=False)
        loss_d = (F.softplus(-disc(real_raw, real)).mean()
                  + F.softplus(disc(fk_raw, fk_final)).mean())
        loss_d.backward()
        opt_d.step()

        # TPS update
        opt.zero_grad()
        outs, offs, offs_swapped, raw_up, final = fakes()
        loss = F.softplus(-disc(raw_up, final)).mean()
        c_i = tps.identity_points
        loss = loss + reg_t1(c_i, c_i + offs[0], c_i + offs[1],
                             c_i + offs_swapped[0], c_i + offs_swapped[1], weights)
        t_idx = int(torch.randint(images.shape[0], (1,), generator=rng))
        loss = loss + weights.weight_rt2 * reg_t2(final[0], images[t_idx], segmentation)
        if not torch.isfinite(loss):
            raise Divergence(f"TPS loss non-finite at step {step}")
        loss.backward()
        nn.utils.clip_grad_norm_(tps.parameters(), clip)
        opt.step()
        if progress and step % 50 == 0:
            print(f"tps step {step}: loss {float(loss.detach()):.4f}")

    for p in g_t.parameters():
        p.requires_grad_(True)
    return tps

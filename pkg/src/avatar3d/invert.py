"""Two-stage single-image projection and w-delta animation transfer.

Stage 1 optimizes a W-space code in the source generator starting from
w_avg; stage 2 refines that code in the adapted generator under the same
loss family plus the background depth prior and an optional attribute
term. The recovered codes share a latent space, so expression deltas
measured in the source generator can be replayed on the avatar by
offsetting a band of per-layer codes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapt import DepthPrior, NonFiniteLoss, depth_reg
from .camera import CameraPose
from .generator import Generator, NUM_LAYERS, W_DIM
from .render import RenderConfig, RenderOutput


class MissingClassifier(RuntimeError):
    pass


#: Layer band receiving animation deltas: the upper-middle quartile of
#: the synthesis stack (expression-level detail, below the finest texture
#: layers).
ANIMATION_LAYERS = range(NUM_LAYERS // 2, NUM_LAYERS // 2 + NUM_LAYERS // 4)


@dataclass
class ProjectionConfig:
    steps_source: int = 200
    steps_target: int = 400
    space: str = "W"  # or "W_PLUS"
    lr_source: float = 0.05
    lr_target: float = 0.02
    weight_mse: float = 1.0
    weight_perceptual: float = 1.0
    weight_depth: float = 0.005
    weight_attribute: float = 0.0
    resolution: int = 32
    n_ray_steps: int = 24
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps_source < 0 or self.steps_target < 0:
            raise ValueError("step counts must be >= 0")
        for name in ("weight_mse", "weight_perceptual", "weight_depth", "weight_attribute"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.space not in ("W", "W_PLUS"):
            raise ValueError("space must be 'W' or 'W_PLUS'")


@dataclass
class AvatarResult:
    w_source: torch.Tensor
    w_target: torch.Tensor
    render_source: RenderOutput
    render_target: RenderOutput
    trace_source: list[float]
    trace_target: list[float]


class RandomConvDistance(nn.Module):
    """Fixed random-weight convolutional feature distance.

    A dependency-free stand-in for a perceptual distance: random conv
    filters are sensitive to local structure that raw MSE blurs over.
    Any image-pair -> scalar callable may be substituted.
    """

    def __init__(self, channels: int = 24, layers: int = 3, seed: int = 7):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        ch_in = 3
        for _ in range(layers):
            conv = nn.Conv2d(ch_in, channels, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  / math.sqrt(ch_in * 9))
                conv.bias.zero_()
            conv.weight.requires_grad_(False)
            conv.bias.requires_grad_(False)
            convs.append(conv)
            ch_in = channels
        self.convs = nn.ModuleList(convs)

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        x = img if img.dim() == 4 else img[None]
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x / (x.square().mean(dim=1, keepdim=True).sqrt() + 1e-8))
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        fa, fb = self.features(a), self.features(b)
        return sum(((x - y).square().mean()) for x, y in zip(fa, fb)) / len(fa)


def attribute_loss(x: torch.Tensor, render: torch.Tensor, classifier) -> torch.Tensor:
    """Excess BCE between classifier outputs on the reference and render.

    classifier(image [3,H,W]) -> probabilities in [0, 1]; outputs are
    clamped away from {0, 1} so extreme disagreements stay finite. The
    reference's own entropy is subtracted so identical predictions score
    exactly zero (per-attribute KL divergence).
    """
    p_x = torch.as_tensor(classifier(x)).clamp(1e-4, 1 - 1e-4).detach()
    p_r = torch.as_tensor(classifier(render)).clamp(1e-4, 1 - 1e-4)
    return (F.binary_cross_entropy(p_r, p_x)
            - F.binary_cross_entropy(p_x, p_x))


def _expand(w: torch.Tensor, space: str) -> torch.Tensor:
    if space == "W_PLUS" and w.dim() == 1:
        return w[None].repeat(NUM_LAYERS, 1)
    return w


def _render(g: Generator, w: torch.Tensor, pose: CameraPose, cfg: ProjectionConfig) -> RenderOutput:
    rcfg = RenderConfig(resolution=cfg.resolution, n_steps=cfg.n_ray_steps)
    return g(w, pose, rcfg)


def _project(
    g: Generator,
    x: torch.Tensor,
    w_init: torch.Tensor,
    pose: CameraPose,
    cfg: ProjectionConfig,
    steps: int,
    lr: float,
    perceptual,
    prior: DepthPrior | None = None,
    classifier=None,
) -> tuple[torch.Tensor, list[float]]:
    if cfg.weight_attribute > 0 and classifier is None:
        raise MissingClassifier("attribute weight > 0 but no classifier supplied")
    w = _expand(w_init.detach().clone(), cfg.space).requires_grad_(True)
    opt = torch.optim.Adam([w], lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1))
    best_w, best_loss = w.detach().clone(), float("inf")
    trace: list[float] = []
    for _ in range(steps):
        opt.zero_grad()
        out = _render(g, w, pose, cfg)
        loss = cfg.weight_mse * F.mse_loss(out.rgb, x)
        if cfg.weight_perceptual > 0:
            loss = loss + cfg.weight_perceptual * perceptual(out.rgb, x)
        if cfg.weight_depth > 0 and prior is not None:
            loss = loss + cfg.weight_depth * depth_reg(out, prior)
        if cfg.weight_attribute > 0:
            loss = loss + cfg.weight_attribute * attribute_loss(x, out.rgb, classifier)
        if not torch.isfinite(loss):
            raise NonFiniteLoss("projection loss non-finite")
        loss.backward()
        opt.step()
        sched.step()
        val = float(loss.detach())
        trace.append(val)
        if val < best_loss:
            best_loss, best_w = val, w.detach().clone()
    return best_w, trace


def project_source(
    x: torch.Tensor,
    g_s: Generator,
    pose: CameraPose,
    cfg: ProjectionConfig | None = None,
    perceptual=None,
) -> tuple[torch.Tensor, list[float]]:
    """Recover a W-space code for x in the source generator.

    Starts at w_avg; returns (best-loss code, loss trace). Stage 1 is
    always plain W-space regardless of cfg.space.
    """
    cfg = cfg or ProjectionConfig()
    perceptual = perceptual or RandomConvDistance()
    w_avg = g_s.mapping.w_avg.detach().clone()
    if cfg.steps_source == 0:
        return w_avg, []
    stage1 = ProjectionConfig(**{**cfg.__dict__, "space": "W", "weight_depth": 0.0,
                                 "weight_attribute": 0.0})
    return _project(g_s, x, w_avg, pose, stage1, cfg.steps_source, cfg.lr_source, perceptual)


def project_target(
    x: torch.Tensor,
    w_init: torch.Tensor,
    g_t: Generator,
    pose: CameraPose,
    cfg: ProjectionConfig | None = None,
    perceptual=None,
    prior: DepthPrior | None = None,
    classifier=None,
) -> tuple[torch.Tensor, list[float]]:
    """Refine a source-domain code in the adapted generator."""
    cfg = cfg or ProjectionConfig()
    perceptual = perceptual or RandomConvDistance()
    if cfg.steps_target == 0:
        return _expand(w_init.detach().clone(), cfg.space), []
    return _project(g_t, x, w_init, pose, cfg, cfg.steps_target, cfg.lr_target,
                    perceptual, prior=prior, classifier=classifier)


def project(
    x: torch.Tensor,
    g_s: Generator,
    g_t: Generator,
    pose: CameraPose,
    cfg: ProjectionConfig | None = None,
    perceptual=None,
    prior: DepthPrior | None = None,
    classifier=None,
) -> AvatarResult:
    """Full two-stage pipeline: source projection, then target refinement."""
    cfg = cfg or ProjectionConfig()
    perceptual = perceptual or RandomConvDistance()
    w_s, trace_s = project_source(x, g_s, pose, cfg, perceptual)
    w_t, trace_t = project_target(x, w_s, g_t, pose, cfg, perceptual, prior, classifier)
    with torch.no_grad():
        out_s = _render(g_s, w_s, pose, cfg)
        out_t = _render(g_t, w_t, pose, cfg)
    return AvatarResult(w_s, w_t, out_s, out_t, trace_s, trace_t)


def animate(
    w_video: torch.Tensor,
    w_avatar: torch.Tensor,
    g_t: Generator,
    poses: list[CameraPose],
    layers: range = ANIMATION_LAYERS,
    rcfg: RenderConfig | None = None,
) -> list[RenderOutput]:
    """Replay per-frame w deltas from a source video onto the avatar.

    w_video: [T, w_dim] source codes; deltas relative to frame 0 are
    added to the avatar's code at the given layers only. poses supplies
    the camera track (length T, or length 1 to hold a fixed pose).
    """
    rcfg = rcfg or RenderConfig(resolution=32, n_steps=24)
    if w_video.dim() != 2 or w_video.shape[1] != W_DIM:
        raise ValueError("w_video must be [T, w_dim]")
    base = w_avatar if w_avatar.dim() == 2 else w_avatar[None].repeat(NUM_LAYERS, 1)
    frames: list[RenderOutput] = []
    with torch.no_grad():
        for t in range(w_video.shape[0]):
            ws = base.clone()
            delta = w_video[t] - w_video[0]
            for layer in layers:
                ws[layer] = ws[layer] + delta
            pose = poses[t] if len(poses) > 1 else poses[0]
            frames.append(g_t(ws, pose, rcfg))
    return frames

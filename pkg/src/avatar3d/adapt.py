"""Fine-tuning engine: adversarial adaptation with geometry safeguards.

The generator is trained against unpaired, pose-free target images using
an unconditional dual discriminator (low-res render + upsampled output),
adaptive discriminator augmentation, lazy R1, lazy density
regularization, an L1 penalty on the S-space deviation and a background
depth prior. Only the texture parameters and delta_s receive updates;
the baseline trainer updates everything with no safeguards and exists to
reproduce the ablation trend.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .align import AlignmentResult
from .camera import CameraPose
from .generator import DeltaS, Generator, PLANE_EXTENT
from .render import RenderConfig, RenderOutput, render_batch


class NonFiniteLoss(RuntimeError):
    pass


class EmptyBackground(RuntimeError):
    pass


@dataclass
class AdaptConfig:
    weight_delta_s: float = 0.001
    weight_depth: float = 0.005
    r1_gamma: float = 1.0
    r1_interval: int = 8
    ada_target: float = 0.6
    ada_enabled: bool = True
    ada_adjust: float = 0.01
    density_reg_interval: int = 4
    density_reg_weight: float = 0.25
    weight_side_planes: float = 0.0
    lazy_reg_interval: int = 4   # for R(delta_s) and R(D)
    batch: int = 4
    steps: int = 600
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    resolution: int = 32        # neural rendering resolution during training
    n_ray_steps: int = 24
    depth_prior_mode: str = "as_written"  # or "consistent_sqrt"
    epsilon_bg: float = 0.5
    seed: int = 0


@dataclass
class DepthPrior:
    a_d: float
    n_samples: int
    epsilon_bg: float


def delta_s_reg(d: DeltaS) -> torch.Tensor:
    """L1 norm of the deviation parameters."""
    return d.l1()


def estimate_background_depth(
    g_s: Generator,
    n_samples: int = 32,
    segmentation=None,
    cfg: AdaptConfig | None = None,
    pose_fn=None,
    seed: int = 0,
) -> DepthPrior:
    """Mean per-sample squared masked background depth of the source.

    segmentation(out: RenderOutput) -> background mask [H, W]; defaults to
    the renderer's opacity threshold mask.
    """
    from .render import background_mask

    if n_samples < 16:
        raise ValueError("n_samples must be >= 16")
    cfg = cfg or AdaptConfig()
    rcfg = RenderConfig(resolution=cfg.resolution, n_steps=cfg.n_ray_steps,
                        epsilon_bg=cfg.epsilon_bg)
    rng = torch.Generator().manual_seed(seed)
    if pose_fn is None:
        from .data import sample_pose
        pose_fn = lambda: sample_pose(rng)
    if segmentation is None:
        segmentation = lambda out: background_mask(out, cfg.epsilon_bg)
    total = 0.0
    with torch.no_grad():
        for _ in range(n_samples):
            z = torch.randn(64, generator=rng)
            out = g_s(g_s.map_latent(z), pose_fn(), rcfg, interp=0.0)
            mask = segmentation(out)
            n_bg = mask.sum().item()
            if n_bg == 0:
                raise EmptyBackground("segmentation masked zero pixels")
            total += (out.depth * mask).square().sum().item() / n_bg
    return DepthPrior(total / n_samples, n_samples, cfg.epsilon_bg)


def depth_reg(
    out_t: RenderOutput,
    prior: DepthPrior,
    segmentation=None,
    mode: str = "as_written",
) -> torch.Tensor:
    """Frobenius distance between the depth prior and masked target depth.

    Evaluated over background pixels only (the prior is meaningless on
    the foreground). mode="as_written" compares against the squared-depth
    prior exactly as estimated; "consistent_sqrt" compares against its
    square root so both sides carry depth units.
    """
    from .render import background_mask

    if segmentation is None:
        segmentation = lambda o: background_mask(o, prior.epsilon_bg)
    mask = segmentation(out_t)
    a_d = prior.a_d if mode == "as_written" else math.sqrt(prior.a_d)
    diff = (a_d - out_t.depth) * mask
    return diff.square().sum().sqrt()


def density_reg(
    g: Generator,
    w: torch.Tensor,
    n_pairs: int = 256,
    delta: float = 0.02,
    delta_s: DeltaS | None = None,
    interp: float = 1.0,
    seed: int | None = None,
) -> torch.Tensor:
    """Mean absolute density difference between nearby point pairs."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    pts = (torch.rand(n_pairs, 3, generator=gen) * 2 - 1) * PLANE_EXTENT
    offs = torch.randn(n_pairs, 3, generator=gen)
    offs = offs / offs.norm(dim=-1, keepdim=True) * delta
    fieldq = g.field(w, delta_s, interp)
    d0, _ = fieldq(pts)
    d1, _ = fieldq(pts + offs)
    return (d0 - d1).abs().mean()


class DualDiscriminator(nn.Module):
    """Unconditional dual discriminator over (upsampled raw, final) pairs.

    Never sees camera parameters: the forward signature admits images
    only, matching the pose-free target data.
    """

    def __init__(self, resolution: int = 64, base: int = 32):
        super().__init__()
        layers = []
        ch_in = 6
        ch = base
        res = resolution
        while res > 4:
            layers += [nn.Conv2d(ch_in, ch, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch_in, ch = ch, min(ch * 2, 128)
            res //= 2
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(ch_in * res * res, 1)

    def forward(self, raw_up: torch.Tensor, final: torch.Tensor) -> torch.Tensor:
        x = torch.cat([raw_up, final], dim=1)
        x = self.body(x)
        return self.head(x.flatten(1))[:, 0]


class AdaAugment:
    """Flips, integer translation and color jitter, applied with probability p.

    p is adapted from the sign statistics of the discriminator's real
    logits (overfitting heuristic).
    """

    def __init__(self, cfg: AdaptConfig, rng: torch.Generator):
        self.p = 0.0 if not cfg.ada_enabled else 1e-3
        self.enabled = cfg.ada_enabled
        self.target = cfg.ada_target
        self.adjust = cfg.ada_adjust
        self.rng = rng

    def __call__(self, imgs: torch.Tensor) -> torch.Tensor:
        if not self.enabled or self.p == 0.0:
            return imgs
        out = []
        for img in imgs:
            if torch.rand((), generator=self.rng) < self.p:
                img = torch.flip(img, dims=[-1])
            if torch.rand((), generator=self.rng) < self.p:
                shift = torch.randint(-3, 4, (2,), generator=self.rng)
                img = torch.roll(img, shifts=tuple(shift.tolist()), dims=(-2, -1))
            if torch.rand((), generator=self.rng) < self.p:
                scale = 1.0 + 0.2 * (torch.rand(3, 1, 1, generator=self.rng) - 0.5)
                img = (img * scale).clamp(0, 1)
            out.append(img)
        return torch.stack(out)

    def update(self, real_logit_signs: float) -> None:
        """real_logit_signs: batch mean of sign(D(real))."""
        if not self.enabled:
            return
        self.p += self.adjust * (1 if real_logit_signs > self.target else -1)
        self.p = min(max(self.p, 0.0), 1.0)


@dataclass
class TrainState:
    generator: Generator
    discriminator: DualDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    ada: AdaAugment
    prior: DepthPrior | None
    alignment: AlignmentResult
    cfg: AdaptConfig
    rng: torch.Generator
    baseline: bool = False
    step: int = 0
    history: list[dict] = field(default_factory=list)


def make_train_state(
    g_s: Generator,
    alignment: AlignmentResult,
    cfg: AdaptConfig,
    baseline: bool = False,
) -> TrainState:
    """Clone the source generator into a trainee and set up optimizers.

    The regularized trainer optimizes texture + delta_s only; the
    baseline trainer optimizes every generator parameter.
    """
    g = copy.deepcopy(g_s)
    groups = g.parameter_groups()
    if baseline:
        params = list(g.parameters())
    else:
        params = list(groups.texture.values()) + list(groups.geometry.values())
    opt_g = torch.optim.Adam(params, lr=cfg.lr_g, betas=(0.0, 0.99))
    d = DualDiscriminator(resolution=cfg.resolution * 2)
    opt_d = torch.optim.Adam(d.parameters(), lr=cfg.lr_d, betas=(0.0, 0.99))
    rng = torch.Generator().manual_seed(cfg.seed)
    prior = None
    if not baseline and cfg.weight_depth > 0:
        prior = estimate_background_depth(g_s, 32, cfg=cfg, seed=cfg.seed)
    return TrainState(
        g, d, opt_g, opt_d, AdaAugment(cfg, rng), prior, alignment, cfg, rng,
        baseline=baseline,
    )


def _sample_training_poses(state: TrainState, n: int) -> list[CameraPose]:
    a = state.alignment
    poses = []
    for _ in range(n):
        u = torch.rand(2, generator=state.rng)
        theta = a.theta_range[0] + u[0].item() * (a.theta_range[1] - a.theta_range[0])
        phi = a.phi_range[0] + u[1].item() * (a.phi_range[1] - a.phi_range[0])
        poses.append(CameraPose(theta, phi, a.r_prime, a.c_prime))
    return poses


def _generate_fakes(state: TrainState, n: int, interp: float = 1.0):
    cfg = state.cfg
    g = state.generator
    rcfg = RenderConfig(resolution=cfg.resolution, n_steps=cfg.n_ray_steps,
                        epsilon_bg=cfg.epsilon_bg)
    z = torch.randn(n, 64, generator=state.rng)
    ws = g.map_latent(z)
    planes = g.synthesize_batch(ws, interp=interp)
    poses = _sample_training_poses(state, n)
    outs = render_batch(g.batch_field(planes), poses, rcfg)
    raw = torch.stack([o.rgb for o in outs])
    final = g.upsampler(raw)
    raw_up = F.interpolate(raw, scale_factor=2, mode="bilinear", align_corners=False)
    return ws, outs, raw_up, final


def _dual_pair_from_real(real: torch.Tensor, resolution: int) -> tuple[torch.Tensor, torch.Tensor]:
    low = F.interpolate(real, size=(resolution, resolution), mode="bilinear", align_corners=False)
    raw_up = F.interpolate(low, size=real.shape[-2:], mode="bilinear", align_corners=False)
    return raw_up, real


def train_step(state: TrainState, real_batch: torch.Tensor) -> dict:
    """One adversarial step (D then G) with lazy regularization.

    real_batch: [B, 3, H, W] pose-free target images at the final
    (upsampled) resolution. Returns a dict of scalars.
    """
    cfg = state.cfg
    g, d = state.generator, state.discriminator
    baseline = state.baseline
    interp = 0.0 if baseline else 1.0
    scalars: dict[str, float] = {}

    # --- discriminator step ---
    state.opt_d.zero_grad()
    with torch.no_grad():
        _, _, fake_raw_up, fake_final = _generate_fakes(state, real_batch.shape[0], interp)
    real_raw_up, real_final = _dual_pair_from_real(real_batch, cfg.resolution)
    real_raw_up = state.ada(real_raw_up)
    real_final = state.ada(real_final)
    fake_raw_up = state.ada(fake_raw_up)
    fake_final = state.ada(fake_final)

    do_r1 = state.step % cfg.r1_interval == 0 and cfg.r1_gamma > 0
    if do_r1:
        real_raw_up = real_raw_up.detach().requires_grad_(True)
        real_final = real_final.detach().requires_grad_(True)
    logits_real = d(real_raw_up, real_final)
    logits_fake = d(fake_raw_up, fake_final)
    loss_d = F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean()
    if do_r1:
        grads = torch.autograd.grad(
            logits_real.sum(), [real_raw_up, real_final], create_graph=True
        )
        r1 = sum(gr.square().sum(dim=(1, 2, 3)).mean() for gr in grads)
        loss_d = loss_d + cfg.r1_gamma / 2 * r1 * cfg.r1_interval
        scalars["r1"] = float(r1.detach())
    if not torch.isfinite(loss_d):
        raise NonFiniteLoss(f"discriminator loss non-finite at step {state.step}")
    loss_d.backward()
    state.opt_d.step()
    state.ada.update(torch.sign(logits_real.detach()).mean().item())

    # --- generator step ---
    state.opt_g.zero_grad()
    ws, outs, raw_up, final = _generate_fakes(state, real_batch.shape[0], interp)
    logits = d(raw_up, final)
    loss_g = F.softplus(-logits).mean()
    scalars["adv_g"] = float(loss_g.detach())

    if not baseline:
        if state.step % cfg.lazy_reg_interval == 0:
            rds = delta_s_reg(g.delta_s)
            loss_g = loss_g + cfg.weight_delta_s * rds * cfg.lazy_reg_interval
            if state.prior is not None:
                rd = sum(
                    depth_reg(o, state.prior, mode=cfg.depth_prior_mode) for o in outs
                ) / len(outs)
                loss_g = loss_g + cfg.weight_depth * rd * cfg.lazy_reg_interval
                scalars["depth_reg"] = float(rd.detach())
            scalars["delta_s_reg"] = float(rds.detach())
        if state.step % cfg.density_reg_interval == 0:
            dreg = density_reg(g, ws[0], 128, interp=interp)
            loss_g = loss_g + cfg.density_reg_weight * dreg * cfg.density_reg_interval
            if cfg.weight_side_planes > 0:
                planes = g.synthesize(ws[0], g.delta_s, interp)
                side = planes.side_a.square().mean() + planes.side_b.square().mean()
                loss_g = loss_g + cfg.weight_side_planes * side * cfg.density_reg_interval
                scalars["side_energy"] = float(side.detach())
            scalars["density_reg"] = float(dreg.detach())

    if not torch.isfinite(loss_g):
        raise NonFiniteLoss(f"generator loss non-finite at step {state.step}")
    loss_g.backward()
    state.opt_g.step()

    scalars.update({"adv_d": float(loss_d.detach()), "ada_p": state.ada.p, "step": state.step})
    state.step += 1
    state.history.append(scalars)
    return scalars


def baseline_train_step(state: TrainState, real_batch: torch.Tensor) -> dict:
    """Naive fine-tuning step: all parameters, no geometry safeguards."""
    if not state.baseline:
        raise ValueError("state was not created with baseline=True")
    return train_step(state, real_batch)


def train(
    state: TrainState,
    dataset,
    steps: int | None = None,
    progress: bool = False,
) -> TrainState:
    cfg = state.cfg
    steps = steps if steps is not None else cfg.steps
    images = dataset.images()
    n = images.shape[0]
    for i in range(steps):
        idx = torch.randint(n, (cfg.batch,), generator=state.rng)
        scalars = train_step(state, images[idx])
        if progress and i % 50 == 0:
            print(f"step {scalars['step']}: d={scalars['adv_d']:.3f} g={scalars['adv_g']:.3f} "
                  f"ada_p={scalars['ada_p']:.3f}")
    return state

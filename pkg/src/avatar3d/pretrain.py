"""Distillation pretraining of the toy source generator.

The generator learns to reproduce analytic blob-face renders (rgb, depth
and opacity, supervised per-ray) for latents whose face factors are a
known function of z. A small penalty keeps the side planes low-energy so
the front plane carries the appearance, matching the plane-dominance
behaviour of the full-scale architecture.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import torch
import torch.nn.functional as F

from .camera import generate_rays
from .data import SyntheticSpec, factors_from_z, sample_pose
from .generator import Generator
from .render import RenderConfig, march_rays
from .scene import FaceScene


@dataclass
class DistillConfig:
    steps: int = 2000
    batch: int = 8
    rays_per_view: int = 320
    resolution: int = 32
    views_per_identity: int = 4
    lr: float = 2e-3
    side_plane_weight: float = 2e-3
    depth_weight: float = 1.0
    alpha_weight: float = 0.5
    upsampler_steps: int = 300
    seed: int = 0


def _target_bank(spec: SyntheticSpec, cfg: DistillConfig, rcfg: RenderConfig):
    """Precomputed (z index, rays, rgb/depth/alpha targets) tuples."""
    rng = torch.Generator().manual_seed(spec.seed + 17)
    zs = torch.randn(spec.n_identities, 64, generator=rng)
    bank = []
    for i in range(spec.n_identities):
        scene = FaceScene(factors_from_z(zs[i]))
        for _ in range(cfg.views_per_identity):
            pose = sample_pose(rng, spec.radius)
            origins, dirs = generate_rays(pose, cfg.resolution)
            with torch.no_grad():
                rgb, depth, alpha = march_rays(scene, origins, dirs, rcfg)
            bank.append((i, origins, dirs, rgb, depth, alpha))
    return zs, bank


def distill_source_generator(
    spec: SyntheticSpec,
    cfg: DistillConfig | None = None,
    progress: bool = False,
) -> Generator:
    """Train a fresh generator to mimic the analytic source domain."""
    cfg = cfg or DistillConfig()
    torch.manual_seed(cfg.seed)
    rcfg = RenderConfig(resolution=cfg.resolution, n_steps=24)
    zs, bank = _target_bank(spec, cfg, rcfg)

    g = Generator()
    opt = torch.optim.Adam(g.parameters(), lr=cfg.lr)
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    span = rcfg.far - rcfg.near
    n_rays_total = cfg.resolution**2

    from .render import march_rays_batch
    from .generator import PLANE_CHANNELS

    for step in range(cfg.steps):
        opt.zero_grad()
        idx = torch.randint(len(bank), (cfg.batch,), generator=rng).tolist()
        sels = torch.randint(n_rays_total, (cfg.batch, cfg.rays_per_view), generator=rng)
        origins = torch.stack([bank[b][1][sels[k]] for k, b in enumerate(idx)])
        dirs = torch.stack([bank[b][2][sels[k]] for k, b in enumerate(idx)])
        rgb_t = torch.stack([bank[b][3][sels[k]] for k, b in enumerate(idx)])
        depth_t = torch.stack([bank[b][4][sels[k]] for k, b in enumerate(idx)])
        alpha_t = torch.stack([bank[b][5][sels[k]] for k, b in enumerate(idx)])
        ws = g.mapping(torch.stack([zs[bank[b][0]] for b in idx]))
        planes = g.synthesize_batch(ws, interp=0.0)
        rgb, depth, alpha = march_rays_batch(g.batch_field(planes), origins, dirs, rcfg)
        loss = (
            F.mse_loss(rgb, rgb_t)
            + cfg.depth_weight * F.mse_loss(depth / span, depth_t / span)
            + cfg.alpha_weight * F.mse_loss(alpha, alpha_t)
            + cfg.side_plane_weight * planes[:, PLANE_CHANNELS:].square().mean()
        )
        loss.backward()
        opt.step()
        if progress and step % 200 == 0:
            print(f"distill step {step}: loss {loss.item():.5f}")

    _train_upsampler(g, zs, spec, cfg, rcfg)
    g.update_w_avg()
    return g


def _train_upsampler(g, zs, spec, cfg, rcfg):
    """Fit the 2x upsampler against double-resolution analytic renders."""
    from .render import render_field

    hi_cfg = RenderConfig(resolution=cfg.resolution * 2, n_steps=24)
    rng = torch.Generator().manual_seed(cfg.seed + 2)
    opt = torch.optim.Adam(g.upsampler.parameters(), lr=2e-3)
    pairs = []
    for _ in range(24):
        i = torch.randint(spec.n_identities, (), generator=rng).item()
        pose = sample_pose(rng, spec.radius)
        scene = FaceScene(factors_from_z(zs[i]))
        with torch.no_grad():
            lo = g(g.mapping(zs[i]), pose, rcfg, interp=0.0).rgb
            hi = render_field(scene, pose, hi_cfg).rgb
        pairs.append((lo, hi))
    for step in range(cfg.upsampler_steps):
        lo, hi = pairs[step % len(pairs)]
        opt.zero_grad()
        out = g.upsampler(lo)
        F.mse_loss(out, hi).backward()
        opt.step()


def cached_source_generator(
    spec: SyntheticSpec,
    cfg: DistillConfig | None = None,
    cache_dir: Path | str | None = None,
    progress: bool = False,
) -> Generator:
    """Distill once per (spec, cfg) and cache the checkpoint on disk."""
    from .checkpoint import load_checkpoint, save_checkpoint

    cfg = cfg or DistillConfig()
    cache_dir = Path(cache_dir or Path.home() / ".cache" / "avatar3d")
    from .checkpoint import FORMAT_VERSION

    key = hashlib.sha256(
        json.dumps([asdict(spec), asdict(cfg), FORMAT_VERSION], sort_keys=True).encode()
    ).hexdigest()[:16]
    path = cache_dir / f"source_{key}.pt"
    if path.exists():
        g, _, _ = load_checkpoint(path)
        return g
    g = distill_source_generator(spec, cfg, progress=progress)
    save_checkpoint(path, g, extra={"role": "source", "spec": asdict(spec)})
    return g


def make_source_domain(
    spec: SyntheticSpec,
    cfg: DistillConfig | None = None,
    progress: bool = False,
):
    """(source dataset, distilled source generator) for one spec."""
    from .data import make_source_dataset

    return make_source_dataset(spec), cached_source_generator(spec, cfg, progress=progress)

"""Synthetic source/target domain factory and dataset ingestion."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .camera import CameraPose
from .render import RenderConfig, render_field
from .scene import FaceFactors, FaceScene, Palette, project_points
from .tps import TpsField, identity_grid, warp_image, warp_points

THETA_RANGE = (-0.45, 0.45)
PHI_RANGE = (-0.35, 0.35)


class DecodeError(RuntimeError):
    pass


@dataclass
class SyntheticSpec:
    n_identities: int = 48
    resolution: int = 64
    radius: float = 2.7
    skin_variation: float = 1.0
    seed: int = 0


@dataclass
class Sample:
    image: torch.Tensor                    # [3, H, W] in [0, 1]
    landmarks: torch.Tensor | None = None  # [K, 2] pixel coords
    attributes: torch.Tensor | None = None
    pose: CameraPose | None = None         # source-domain only
    depth: torch.Tensor | None = None
    alpha: torch.Tensor | None = None


@dataclass
class Dataset:
    samples: list[Sample]
    spec: SyntheticSpec | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def images(self) -> torch.Tensor:
        return torch.stack([s.image for s in self.samples])


@dataclass
class SourceDataset(Dataset):
    scenes: list[FaceScene] = field(default_factory=list)
    zs: torch.Tensor | None = None  # latent seeds paired with identities


_FACTOR_PROJ_SEED = 1234


def factors_from_z(z: torch.Tensor) -> FaceFactors:
    """Deterministic bounded map from a latent z to face factors.

    Fixed random projection so the dataset's generative factors are a
    known function of z (the attribute oracle relies on this link).
    """
    from .scene import FACTOR_RANGES

    rng = torch.Generator().manual_seed(_FACTOR_PROJ_SEED)
    proj = torch.randn(len(FACTOR_RANGES), z.shape[-1], generator=rng) / math.sqrt(z.shape[-1])
    units = torch.sigmoid(3.0 * (proj @ z))
    return FaceFactors.from_unit({name: units[i].item() for i, name in enumerate(FACTOR_RANGES)})


def sample_pose(rng: torch.Generator, radius: float = 2.7) -> CameraPose:
    """Uniform pose over the safe yaw/pitch ranges."""
    u = torch.rand(2, generator=rng)
    theta = THETA_RANGE[0] + u[0].item() * (THETA_RANGE[1] - THETA_RANGE[0])
    phi = PHI_RANGE[0] + u[1].item() * (PHI_RANGE[1] - PHI_RANGE[0])
    return CameraPose(theta, phi, radius)


def make_source_dataset(spec: SyntheticSpec, render_cfg: RenderConfig | None = None) -> SourceDataset:
    """Procedural source domain with ground-truth depth, pose and landmarks."""
    cfg = render_cfg or RenderConfig(resolution=spec.resolution)
    rng = torch.Generator().manual_seed(spec.seed)
    zs = torch.randn(spec.n_identities, 64, generator=rng)
    samples, scenes = [], []
    for i in range(spec.n_identities):
        factors = factors_from_z(zs[i])
        scene = FaceScene(factors)
        pose = sample_pose(rng, spec.radius)
        out = render_field(scene, pose, cfg)
        lm = project_points(scene.landmarks3d(), pose, cfg.resolution)
        samples.append(
            Sample(
                image=out.rgb,
                landmarks=lm,
                attributes=factors.attributes(),
                pose=pose,
                depth=out.depth,
                alpha=out.alpha,
            )
        )
        scenes.append(scene)
    return SourceDataset(samples=samples, spec=spec, scenes=scenes, zs=zs)


def _exaggeration_field(
    landmarks_px: torch.Tensor,
    resolution: int,
    strength: float,
    gains: torch.Tensor,
) -> TpsField:
    """Landmark-anchored control-point offsets scaling nose/eye/mouth regions.

    gains [K_landmarks] are per-identity signed strengths; control points
    near a landmark are pushed radially away from (or toward) it.
    """
    grid = identity_grid(8)
    lm_norm = landmarks_px / resolution * 2 - 1  # to [-1, 1]
    offsets = torch.zeros_like(grid)
    for k in range(lm_norm.shape[0]):
        rel = grid - lm_norm[k]
        d2 = (rel**2).sum(-1, keepdim=True)
        offsets = offsets + gains[k] * strength * rel * torch.exp(-d2 / 0.08)
    return TpsField(grid, offsets.clamp(-0.3, 0.3))


def make_target_dataset(
    source: SourceDataset,
    exaggeration: float = 0.6,
    palette: Palette | None = None,
    seed: int = 1,
) -> Dataset:
    """Stylized 2D target domain: warped and recolored source renders.

    Applies a landmark-anchored TPS warp plus a palette remap, then strips
    pose and depth labels. exaggeration=0 with no palette is the identity.
    """
    if exaggeration < 0:
        raise ValueError("exaggeration must be >= 0")
    rng = torch.Generator().manual_seed(seed)
    out = []
    for s in source.samples:
        img, lm = s.image, s.landmarks
        if exaggeration > 0:
            gains = 0.5 + torch.rand(lm.shape[0], generator=rng)  # always expansive
            fld = _exaggeration_field(lm, img.shape[-1], exaggeration * 0.5, gains)
            img = warp_image(img, fld)
            lm_norm = lm / img.shape[-1] * 2 - 1
            lm = (warp_points(lm_norm, fld) + 1) / 2 * img.shape[-1]
        if palette is not None:
            img = palette.map_image(img)
        out.append(Sample(image=img.detach(), landmarks=lm.detach(), attributes=s.attributes))
    return Dataset(samples=out, spec=source.spec)


# ---- disk layout: images/%06d.png + meta.jsonl ----

def save_dataset(ds: Dataset, path: Path) -> None:
    from PIL import Image
    import numpy as np

    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    with open(path / "meta.jsonl", "w") as fh:
        for i, s in enumerate(ds.samples):
            arr = (s.image.clamp(0, 1).numpy() * 255).round().astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(arr).save(path / "images" / f"{i:06d}.png")
            rec: dict = {"index": i}
            if s.landmarks is not None:
                rec["landmarks"] = s.landmarks.tolist()
            if s.attributes is not None:
                rec["attributes"] = s.attributes.tolist()
            if s.pose is not None:
                rec["pose"] = {
                    "theta": s.pose.theta, "phi": s.pose.phi,
                    "radius": s.pose.radius, "lookat": list(s.pose.lookat),
                }
            fh.write(json.dumps(rec) + "\n")


def load_image_folder(path: Path, resolution: int) -> tuple[Dataset, int]:
    """Load an image folder: center-crop, resize, normalize to [0, 1].

    Deterministic ordering by filename; undecodable files are skipped and
    counted. Returns (dataset, n_skipped).
    """
    from PIL import Image
    import numpy as np

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    img_dir = path / "images" if (path / "images").is_dir() else path
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    files = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in exts)
    samples, skipped = [], 0
    for f in files:
        try:
            with Image.open(f) as im:
                im = im.convert("RGB")
                side = min(im.size)
                left = (im.width - side) // 2
                top = (im.height - side) // 2
                im = im.crop((left, top, left + side, top + side))
                if side != resolution:
                    im = im.resize((resolution, resolution), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except Exception:
            skipped += 1
            continue
        samples.append(Sample(image=torch.from_numpy(arr).permute(2, 0, 1)))
    return Dataset(samples=samples), skipped

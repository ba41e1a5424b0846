"""Procedural blob-face scenes with analytic geometry.

Each identity is an ellipsoid head plus colored feature blobs (eyes,
nose, mouth) whose 3D positions are known exactly, so landmarks, depth,
silhouettes and attributes all have ground-truth oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .camera import CameraPose, camera_matrix

HEAD_DENSITY = 600.0
EDGE_SHARPNESS = 60.0

# Feature reference colors (source palette); strongly separated so a
# color-centroid detector can localize them in pixels.
EYE_COLOR = (0.10, 0.15, 0.75)
NOSE_COLOR = (0.10, 0.65, 0.15)
MOUTH_COLOR = (0.80, 0.10, 0.15)

LANDMARK_NAMES = ("eye_left", "eye_right", "nose", "mouth")
ATTRIBUTE_NAMES = ("eyes_wide", "nose_big", "mouth_wide", "head_round")

FACTOR_RANGES = {
    "head_rx": (0.20, 0.27),
    "head_ry": (0.24, 0.31),
    "head_rz": (0.17, 0.23),
    "eye_sep": (0.07, 0.13),
    "eye_height": (0.03, 0.09),
    "eye_radius": (0.022, 0.042),
    "nose_radius": (0.025, 0.055),
    "mouth_halfwidth": (0.05, 0.11),
    "mouth_height": (-0.13, -0.07),
    "skin": (0.0, 1.0),
}


@dataclass
class FaceFactors:
    values: dict[str, float]

    @staticmethod
    def sample(rng: torch.Generator) -> "FaceFactors":
        vals = {}
        for name, (lo, hi) in FACTOR_RANGES.items():
            u = torch.rand((), generator=rng).item()
            vals[name] = lo + u * (hi - lo)
        return FaceFactors(vals)

    @staticmethod
    def from_unit(units: dict[str, float]) -> "FaceFactors":
        vals = {
            name: lo + max(0.0, min(1.0, units[name])) * (hi - lo)
            for name, (lo, hi) in FACTOR_RANGES.items()
        }
        return FaceFactors(vals)

    def attributes(self) -> torch.Tensor:
        """Binary attribute vector from the generative factors."""
        f = self.values
        mid = lambda k: sum(FACTOR_RANGES[k]) / 2
        bits = [
            f["eye_sep"] > mid("eye_sep"),
            f["nose_radius"] > mid("nose_radius"),
            f["mouth_halfwidth"] > mid("mouth_halfwidth"),
            f["head_rx"] / f["head_ry"] > 0.835,
        ]
        return torch.tensor([1.0 if b else 0.0 for b in bits])


@dataclass
class Palette:
    """Affine color remap used to stylize a domain. Identity by default."""

    matrix: torch.Tensor = field(default_factory=lambda: torch.eye(3))
    offset: torch.Tensor = field(default_factory=lambda: torch.zeros(3))

    def map_color(self, color: torch.Tensor) -> torch.Tensor:
        return (self.matrix @ color + self.offset).clamp(0.0, 1.0)

    def map_image(self, img: torch.Tensor) -> torch.Tensor:
        """img [3, H, W] -> remapped image."""
        flat = img.reshape(3, -1)
        out = self.matrix.to(img.dtype) @ flat + self.offset.to(img.dtype)[:, None]
        return out.reshape(img.shape).clamp(0.0, 1.0)

    @staticmethod
    def stylized(strength: float = 1.0) -> "Palette":
        """A fixed, saturated recolor that marks the target domain."""
        eye = torch.eye(3)
        mix = torch.tensor([
            [0.2, 0.1, 0.7],
            [0.1, 0.8, 0.1],
            [0.6, 0.2, 0.2],
        ])
        return Palette(eye + strength * (mix - eye), torch.tensor([0.05, 0.0, 0.05]) * strength)


def _skin_color(t: float) -> torch.Tensor:
    warm = torch.tensor([0.95, 0.80, 0.62])
    cool = torch.tensor([0.72, 0.55, 0.42])
    return warm + t * (cool - warm)


class FaceScene:
    """Analytic (density, rgb) field for one identity."""

    def __init__(self, factors: FaceFactors, palette=None):
        f = factors.values
        self.factors = factors
        self.radii = torch.tensor([f["head_rx"], f["head_ry"], f["head_rz"]])
        self.skin = _skin_color(f["skin"])
        er = f["eye_radius"]
        nr = f["nose_radius"]
        eye_z = self._surface_z(f["eye_sep"], f["eye_height"]) + 0.3 * er
        mouth_z = self._surface_z(0.0, f["mouth_height"]) + 0.01
        nose_z = self._surface_z(0.0, 0.0) + 0.4 * nr
        # (center, per-axis half-widths, color); blobs poke out of the head
        self.blobs = [
            (torch.tensor([-f["eye_sep"], f["eye_height"], eye_z]), torch.tensor([er, er, er]), torch.tensor(EYE_COLOR)),
            (torch.tensor([f["eye_sep"], f["eye_height"], eye_z]), torch.tensor([er, er, er]), torch.tensor(EYE_COLOR)),
            (torch.tensor([0.0, 0.0, nose_z]), torch.tensor([nr, nr, 1.2 * nr]), torch.tensor(NOSE_COLOR)),
            (torch.tensor([0.0, f["mouth_height"], mouth_z]), torch.tensor([0.9 * f["mouth_halfwidth"], 0.025, 0.03]), torch.tensor(MOUTH_COLOR)),
        ]
        if palette is not None:
            self.skin = palette.map_color(self.skin)
            self.blobs = [(c, r, palette.map_color(col)) for c, r, col in self.blobs]

    def _surface_z(self, x: float, y: float) -> float:
        rx, ry, rz = self.radii.tolist()
        rest = 1.0 - (x / rx) ** 2 - (y / ry) ** 2
        return rz * math.sqrt(max(rest, 0.0))

    def landmarks3d(self) -> torch.Tensor:
        """[4, 3] known landmark positions: the blob centers."""
        return torch.stack([center for center, _, _ in self.blobs])

    def query(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Density and color at points [N, 3]."""
        dtype = points.dtype
        q = ((points / self.radii.to(dtype)) ** 2).sum(dim=-1)
        occ_head = torch.sigmoid((1.0 - q) * EDGE_SHARPNESS)
        density = occ_head.clone()
        color = occ_head[:, None] * self.skin.to(dtype)
        weight = occ_head.clone()
        for center, radii, col in self.blobs:
            d = torch.linalg.norm((points - center.to(dtype)) / radii.to(dtype), dim=-1)
            occ = torch.sigmoid((1.0 - d) * 8.0)
            density = torch.maximum(density, occ)
            # feature color overrides skin where the blob occupies
            color = color * (1 - occ[:, None]) + occ[:, None] * col.to(dtype)
            weight = torch.maximum(weight, occ)
        rgb = color / weight.clamp(min=1e-6)[:, None]
        return density * HEAD_DENSITY, rgb.clamp(0.0, 1.0)

    @property
    def dtype(self):
        return torch.float32

    def __call__(self, points):
        return self.query(points)


def project_points(points3d: torch.Tensor, pose: CameraPose, resolution: int) -> torch.Tensor:
    """Project world points [K, 3] to pixel coordinates [K, 2] (x=col, y=row).

    Matches generate_rays exactly; this is the ground-truth landmark oracle.
    """
    m = pose.matrix(dtype=points3d.dtype)
    right, up, forward, origin = m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3]
    rel = points3d - origin
    x = rel @ right
    y = rel @ up
    z = rel @ forward
    half = math.tan(math.radians(pose.fov_deg) / 2)
    u = x / z / half
    v = y / z / half
    col = (u + 1) * resolution / 2 - 0.5
    row = (1 - v) * resolution / 2 - 0.5
    return torch.stack([col, row], dim=-1)

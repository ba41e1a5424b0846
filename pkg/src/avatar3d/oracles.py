"""Pixel-space oracles for the synthetic domain.

These stand in for the external landmark detector, face segmentation
network and attribute classifiers: they work purely on images, so they
apply equally to analytic renders, generator outputs and stylized
targets. Each one is a plain callable and can be swapped for a real
model behind the same signature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import scene as _scene


class DetectorFailure(RuntimeError):
    """Raised when landmarks cannot be produced; never silently zeroed."""


def _foreground_weight(img: torch.Tensor, background) -> torch.Tensor:
    bg = torch.as_tensor(background, dtype=img.dtype)[:, None, None]
    return (img - bg).abs().mean(dim=0)


@dataclass
class ColorCentroidDetector:
    """Landmark detector: soft centroid of pixels near each feature color.

    reference_colors is [K, 3]; a palette-remapped domain passes its own
    colors. Returns [K, 2] pixel coordinates (x=col, y=row).
    """

    reference_colors: torch.Tensor = field(
        default_factory=lambda: torch.tensor([
            _scene.EYE_COLOR, _scene.EYE_COLOR, _scene.NOSE_COLOR, _scene.MOUTH_COLOR,
        ])
    )
    tau: float = 0.12
    min_mass: float = 0.05
    split_eyes: bool = True  # first two entries are left/right halves of the eye mask

    def __call__(self, img: torch.Tensor) -> torch.Tensor:
        _, h, w = img.shape
        ys = torch.arange(h, dtype=img.dtype)
        xs = torch.arange(w, dtype=img.dtype)
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        points = []
        for k, color in enumerate(self.reference_colors):
            d2 = ((img - color.to(img.dtype)[:, None, None]) ** 2).mean(dim=0)
            wgt = torch.exp(-d2 / (2 * self.tau**2))
            wgt = wgt * (d2 < 3 * self.tau**2)
            if self.split_eyes and k < 2:
                com_x = (wgt * xx).sum() / wgt.sum().clamp(min=1e-8)
                half = xx < com_x if k == 0 else xx >= com_x
                wgt = wgt * half
            mass = wgt.sum()
            if mass < self.min_mass:
                raise DetectorFailure(f"feature {k}: mass {mass:.4f} below {self.min_mass}")
            points.append(torch.stack([(wgt * xx).sum() / mass, (wgt * yy).sum() / mass]))
        return torch.stack(points)


@dataclass
class SoftSegmentation:
    """Soft-argmax region summary of an image.

    Splits the frame into an n x n grid and returns, per region, the
    centroid of foreground mass within it (foreground = distance from the
    flat background color), giving an [n*n, 2] pose/shape signature in
    normalized [0, 1] coordinates. Differentiable.
    """

    grid: int = 3
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __call__(self, img: torch.Tensor) -> torch.Tensor:
        _, h, w = img.shape
        mass = _foreground_weight(img, self.background)
        ys = (torch.arange(h, dtype=img.dtype) + 0.5) / h
        xs = (torch.arange(w, dtype=img.dtype) + 0.5) / w
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        out = []
        hs, ws = h // self.grid, w // self.grid
        for i in range(self.grid):
            for j in range(self.grid):
                sl = (slice(i * hs, (i + 1) * hs), slice(j * ws, (j + 1) * ws))
                m = mass[sl]
                total = m.sum() + 1e-6
                out.append(torch.stack([(m * xx[sl]).sum() / total, (m * yy[sl]).sum() / total]))
        return torch.stack(out)


@dataclass
class AttributeEstimator:
    """Soft attribute probabilities measured from an image.

    Attributes mirror scene.ATTRIBUTE_NAMES; each is a sigmoid of a
    pixel-space statistic centered on the population midpoint.
    """

    detector: ColorCentroidDetector = field(default_factory=ColorCentroidDetector)
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # Decision midpoints: population medians of each statistic on frontal
    # renders, split by the generative factor driving the attribute.
    mid_eye_sep: float = 0.446
    mid_nose_mass: float = 0.0413
    mid_mouth_mass: float = 0.0429
    mid_aspect: float = 0.888

    def __call__(self, img: torch.Tensor) -> torch.Tensor:
        _, h, w = img.shape
        fg = _foreground_weight(img, self.background) > 0.08
        if not fg.any():
            raise DetectorFailure("empty foreground")
        rows = fg.any(dim=1).nonzero().flatten()
        cols = fg.any(dim=0).nonzero().flatten()
        width = (cols[-1] - cols[0] + 1).item()
        height = (rows[-1] - rows[0] + 1).item()
        lm = self.detector(img)
        eye_sep = (lm[1, 0] - lm[0, 0]).abs() / width

        nose_d2 = ((img - torch.tensor(_scene.NOSE_COLOR, dtype=img.dtype)[:, None, None]) ** 2).mean(dim=0)
        mouth_d2 = ((img - torch.tensor(_scene.MOUTH_COLOR, dtype=img.dtype)[:, None, None]) ** 2).mean(dim=0)
        tau2 = 2 * self.detector.tau**2
        nose_mass = torch.exp(-nose_d2 / tau2).sum() / (width * height)
        mouth_mass = torch.exp(-mouth_d2 / tau2).sum() / (width * height)

        aspect = torch.as_tensor(width / height, dtype=img.dtype)
        logits = torch.stack([
            (eye_sep - self.mid_eye_sep) * 60,
            (nose_mass - self.mid_nose_mass) * 300,
            (mouth_mass - self.mid_mouth_mass) * 300,
            (aspect - self.mid_aspect) * 40,
        ])
        return torch.sigmoid(logits)

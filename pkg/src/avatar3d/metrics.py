"""Evaluation suite: depth divergence, shape-preservation score, identity
BCE, keypoint statistics, chamfer distance and a Fréchet feature distance.

Depth statistics compare coupled foreground depth maps rendered from the
same code and pose in the source and adapted generators; depths are
normalized by the near-far span so numbers are independent of scene
scale. All metrics are non-negative, zero on identical inputs, and
permutation-invariant over sample order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np
import torch
from scipy.linalg import sqrtm
from scipy.spatial import cKDTree

from .camera import CameraPose, generate_rays
from .generator import Generator
from .invert import MissingClassifier, attribute_loss
from .oracles import SoftSegmentation
from .render import RenderConfig, background_mask
from .tps import reg_t2


class EmptyForeground(RuntimeError):
    pass


class EmptyCloud(RuntimeError):
    pass


@dataclass
class DepthPairSet:
    depth_source: torch.Tensor  # [N, H, W], normalized by (far - near)
    depth_target: torch.Tensor  # [N, H, W]
    mask_source: torch.Tensor   # [N, H, W] foreground masks (1 = face)
    mask_target: torch.Tensor

    def __post_init__(self) -> None:
        if self.depth_source.shape != self.depth_target.shape:
            raise ValueError("paired depth sets must have identical shapes")
        if (self.mask_source.sum(dim=(1, 2)) == 0).any() or (
            self.mask_target.sum(dim=(1, 2)) == 0
        ).any():
            raise EmptyForeground("a pair has an empty foreground mask")

    def __len__(self) -> int:
        return self.depth_source.shape[0]


@dataclass
class MetricReport:
    m_d: float
    s_d: float
    rt2: float
    id_bce: float
    kp_distance: float
    kp_variation: float
    n: int
    config_hash: str

    def __post_init__(self) -> None:
        for k, v in asdict(self).items():
            if isinstance(v, float) and not np.isfinite(v):
                raise ValueError(f"metric {k} is non-finite")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _masked_stats(depth: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-map foreground mean and std. depth, mask: [N, H, W]."""
    n_fg = mask.sum(dim=(1, 2))
    mean = (depth * mask).sum(dim=(1, 2)) / n_fg
    var = ((depth - mean[:, None, None]).square() * mask).sum(dim=(1, 2)) / n_fg
    return mean, var.sqrt()


def m_d(pairs: DepthPairSet) -> float:
    """Expected absolute difference of paired foreground depth means."""
    if len(pairs) < 16:
        raise ValueError("need at least 16 pairs")
    mu_s, _ = _masked_stats(pairs.depth_source, pairs.mask_source)
    mu_t, _ = _masked_stats(pairs.depth_target, pairs.mask_target)
    return float((mu_s - mu_t).abs().mean())


def s_d(pairs: DepthPairSet) -> float:
    """Expected absolute difference of paired foreground depth stds."""
    if len(pairs) < 16:
        raise ValueError("need at least 16 pairs")
    _, sd_s = _masked_stats(pairs.depth_source, pairs.mask_source)
    _, sd_t = _masked_stats(pairs.depth_target, pairs.mask_target)
    return float((sd_s - sd_t).abs().mean())


def coupled_depth_pairs(
    g_s: Generator,
    g_t: Generator,
    n: int = 32,
    pose: CameraPose | None = None,
    rcfg: RenderConfig | None = None,
    seed: int = 0,
) -> DepthPairSet:
    """Render coupled depth maps from shared codes at shared poses."""
    rcfg = rcfg or RenderConfig(resolution=32, n_steps=24)
    pose = pose or CameraPose(0.0, 0.0, 2.7)
    span = rcfg.far - rcfg.near
    rng = torch.Generator().manual_seed(seed)
    ds, dt, ms, mt = [], [], [], []
    with torch.no_grad():
        for _ in range(n):
            w = g_s.map_latent(torch.randn(64, generator=rng))
            out_s = g_s(w, pose, rcfg)
            out_t = g_t(w, pose, rcfg)
            ds.append(out_s.depth / span)
            dt.append(out_t.depth / span)
            ms.append(1.0 - background_mask(out_s, rcfg.epsilon_bg))
            mt.append(1.0 - background_mask(out_t, rcfg.epsilon_bg))
    return DepthPairSet(torch.stack(ds), torch.stack(dt), torch.stack(ms), torch.stack(mt))


def rt2_score(
    g_s: Generator,
    g_t: Generator,
    segmentation=None,
    n: int = 16,
    pose: CameraPose | None = None,
    rcfg: RenderConfig | None = None,
    seed: int = 0,
) -> float:
    """Mean segmentation-summary divergence over coupled canonical renders.

    Computed without any deformation module in the loop: the score reads
    how far the adapted generator drifted from the source layout.
    """
    segmentation = segmentation or SoftSegmentation()
    rcfg = rcfg or RenderConfig(resolution=32, n_steps=24)
    pose = pose or CameraPose(0.0, 0.0, 2.7)
    rng = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(n):
            w = g_s.map_latent(torch.randn(64, generator=rng))
            total += float(reg_t2(g_t(w, pose, rcfg).rgb, g_s(w, pose, rcfg).rgb, segmentation))
    return total / n


def identity_bce(
    g_s: Generator,
    g_t: Generator,
    classifier,
    n: int = 16,
    pose: CameraPose | None = None,
    rcfg: RenderConfig | None = None,
    seed: int = 0,
) -> float:
    """Mean attribute BCE between coupled source and adapted renders."""
    if classifier is None:
        raise MissingClassifier("identity_bce requires an attribute classifier")
    rcfg = rcfg or RenderConfig(resolution=32, n_steps=24)
    pose = pose or CameraPose(0.0, 0.0, 2.7)
    rng = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(n):
            w = g_s.map_latent(torch.randn(64, generator=rng))
            total += float(attribute_loss(g_s(w, pose, rcfg).rgb, g_t(w, pose, rcfg).rgb, classifier))
    return total / n


def keypoint_stats(
    pairs: list[tuple[torch.Tensor, torch.Tensor]],
    detector,
) -> tuple[float, float]:
    """(mean landmark displacement across pairs, mean per-landmark std).

    pairs: (source image, avatar image); detector(image) -> [K, 2] pixel
    coordinates. Variation is the std of each landmark coordinate across
    the avatar set, averaged.
    """
    dists = []
    avatar_kps = []
    for src, avatar in pairs:
        kp_s = detector(src)
        kp_a = detector(avatar)
        dists.append((kp_s - kp_a).norm(dim=-1).mean())
        avatar_kps.append(kp_a)
    stack = torch.stack(avatar_kps)  # [N, K, 2]
    variation = stack.std(dim=0, unbiased=False).mean() if len(pairs) > 1 else torch.tensor(0.0)
    return float(torch.stack(dists).mean()), float(variation)


def backproject(depth: torch.Tensor, mask: torch.Tensor, pose: CameraPose) -> torch.Tensor:
    """Depth map + mask -> [M, 3] world point cloud via the camera rays."""
    res = depth.shape[-1]
    origins, dirs = generate_rays(pose, res)
    pts = origins + dirs * depth.reshape(-1, 1)
    keep = mask.reshape(-1) > 0.5
    if not keep.any():
        raise EmptyCloud("mask selects no pixels")
    return pts[keep]


def chamfer(cloud_a: torch.Tensor, cloud_b: torch.Tensor) -> float:
    """Symmetric mean nearest-neighbor distance between point clouds."""
    if cloud_a.numel() == 0 or cloud_b.numel() == 0:
        raise EmptyCloud("empty point cloud")
    a = cloud_a.detach().cpu().numpy()
    b = cloud_b.detach().cpu().numpy()
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(d_ab.mean() + d_ba.mean()) / 2


def fid(features_real: torch.Tensor, features_fake: torch.Tensor, eps: float = 1e-6) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    ||mu_r - mu_f||^2 + tr(C_r + C_f - 2 (C_r C_f)^{1/2}); singular
    covariances are handled by epsilon diagonal loading.
    """
    if features_real.shape[0] < 2 or features_fake.shape[0] < 2:
        raise ValueError("need at least 2 samples per side")
    fr = features_real.detach().cpu().double().numpy().reshape(features_real.shape[0], -1)
    ff = features_fake.detach().cpu().double().numpy().reshape(features_fake.shape[0], -1)
    mu_r, mu_f = fr.mean(axis=0), ff.mean(axis=0)
    c_r = np.cov(fr, rowvar=False) + eps * np.eye(fr.shape[1])
    c_f = np.cov(ff, rowvar=False) + eps * np.eye(ff.shape[1])
    covmean = sqrtm(c_r @ c_f)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    val = float(((mu_r - mu_f) ** 2).sum() + np.trace(c_r + c_f - 2 * covmean))
    return max(val, 0.0)


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def evaluate(
    g_s: Generator,
    g_t: Generator,
    classifier,
    detector=None,
    n: int = 32,
    pose: CameraPose | None = None,
    rcfg: RenderConfig | None = None,
    seed: int = 0,
) -> MetricReport:
    """Full coupled-sample report between a source and adapted generator."""
    rcfg = rcfg or RenderConfig(resolution=32, n_steps=24)
    pose = pose or CameraPose(0.0, 0.0, 2.7)
    pairs = coupled_depth_pairs(g_s, g_t, n, pose, rcfg, seed)
    kp_distance = kp_variation = 0.0
    if detector is not None:
        rng = torch.Generator().manual_seed(seed)
        imgs = []
        with torch.no_grad():
            for _ in range(min(n, 16)):
                w = g_s.map_latent(torch.randn(64, generator=rng))
                imgs.append((g_s(w, pose, rcfg).rgb, g_t(w, pose, rcfg).rgb))
        kp_distance, kp_variation = keypoint_stats(imgs, detector)
    payload = {
        "n": n, "seed": seed, "resolution": rcfg.resolution, "n_steps": rcfg.n_steps,
        "near": rcfg.near, "far": rcfg.far, "depth_normalizer": rcfg.far - rcfg.near,
        "pose": [pose.theta, pose.phi, pose.radius, list(pose.lookat)],
    }
    return MetricReport(
        m_d=m_d(pairs),
        s_d=s_d(pairs),
        rt2=rt2_score(g_s, g_t, n=min(n, 16), pose=pose, rcfg=rcfg, seed=seed),
        id_bce=identity_bce(g_s, g_t, classifier, n=min(n, 16), pose=pose, rcfg=rcfg, seed=seed),
        kp_distance=kp_distance,
        kp_variation=kp_variation,
        n=n,
        config_hash=_config_hash(payload),
    )

"""Camera alignment between the 3D source generator and a 2D target.

Finds the lookat offset and radius whose canonical render best matches
the target's mean-latent image under a keypoint loss, via multi-start
coordinate descent (the detector need not be differentiable).

At the canonical pose alone, (lookat_z, radius) shift the camera along
the same axis and are not separately identifiable; when the target can
supply keypoints at extra probe yaws (always true for synthetic
self-consistency targets) the loss sums over those probes and the pair
becomes identifiable. With a single target image the probe list
degenerates to the canonical pose and ties are broken lexicographically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .camera import CameraPose
from .data import PHI_RANGE, THETA_RANGE
from .oracles import DetectorFailure

KeypointFn = Callable[[torch.Tensor, float, float], torch.Tensor]  # (c, r, theta) -> [K, 2]


class NoConvergence(RuntimeError):
    pass


def safe_pose_ranges(config: dict | None = None) -> tuple[tuple[float, float], tuple[float, float]]:
    """Safe yaw/pitch ranges in radians; constants unless overridden."""
    cfg = config or {}
    return (
        tuple(cfg.get("theta_range", THETA_RANGE)),
        tuple(cfg.get("phi_range", PHI_RANGE)),
    )


def keypoint_loss(img_a: torch.Tensor, img_b: torch.Tensor, detector) -> torch.Tensor:
    """Mean per-landmark L1 displacement between two images' keypoints."""
    ka = detector(img_a)
    kb = detector(img_b)
    if ka.shape != kb.shape:
        raise DetectorFailure(f"keypoint count mismatch: {ka.shape} vs {kb.shape}")
    return (ka - kb).abs().sum() / ka.shape[0]


def keypoint_set_loss(ka: torch.Tensor, kb: torch.Tensor) -> float:
    return ((ka - kb).abs().sum() / ka.shape[0]).item()


@dataclass
class AlignConfig:
    c_bounds: tuple[float, float] = (-0.3, 0.3)
    r_bounds: tuple[float, float] = (2.0, 3.5)
    probe_thetas: tuple[float, ...] = (0.0, -0.3, 0.3)
    initial_step: float = 0.16
    min_step: float = 0.001
    residual_threshold: float = 2.0  # px, mean landmark displacement
    restarts: int = 8


@dataclass
class AlignmentResult:
    c_prime: tuple[float, float, float]
    r_prime: float
    theta_range: tuple[float, float]
    phi_range: tuple[float, float]
    residual: float

    def canonical_pose(self) -> CameraPose:
        return CameraPose(0.0, 0.0, self.r_prime, self.c_prime)

    def pose(self, theta: float = 0.0, phi: float = 0.0) -> CameraPose:
        return CameraPose(theta, phi, self.r_prime, self.c_prime)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, default=list, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path) -> "AlignmentResult":
        d = json.loads(Path(path).read_text())
        return AlignmentResult(
            tuple(d["c_prime"]), d["r_prime"],
            tuple(d["theta_range"]), tuple(d["phi_range"]), d["residual"],
        )


def _start_points(cfg: AlignConfig) -> list[torch.Tensor]:
    """Deterministic coarse grid of (cx, cy, cz, r) starts."""
    c_lo, c_hi = cfg.c_bounds
    r_lo, r_hi = cfg.r_bounds
    starts = []
    rs = torch.linspace(r_lo + 0.2, r_hi - 0.2, 4)
    czs = torch.tensor([c_lo / 2, c_hi / 2])
    for r in rs:
        for cz in czs:
            starts.append(torch.tensor([0.0, 0.0, cz, r.item()]))
    return starts[: cfg.restarts]


def align_cameras(
    source_keypoints: KeypointFn,
    target_keypoints: dict[float, torch.Tensor],
    cfg: AlignConfig | None = None,
) -> AlignmentResult:
    """Minimize summed keypoint loss over (c, r) with multi-start descent.

    target_keypoints maps probe yaw -> detected keypoint set; only yaws in
    cfg.probe_thetas that are present contribute to the loss. Restart
    order never changes the result: ties break by lowest residual, then
    lexicographic (r, c).
    """
    cfg = cfg or AlignConfig()
    probes = [t for t in cfg.probe_thetas if t in target_keypoints]
    if not probes:
        raise ValueError("no usable probe angles in target_keypoints")

    def loss(x: torch.Tensor) -> float:
        c, r = x[:3], x[3].item()
        total = 0.0
        for t in probes:
            total += keypoint_set_loss(source_keypoints(c, r, t), target_keypoints[t])
        return total / len(probes)

    lo = torch.tensor([cfg.c_bounds[0]] * 3 + [cfg.r_bounds[0]])
    hi = torch.tensor([cfg.c_bounds[1]] * 3 + [cfg.r_bounds[1]])

    candidates = []
    for x0 in _start_points(cfg):
        x, val = _coordinate_descent(loss, x0, cfg.initial_step, cfg.min_step, lo, hi)
        candidates.append((val, x[3].item(), x[0].item(), x[1].item(), x[2].item()))
    candidates.sort(key=lambda t: (round(t[0], 9), t[1], t[2], t[3], t[4]))
    val, r, cx, cy, cz = candidates[0]
    if val > cfg.residual_threshold:
        raise NoConvergence(f"residual {val:.3f} px exceeds {cfg.residual_threshold}")
    theta_range, phi_range = safe_pose_ranges()
    return AlignmentResult((cx, cy, cz), r, theta_range, phi_range, val)


def _coordinate_descent(loss, x0, step0, min_step, lo, hi):
    x = x0.clone()
    best = loss(x)
    step = step0
    while step >= min_step:
        improved = False
        for i in range(4):
            for sgn in (1.0, -1.0):
                cand = x.clone()
                cand[i] = min(max(cand[i] + sgn * step, lo[i]), hi[i])
                if torch.equal(cand, x):
                    continue
                v = loss(cand)
                if v < best - 1e-12:
                    x, best = cand, v
                    improved = True
        if not improved:
            step /= 2
    return x, best


# ---- keypoint providers ----

def projected_keypoint_fn(landmarks3d: torch.Tensor, resolution: int) -> KeypointFn:
    """Fast keypoint provider: projects known 3D landmarks (no rendering)."""
    from .scene import project_points

    def fn(c: torch.Tensor, r: float, theta: float) -> torch.Tensor:
        pose = CameraPose(theta, 0.0, r, tuple(c.tolist()))
        return project_points(landmarks3d, pose, resolution)

    return fn


def rendered_keypoint_fn(render_canonical, detector, resolution: int) -> KeypointFn:
    """Keypoint provider that renders the source at (theta, 0, c, r) and detects.

    render_canonical(pose) must return an rgb image [3, H, W].
    """

    def fn(c: torch.Tensor, r: float, theta: float) -> torch.Tensor:
        pose = CameraPose(theta, 0.0, r, tuple(c.tolist()))
        return detector(render_canonical(pose))

    return fn

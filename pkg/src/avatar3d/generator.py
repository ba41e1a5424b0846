"""Toy tri-plane generator.

Style-based mapping + synthesis at desk scale: 8 synthesis layers whose
per-channel activation scales s come from learned affine maps of w, a
learnable domain-level deviation delta_s on those scales, tRGB skip
projections to 3x16-channel planes at 32x32, a small MLP decoder for the
radiance field and a 2x convolutional upsampler.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import CameraPose
from .render import RenderConfig, RenderOutput, render_field

PLANE_CHANNELS = 16
PLANE_RESOLUTION = 32
NUM_LAYERS = 8
FEATURE_WIDTH = 64
W_DIM = 64
Z_DIM = 64
PLANE_EXTENT = 0.35  # world half-size covered by the planes
DENSITY_SCALE = 25.0


class Space(enum.Enum):
    Z = "z"
    W = "w"
    W_PLUS = "w_plus"
    S = "s"


@dataclass
class LatentCode:
    space: Space
    values: torch.Tensor  # W: [w_dim]; W+: [num_layers, w_dim]; S: list-like per layer

    def per_layer(self, num_layers: int) -> torch.Tensor:
        """Broadcast to [num_layers, w_dim]."""
        if self.space == Space.W:
            return self.values.expand(num_layers, -1)
        if self.space == Space.W_PLUS:
            if self.values.shape[0] != num_layers:
                raise ValueError(f"W+ code has {self.values.shape[0]} layers, expected {num_layers}")
            return self.values
        raise ValueError(f"cannot broadcast {self.space} code per layer")


@dataclass
class TriPlane:
    front: torch.Tensor   # [C, H, W]
    side_a: torch.Tensor  # [C, H, W], the xz plane
    side_b: torch.Tensor  # [C, H, W], the zy plane

    def __post_init__(self):
        if not (self.front.shape == self.side_a.shape == self.side_b.shape):
            raise ValueError("tri-plane shapes differ")

    @property
    def channels(self) -> int:
        return self.front.shape[0]

    @property
    def plane_resolution(self) -> int:
        return self.front.shape[-1]


class PlaneSelect(enum.Enum):
    FRONT = "front"
    SIDES = "sides"


def swap_planes(a: TriPlane, b: TriPlane, which: PlaneSelect) -> tuple[TriPlane, TriPlane]:
    """Exchange the named plane(s) between two tri-planes; others untouched."""
    if a.front.shape != b.front.shape:
        raise ValueError("tri-plane shapes differ between a and b")
    if which == PlaneSelect.FRONT:
        return (
            TriPlane(b.front, a.side_a, a.side_b),
            TriPlane(a.front, b.side_a, b.side_b),
        )
    return (
        TriPlane(a.front, b.side_a, b.side_b),
        TriPlane(b.front, a.side_a, a.side_b),
    )


class MappingNetwork(nn.Module):
    def __init__(self, z_dim: int = Z_DIM, w_dim: int = W_DIM, depth: int = 4, hidden: int = 64):
        super().__init__()
        layers: list[nn.Module] = []
        dims = [z_dim] + [hidden] * (depth - 1) + [w_dim]
        for i in range(depth):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < depth - 1:
                layers.append(nn.LeakyReLU(0.2))
        self.net = nn.Sequential(*layers)
        self.register_buffer("w_avg", torch.zeros(w_dim))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        z = z / (z.norm(dim=-1, keepdim=True) / math.sqrt(z.shape[-1]) + 1e-8)
        return self.net(z)


class SynthesisLayer(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, w_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.affine = nn.Linear(w_dim, out_ch)
        nn.init.zeros_(self.affine.weight)
        nn.init.ones_(self.affine.bias)

    def style(self, w: torch.Tensor) -> torch.Tensor:
        """The s activation vector for this layer (scales the kernels)."""
        return self.affine(w)

    def forward(self, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        """x [B, C, H, W], s [B, C]."""
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = F.leaky_relu(self.conv(x), 0.2)
        return x * s[:, :, None, None]


class DeltaS(nn.Module):
    """Domain-level additive deviation on the per-layer s activations."""

    def __init__(self, widths: list[int]):
        super().__init__()
        self.deltas = nn.ParameterList([nn.Parameter(torch.zeros(w)) for w in widths])

    def __len__(self) -> int:
        return len(self.deltas)

    def l1(self) -> torch.Tensor:
        return sum((d.abs().sum() for d in self.deltas), torch.zeros(()))

    def scaled(self, factor: float) -> "DeltaS":
        out = DeltaS([d.shape[0] for d in self.deltas])
        with torch.no_grad():
            for dst, src in zip(out.deltas, self.deltas):
                dst.copy_(src * factor)
        return out


class Decoder(nn.Module):
    """Maps a sampled plane feature vector to (density, rgb)."""

    def __init__(self, in_ch: int = PLANE_CHANNELS, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_ch, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, 4),
        )

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(feats)
        density = F.softplus(out[..., 0]) * DENSITY_SCALE
        rgb = torch.sigmoid(out[..., 1:])
        return density, rgb


class Upsampler(nn.Module):
    """2-layer convolutional 2x upsampler (the toy super-resolution stage)."""

    def __init__(self, hidden: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(3, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 3, 3, padding=1)

    def forward(self, rgb: torch.Tensor) -> torch.Tensor:
        x = rgb if rgb.dim() == 4 else rgb[None]
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = F.leaky_relu(self.conv1(x), 0.2)
        x = torch.sigmoid(self.conv2(x))
        return x if rgb.dim() == 4 else x[0]


@dataclass
class ParamGroups:
    texture: dict[str, nn.Parameter]
    geometry: dict[str, nn.Parameter]
    frozen: dict[str, nn.Parameter]


class Generator(nn.Module):
    """Tri-plane generator with S-space hooks and a learnable delta_s."""

    def __init__(self, delta_s_cutoff: int = NUM_LAYERS // 2):
        super().__init__()
        if not 1 <= delta_s_cutoff <= NUM_LAYERS:
            raise ValueError(f"delta_s_cutoff {delta_s_cutoff} outside [1, {NUM_LAYERS}]")
        self.mapping = MappingNetwork()
        self.const = nn.Parameter(torch.randn(FEATURE_WIDTH, 4, 4) * 0.1)
        ups = [False, False, True, False, True, False, True, False]
        self.layers = nn.ModuleList(
            [SynthesisLayer(FEATURE_WIDTH, FEATURE_WIDTH, W_DIM, up) for up in ups]
        )
        # tRGB projections after each resolution block (layers 1, 3, 5, 7)
        self.trgb_at = (1, 3, 5, 7)
        self.trgb = nn.ModuleList(
            [nn.Conv2d(FEATURE_WIDTH, 3 * PLANE_CHANNELS, 1) for _ in self.trgb_at]
        )
        # The geometry deviation acts on the early (coarse) layers only;
        # the cutoff is configurable.
        self.delta_s_cutoff = delta_s_cutoff
        self.delta_s = DeltaS([FEATURE_WIDTH] * delta_s_cutoff)
        self.decoder = Decoder()
        self.upsampler = Upsampler()
        self._mean_cache: dict[tuple[int, int], torch.Tensor] = {}

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def dtype(self) -> torch.dtype:
        return self.const.dtype

    # ---- latents ----

    def map_latent(self, z: torch.Tensor, truncation: float = 1.0) -> torch.Tensor:
        """z [..., z_dim] -> w [..., w_dim]; truncation pulls toward w_avg."""
        if not torch.isfinite(z).all():
            raise ValueError("non-finite z")
        if not 0.0 <= truncation <= 1.0:
            raise ValueError(f"truncation {truncation} outside [0, 1]")
        w = self.mapping(z)
        return self.mapping.w_avg + truncation * (w - self.mapping.w_avg)

    def update_w_avg(self, n_samples: int = 10000, seed: int = 0) -> None:
        rng = torch.Generator().manual_seed(seed)
        z = torch.randn(n_samples, Z_DIM, generator=rng, dtype=self.dtype)
        with torch.no_grad():
            self.mapping.w_avg.copy_(self.mapping(z).mean(dim=0))
        self._mean_cache.clear()

    def mean_latent(self, n_samples: int = 10000, seed: int = 0) -> torch.Tensor:
        """Empirical mean of mapped w codes; cached per (n, seed)."""
        if n_samples < 1000:
            raise ValueError("n_samples must be >= 1000")
        key = (n_samples, seed)
        if key not in self._mean_cache:
            rng = torch.Generator().manual_seed(seed)
            z = torch.randn(n_samples, Z_DIM, generator=rng, dtype=self.dtype)
            with torch.no_grad():
                self._mean_cache[key] = self.mapping(z).mean(dim=0)
        return self._mean_cache[key].clone()

    # ---- synthesis ----

    def styles(self, w: torch.Tensor) -> list[torch.Tensor]:
        ws = w if w.dim() == 2 else w[None].expand(self.num_layers, -1)
        return [layer.style(ws[i]) for i, layer in enumerate(self.layers)]

    def synthesize_batch(
        self,
        ws: torch.Tensor,
        delta_s: DeltaS | None = None,
        interp: float = 1.0,
    ) -> torch.Tensor:
        """ws [B, w_dim] or [B, num_layers, w_dim] -> plane features [B, 3C, H, W].

        Layer activations are scaled by s + interp * delta_s before the
        tRGB projections; interp=0 reproduces the source generator.
        """
        if not 0.0 <= interp <= 1.0:
            raise ValueError(f"interp {interp} outside [0, 1]")
        if delta_s is None:
            delta_s = self.delta_s
        if len(delta_s) > self.num_layers:
            raise ValueError("delta_s layer count mismatch")
        if ws.dim() == 2:
            ws = ws[:, None, :].expand(-1, self.num_layers, -1)
        b = ws.shape[0]
        x = self.const[None].expand(b, -1, -1, -1)
        planes = None
        ti = 0
        for i, layer in enumerate(self.layers):
            s = layer.style(ws[:, i])
            if i < len(delta_s):
                if delta_s.deltas[i].shape != s.shape[1:]:
                    raise ValueError(f"delta_s width mismatch at layer {i}")
                s = s + interp * delta_s.deltas[i]
            x = layer(x, s)
            if i in self.trgb_at:
                y = self.trgb[ti](x)
                if planes is not None and planes.shape[-1] != y.shape[-1]:
                    planes = F.interpolate(planes, scale_factor=2, mode="bilinear", align_corners=False)
                planes = y if planes is None else planes + y
                ti += 1
        return planes

    def synthesize(
        self, w: torch.Tensor, delta_s: DeltaS | None = None, interp: float = 1.0
    ) -> TriPlane:
        """w [w_dim] or [num_layers, w_dim] -> TriPlane."""
        feats = self.synthesize_batch(w[None], delta_s, interp)[0]
        c = PLANE_CHANNELS
        return TriPlane(feats[:c], feats[c : 2 * c], feats[2 * c :])

    @staticmethod
    def plane_coords(points: torch.Tensor) -> torch.Tensor:
        """World points [..., 3] -> per-plane sample coords [3, ..., 2]."""
        pn = points / PLANE_EXTENT
        x, y, z = pn[..., 0], pn[..., 1], pn[..., 2]
        return torch.stack(
            [
                torch.stack([x, -y], dim=-1),  # front: xy
                torch.stack([x, z], dim=-1),   # side_a: xz
                torch.stack([z, -y], dim=-1),  # side_b: zy
            ]
        )

    def sample_planes(self, planes: TriPlane, points: torch.Tensor) -> torch.Tensor:
        """Bilinear-sample and sum the three planes at world points [N, 3]."""
        stack = torch.stack([planes.front, planes.side_a, planes.side_b])
        coords = self.plane_coords(points.to(stack.dtype))  # [3, N, 2]
        sampled = F.grid_sample(
            stack, coords[:, None], mode="bilinear",
            padding_mode="zeros", align_corners=False,
        )  # [3, C, 1, N]
        return sampled[:, :, 0].sum(dim=0).T  # [N, C]

    def sample_planes_batch(self, plane_feats: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        """plane_feats [B, 3C, H, W], points [B, N, 3] -> features [B, N, C]."""
        b, _, h, w = plane_feats.shape
        n = points.shape[1]
        c = PLANE_CHANNELS
        coords = self.plane_coords(points.to(plane_feats.dtype))  # [3, B, N, 2]
        coords = coords.transpose(0, 1).reshape(b * 3, 1, n, 2)
        stack = plane_feats.reshape(b * 3, c, h, w)
        sampled = F.grid_sample(
            stack, coords, mode="bilinear", padding_mode="zeros", align_corners=False
        )  # [3B, C, 1, N]
        return sampled[:, :, 0].reshape(b, 3, c, n).sum(dim=1).transpose(1, 2)

    def field(self, w: torch.Tensor, delta_s: DeltaS | None = None, interp: float = 1.0):
        planes = self.synthesize(w, delta_s, interp)
        return self.plane_field(planes)

    def plane_field(self, planes: TriPlane):
        def query(points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
            feats = self.sample_planes(planes, points)
            return self.decoder(feats)

        query.dtype = self.dtype
        return query

    def batch_field(self, plane_feats: torch.Tensor):
        """Batched field over [B, 3C, H, W] planes; query takes [B, N, 3]."""

        def query(points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
            feats = self.sample_planes_batch(plane_feats, points)
            return self.decoder(feats)

        query.dtype = self.dtype
        return query

    def forward(self, w, pose: CameraPose, cfg: RenderConfig | None = None, interp: float = 1.0):
        return render(self, w, self.delta_s, pose, cfg or RenderConfig(), interp)

    # ---- parameter partition ----

    def parameter_groups(self) -> ParamGroups:
        texture: dict[str, nn.Parameter] = {}
        geometry: dict[str, nn.Parameter] = {}
        frozen: dict[str, nn.Parameter] = {}
        for name, p in self.named_parameters():
            if name.startswith(("trgb", "decoder", "upsampler")):
                texture[name] = p
            elif name.startswith("delta_s"):
                geometry[name] = p
            else:
                frozen[name] = p
        return ParamGroups(texture, geometry, frozen)


def render(
    g: Generator,
    w,
    delta_s: DeltaS | None,
    pose: CameraPose,
    cfg: RenderConfig | None = None,
    interp: float = 1.0,
) -> RenderOutput:
    """Render one image; deterministic and differentiable."""
    cfg = cfg or RenderConfig()
    if isinstance(w, LatentCode):
        w = w.values
    return render_field(g.field(w, delta_s, interp), pose, cfg)

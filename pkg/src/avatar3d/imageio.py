"""PNG serialization for render outputs.

RGB and alpha are 8-bit; depth is 16-bit with its linear scale recorded
in a JSON sidecar so values round-trip to within quantization.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .render import RenderOutput


def save_rgb(path: str | Path, rgb: torch.Tensor) -> None:
    """rgb [3, H, W] in [0, 1] -> 8-bit PNG."""
    arr = (rgb.detach().clamp(0, 1) * 255).round().to(torch.uint8)
    Image.fromarray(arr.permute(1, 2, 0).numpy(), "RGB").save(path)


def load_rgb(path: str | Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def save_alpha(path: str | Path, alpha: torch.Tensor) -> None:
    """alpha [H, W] in [0, 1] -> 8-bit grayscale PNG."""
    arr = (alpha.detach().clamp(0, 1) * 255).round().to(torch.uint8)
    Image.fromarray(arr.numpy(), "L").save(path)


def load_alpha(path: str | Path) -> torch.Tensor:
    return torch.from_numpy(np.asarray(Image.open(path), dtype=np.float32) / 255.0)


def save_depth(path: str | Path, depth: torch.Tensor) -> None:
    """depth [H, W] -> 16-bit PNG plus <path>.json sidecar with the scale.

    Stored value = (depth - lo) / (hi - lo) * 65535.
    """
    path = Path(path)
    d = depth.detach()
    lo, hi = float(d.min()), float(d.max())
    span = hi - lo if hi > lo else 1.0
    scaled = ((d - lo) / span * 65535).round().clamp(0, 65535).to(torch.int32)
    Image.fromarray(scaled.numpy().astype(np.uint16)).save(path)
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps({"lo": lo, "hi": hi, "encoding": "linear-uint16"})
    )


def load_depth(path: str | Path) -> torch.Tensor:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arr = np.asarray(Image.open(path), dtype=np.float32) / 65535.0
    span = meta["hi"] - meta["lo"] if meta["hi"] > meta["lo"] else 1.0
    return torch.from_numpy(arr) * span + meta["lo"]


def save_render(directory: str | Path, name: str, out: RenderOutput) -> None:
    """Write rgb/depth/alpha as <name>_rgb.png, <name>_depth.png(+json),
    <name>_alpha.png under directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_rgb(directory / f"{name}_rgb.png", out.rgb)
    save_depth(directory / f"{name}_depth.png", out.depth)
    save_alpha(directory / f"{name}_alpha.png", out.alpha)

"""Versioned checkpoint archive.

A single torch.save archive holding named tensors keyed by parameter
group ("texture/...", "geometry/delta_s/...", "frozen/...", optionally
"tps/...") plus a manifest with format version, dimensions and w_avg.
"""

from __future__ import annotations

from pathlib import Path

import torch

FORMAT_VERSION = 1


class UnknownCheckpoint(FileNotFoundError):
    pass


def _group_key(name: str) -> str:
    if name.startswith(("trgb", "decoder", "upsampler")):
        return f"texture/{name}"
    if name.startswith("delta_s"):
        return f"geometry/{name}"
    return f"frozen/{name}"


def save_checkpoint(path, generator, tps=None, extra: dict | None = None) -> None:
    from .generator import NUM_LAYERS, PLANE_CHANNELS, PLANE_RESOLUTION, W_DIM, Z_DIM

    tensors = {}
    for name, p in generator.named_parameters():
        tensors[_group_key(name)] = p.detach().clone()
    for name, b in generator.named_buffers():
        tensors[f"frozen/{name}"] = b.detach().clone()
    if tps is not None:
        for name, p in tps.state_dict().items():
            tensors[f"tps/{name}"] = p.detach().clone()
    manifest = {
        "format_version": FORMAT_VERSION,
        "dimensions": {
            "z_dim": Z_DIM, "w_dim": W_DIM, "num_layers": NUM_LAYERS,
            "plane_channels": PLANE_CHANNELS, "plane_resolution": PLANE_RESOLUTION,
            "delta_s_cutoff": generator.delta_s_cutoff,
        },
        "w_avg": generator.mapping.w_avg.tolist(),
        "has_tps": tps is not None,
    }
    if extra:
        manifest.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"manifest": manifest, "tensors": tensors}, path)


def load_checkpoint(path):
    """Returns (generator, tps_or_none, manifest)."""
    from .generator import Generator
    from .tps import TpsPredictor

    path = Path(path)
    if not path.exists():
        raise UnknownCheckpoint(str(path))
    blob = torch.load(path, weights_only=True)
    manifest = blob["manifest"]
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
    tensors = blob["tensors"]
    dims = manifest.get("dimensions", {})
    g = Generator(delta_s_cutoff=dims.get("delta_s_cutoff", 4))
    state = {}
    for key, value in tensors.items():
        group, _, name = key.partition("/")
        if group == "tps":
            continue
        state[name] = value
    g.load_state_dict(state)
    tps = None
    if manifest.get("has_tps"):
        tps = TpsPredictor()
        tps.load_state_dict({k.partition("/")[2]: v for k, v in tensors.items() if k.startswith("tps/")})
    return g, tps, manifest

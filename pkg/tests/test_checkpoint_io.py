"""Checkpoint and image persistence: roundtrips, format guards, group layout."""

import torch
import pytest

from avatar3d.camera import CameraPose
from avatar3d.checkpoint import (
    FORMAT_VERSION,
    UnknownCheckpoint,
    load_checkpoint,
    save_checkpoint,
)
from avatar3d.generator import Generator
from avatar3d.imageio import (
    load_alpha,
    load_depth,
    load_rgb,
    save_alpha,
    save_depth,
    save_render,
    save_rgb,
)
from avatar3d.render import RenderConfig, RenderOutput
from avatar3d.tps import TpsPredictor


def _randomized_generator(seed=0) -> Generator:
    torch.manual_seed(seed)
    g = Generator()
    with torch.no_grad():
        for d in g.delta_s.deltas:
            d.normal_(std=0.1)
    return g


def test_checkpoint_roundtrip_bitwise(tmp_path):
    g = _randomized_generator()
    p = tmp_path / "g.pt"
    save_checkpoint(p, g)
    g2, tps, manifest = load_checkpoint(p)
    assert tps is None
    assert manifest["format_version"] == FORMAT_VERSION
    for (n1, p1), (n2, p2) in zip(g.named_parameters(), g2.named_parameters()):
        assert n1 == n2
        assert torch.equal(p1, p2)
    for (n1, b1), (n2, b2) in zip(g.named_buffers(), g2.named_buffers()):
        assert n1 == n2
        assert torch.equal(b1, b2)


def test_checkpoint_roundtrip_preserves_renders(tmp_path):
    g = _randomized_generator(1)
    p = tmp_path / "g.pt"
    save_checkpoint(p, g)
    g2, _, _ = load_checkpoint(p)
    pose = CameraPose(0.2, -0.1, 2.7)
    rcfg = RenderConfig(resolution=16, n_steps=16)
    w = g.map_latent(torch.randn(64, generator=torch.Generator().manual_seed(2)))
    with torch.no_grad():
        a = g(w, pose, rcfg)
        b = g2(w, pose, rcfg)
    assert torch.equal(a.rgb, b.rgb)
    assert torch.equal(a.depth, b.depth)


def test_checkpoint_stores_tps_module(tmp_path):
    g = _randomized_generator(2)
    tps = TpsPredictor()
    with torch.no_grad():
        for p in tps.parameters():
            p.normal_(std=0.05)
    path = tmp_path / "g.pt"
    save_checkpoint(path, g, tps=tps)
    _, tps2, manifest = load_checkpoint(path)
    assert manifest["has_tps"]
    for p1, p2 in zip(tps.parameters(), tps2.parameters()):
        assert torch.equal(p1, p2)


def test_checkpoint_group_layout(tmp_path):
    g = _randomized_generator(3)
    path = tmp_path / "g.pt"
    save_checkpoint(path, g, tps=TpsPredictor())
    blob = torch.load(path, weights_only=True)
    groups = {k.partition("/")[0] for k in blob["tensors"]}
    assert groups == {"texture", "geometry", "frozen", "tps"}
    # geometry group holds exactly the delta_s parameters
    geo = sorted(k for k in blob["tensors"] if k.startswith("geometry/"))
    assert geo == sorted(f"geometry/{n}" for n, _ in g.delta_s.named_parameters(prefix="delta_s"))


def test_checkpoint_manifest_records_dimensions(tmp_path):
    g = Generator(delta_s_cutoff=6)
    path = tmp_path / "g.pt"
    save_checkpoint(path, g)
    g2, _, manifest = load_checkpoint(path)
    assert manifest["dimensions"]["delta_s_cutoff"] == 6
    assert len(g2.delta_s) == 6


def test_checkpoint_rejects_unknown_version(tmp_path):
    g = Generator()
    path = tmp_path / "g.pt"
    save_checkpoint(path, g)
    blob = torch.load(path, weights_only=True)
    blob["manifest"]["format_version"] = FORMAT_VERSION + 1
    torch.save(blob, path)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(UnknownCheckpoint):
        load_checkpoint(tmp_path / "missing.pt")


def test_checkpoint_extra_manifest_fields(tmp_path):
    g = Generator()
    path = tmp_path / "g.pt"
    save_checkpoint(path, g, extra={"run_id": "abc", "steps": 42})
    _, _, manifest = load_checkpoint(path)
    assert manifest["run_id"] == "abc" and manifest["steps"] == 42


# ---- image io ----

def test_rgb_roundtrip_within_quantization(tmp_path):
    img = torch.rand(3, 24, 24, generator=torch.Generator().manual_seed(4))
    p = tmp_path / "img.png"
    save_rgb(p, img)
    back = load_rgb(p)
    assert back.shape == img.shape
    assert (back - img).abs().max() <= 1 / 255 + 1e-6


def test_alpha_roundtrip(tmp_path):
    a = torch.rand(16, 16, generator=torch.Generator().manual_seed(5))
    p = tmp_path / "a.png"
    save_alpha(p, a)
    back = load_alpha(p)
    assert (back - a).abs().max() <= 1 / 255 + 1e-6


def test_depth_roundtrip_sixteen_bit(tmp_path):
    d = 2.25 + torch.rand(16, 16, generator=torch.Generator().manual_seed(6)) * 1.05
    p = tmp_path / "d.png"
    save_depth(p, d)
    back = load_depth(p)
    span = float(d.max() - d.min())
    assert (back - d).abs().max() <= span / 65535 + 1e-6


def test_depth_roundtrip_constant_map(tmp_path):
    d = torch.full((8, 8), 3.3)
    p = tmp_path / "d.png"
    save_depth(p, d)
    assert torch.allclose(load_depth(p), d, atol=1e-4)


def test_save_render_writes_three_files(tmp_path):
    out = RenderOutput(
        torch.rand(3, 8, 8), 2.25 + torch.rand(8, 8), torch.rand(8, 8),
        CameraPose(0, 0, 2.7),
    )
    save_render(tmp_path, "probe", out)
    assert (tmp_path / "probe_rgb.png").exists()
    assert (tmp_path / "probe_depth.png").exists()
    assert (tmp_path / "probe_alpha.png").exists()
    assert (load_rgb(tmp_path / "probe_rgb.png") - out.rgb).abs().max() <= 1 / 255 + 1e-6

"""Thin-plate-spline warping: exactness, identity, affine reduction, training API."""

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from avatar3d.camera import CameraPose
from avatar3d.generator import Generator
from avatar3d.render import RenderConfig
from avatar3d.tps import (
    SingularSystem,
    TpsField,
    TpsPredictor,
    TpsRegWeights,
    identity_grid,
    reg_t1,
    reg_t2,
    render_with_tps,
    tps_fit,
    tps_point_map,
    train_tps,
    warp_image,
    warp_plane,
    warp_points,
)


def _rand_points(n, seed=0, scale=0.8):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 2, generator=g) * 2 - 1) * scale


def test_interpolation_exact_at_control_points():
    src = identity_grid(4)
    g = torch.Generator().manual_seed(1)
    dst = src + 0.1 * torch.randn(src.shape, generator=g)
    mapped = tps_point_map(src, dst, src)
    assert (mapped - dst).abs().max() < 1e-4


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), amp=st.floats(0.0, 0.2))
def test_interpolation_exact_for_random_offsets(seed, amp):
    src = identity_grid(3)
    g = torch.Generator().manual_seed(seed)
    dst = src + amp * torch.randn(src.shape, generator=g)
    mapped = tps_point_map(src, dst, src)
    assert (mapped - dst).abs().max() < 1e-4


def test_affine_map_reduces_to_affine_term():
    # dst = A src + b is representable by the affine part alone, so the
    # kernel weights must vanish and off-grid queries follow the affine map.
    src = identity_grid(4)
    a = torch.tensor([[1.1, 0.2], [-0.1, 0.9]])
    b = torch.tensor([0.05, -0.03])
    dst = src @ a.T + b
    weights, affine = tps_fit(src, dst)
    assert weights.abs().max() < 1e-5
    query = _rand_points(50, seed=3)
    mapped = tps_point_map(src, dst, query)
    assert (mapped - (query @ a.T + b)).abs().max() < 1e-4


def test_identity_field_preserves_image():
    g = torch.Generator().manual_seed(2)
    img = torch.rand(16, 32, 32, generator=g)
    field = TpsField(identity_grid(4), torch.zeros(16, 2))
    out = warp_image(img, field)
    assert (out - img).abs().max() < 1e-5


def test_warp_points_matches_point_map():
    field = TpsField(identity_grid(3), 0.05 * torch.ones(9, 2))
    query = _rand_points(20, seed=4)
    expected = tps_point_map(
        field.identity_points, field.identity_points + field.offsets, query
    )
    assert torch.allclose(warp_points(query, field), expected)


def test_warp_moves_content_along_offsets():
    # A bright dot at an identity point should appear near point + offset.
    img = torch.zeros(1, 64, 64)
    pts = identity_grid(3)
    k = 4  # center control point at (0, 0)
    assert pts[k].abs().max() < 1e-6
    img[0, 32, 32] = 1.0
    offset = torch.zeros(9, 2)
    offset[k] = torch.tensor([0.25, 0.0])
    out = warp_image(img, TpsField(pts, offset))
    peak = out[0].flatten().argmax()
    py, px = divmod(int(peak), 64)
    # normalized x = 0.25 -> pixel 32 + 0.25 * 32 = 40
    assert abs(px - 40) <= 1
    assert abs(py - 32) <= 1


def test_warp_gradient_matches_finite_differences():
    torch.manual_seed(5)
    img = torch.rand(2, 16, 16, dtype=torch.float64)
    pts = identity_grid(3).double()
    offsets = (0.03 * torch.randn(9, 2, dtype=torch.float64)).requires_grad_(True)

    def f(off):
        return warp_image(img, TpsField(pts, off)).sum()

    loss = f(offsets)
    (grad,) = torch.autograd.grad(loss, offsets)
    eps = 1e-5
    for idx in [(0, 0), (4, 1), (8, 0)]:
        bump = torch.zeros_like(offsets)
        bump[idx] = eps
        fd = (f(offsets.detach() + bump) - f(offsets.detach() - bump)) / (2 * eps)
        assert abs(fd - grad[idx]) < 1e-3 * max(1.0, abs(fd))


def test_coincident_control_points_raise():
    src = torch.zeros(6, 2)
    dst = torch.rand(6, 2)
    with pytest.raises(SingularSystem):
        w, a = tps_fit(src, dst)
        if not torch.isfinite(w).all() or not torch.isfinite(a).all():
            raise SingularSystem("non-finite")


def test_warp_plane_rejects_out_of_bounds_points():
    pts = identity_grid(3)
    offsets = torch.zeros(9, 2)
    offsets[0] = torch.tensor([-0.5, -0.5])  # pushes a corner past -1
    with pytest.raises(ValueError):
        warp_plane(torch.rand(16, 32, 32), TpsField(pts, offsets))


def test_predictor_starts_as_identity():
    tps = TpsPredictor()
    w = torch.randn(64)
    front = torch.randn(16, 32, 32)
    off = tps(w, front)
    assert off.shape == (64, 2)
    assert off.abs().max() == 0.0


def test_predictor_offsets_bounded():
    tps = TpsPredictor()
    with torch.no_grad():
        for p in tps.parameters():
            p.add_(torch.randn_like(p) * 10)
    off = tps(torch.randn(64), torch.randn(16, 32, 32))
    assert off.abs().max() <= tps.max_offset


def test_fresh_predictor_render_matches_plain_render():
    g = Generator()
    tps = TpsPredictor()
    w = g.map_latent(torch.randn(64, generator=torch.Generator().manual_seed(6)))
    pose = CameraPose(0.1, 0.0, 2.7)
    rcfg = RenderConfig(resolution=16, n_steps=16)
    from avatar3d.generator import render as g_render

    base = g_render(g, w, g.delta_s, pose, rcfg)
    warped = render_with_tps(g, w, tps, pose, rcfg)
    assert (warped.rgb - base.rgb).abs().max() < 1e-4
    assert (warped.depth - base.depth).abs().max() < 1e-4


def test_reg_t1_hand_computed():
    c_i = torch.zeros(4, 2)
    c1 = torch.full((4, 2), 0.1)
    c2 = torch.full((4, 2), -0.1)
    c1s = torch.full((4, 2), 0.2)
    c2s = torch.zeros(4, 2)
    w = TpsRegWeights(alpha=2.0, beta=0.5, sigma=1.5)
    # anchor = 0.8 + 0.8, diversity = 1.6, swapped diversity = 1.6
    expected = 2.0 * 1.6 - 0.5 * 1.6 - 1.5 * 1.6
    assert math.isclose(float(reg_t1(c_i, c1, c2, c1s, c2s, w)), expected, rel_tol=1e-6)


def test_reg_t2_zero_on_identical_images():
    from avatar3d.oracles import SoftSegmentation

    seg = SoftSegmentation()
    img = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(7))
    assert float(reg_t2(img, img, seg)) == 0.0


def test_train_tps_zero_steps_returns_identity_module():
    g = Generator()
    tps = train_tps(g, data=None, steps=0)
    off = tps(torch.randn(64), torch.randn(16, 32, 32))
    assert off.abs().max() == 0.0


def test_train_tps_restores_generator_grads():
    from avatar3d.data import SyntheticSpec, make_source_dataset, make_target_dataset

    g = Generator()
    source = make_source_dataset(SyntheticSpec(n_identities=2, seed=0))
    data = make_target_dataset(source)
    train_tps(g, data, steps=2, batch=2, resolution=16, n_ray_steps=16)
    assert all(p.requires_grad for p in g.parameters())

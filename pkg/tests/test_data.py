import hashlib

import pytest
import torch

from avatar3d.data import (
    PHI_RANGE,
    THETA_RANGE,
    SyntheticSpec,
    load_image_folder,
    make_source_dataset,
    make_target_dataset,
    sample_pose,
    save_dataset,
)
from avatar3d.scene import Palette


@pytest.fixture(scope="module")
def small_source():
    return make_source_dataset(SyntheticSpec(n_identities=6, resolution=32, seed=7))


def _hash(ds):
    h = hashlib.sha256()
    for s in ds.samples:
        h.update(s.image.numpy().tobytes())
    return h.hexdigest()


def test_same_seed_byte_identical(small_source):
    again = make_source_dataset(SyntheticSpec(n_identities=6, resolution=32, seed=7))
    assert _hash(small_source) == _hash(again)


def test_different_seed_differs(small_source):
    other = make_source_dataset(SyntheticSpec(n_identities=6, resolution=32, seed=8))
    assert _hash(small_source) != _hash(other)


def test_source_samples_have_full_labels(small_source):
    for s in small_source.samples:
        assert s.pose is not None and s.depth is not None
        assert s.landmarks.shape == (4, 2)
        assert (s.landmarks >= -2).all() and (s.landmarks <= 34).all()
        assert s.attributes.shape == (4,)


def test_pose_labels_within_safe_ranges(small_source):
    for s in small_source.samples:
        assert THETA_RANGE[0] <= s.pose.theta <= THETA_RANGE[1]
        assert PHI_RANGE[0] <= s.pose.phi <= PHI_RANGE[1]


def test_pose_sampler_covers_ranges():
    rng = torch.Generator().manual_seed(0)
    thetas = [sample_pose(rng).theta for _ in range(500)]
    phis = [sample_pose(rng).phi for _ in range(500)]
    assert min(thetas) < THETA_RANGE[0] + 0.05 and max(thetas) > THETA_RANGE[1] - 0.05
    assert min(phis) < PHI_RANGE[0] + 0.05 and max(phis) > PHI_RANGE[1] - 0.05


def test_target_identity_when_unmodified(small_source):
    tgt = make_target_dataset(small_source, exaggeration=0.0, palette=None)
    for s_src, s_tgt in zip(small_source.samples, tgt.samples):
        assert torch.equal(s_src.image, s_tgt.image)


def test_target_strips_pose_and_depth(small_source):
    tgt = make_target_dataset(small_source, exaggeration=0.6, palette=Palette.stylized(0.5))
    for s in tgt.samples:
        assert s.pose is None and s.depth is None
        assert s.attributes is not None


def test_target_rejects_negative_exaggeration(small_source):
    with pytest.raises(ValueError):
        make_target_dataset(small_source, exaggeration=-0.1)


def test_landmark_displacement_monotone_in_exaggeration(small_source):
    src_lm = small_source.samples[0].landmarks
    prev = -1.0
    for level in (0.0, 0.3, 0.6, 0.9, 1.2):
        tgt = make_target_dataset(small_source, exaggeration=level, seed=2)
        disp = (tgt.samples[0].landmarks - src_lm).norm(dim=-1).mean().item()
        assert disp >= prev - 1e-6, f"displacement not monotone at {level}"
        prev = disp
    assert prev > 0.5  # the largest level visibly moves landmarks


def test_save_and_reload_roundtrip(tmp_path, small_source):
    save_dataset(small_source, tmp_path)
    assert (tmp_path / "meta.jsonl").exists()
    assert (tmp_path / "images" / "000000.png").exists()
    ds, skipped = load_image_folder(tmp_path, resolution=32)
    assert skipped == 0 and len(ds) == 6
    # 8-bit quantization only
    err = (ds.samples[0].image - small_source.samples[0].image).abs().max()
    assert err <= 1.0 / 255 + 1e-6


def test_load_empty_folder(tmp_path):
    ds, skipped = load_image_folder(tmp_path, resolution=32)
    assert len(ds) == 0 and skipped == 0


def test_load_skips_undecodable(tmp_path, small_source):
    save_dataset(small_source, tmp_path)
    (tmp_path / "images" / "000099.png").write_bytes(b"not a png")
    ds, skipped = load_image_folder(tmp_path, resolution=32)
    assert skipped == 1 and len(ds) == 6


def test_load_deterministic_ordering(tmp_path, small_source):
    save_dataset(small_source, tmp_path)
    a, _ = load_image_folder(tmp_path, resolution=32)
    b, _ = load_image_folder(tmp_path, resolution=32)
    for x, y in zip(a.samples, b.samples):
        assert torch.equal(x.image, y.image)


def test_load_resizes_and_crops(tmp_path):
    from PIL import Image
    import numpy as np

    arr = (np.random.rand(48, 96, 3) * 255).astype(np.uint8)
    Image.fromarray(arr).save(tmp_path / "wide.png")
    ds, _ = load_image_folder(tmp_path, resolution=32)
    assert ds.samples[0].image.shape == (3, 32, 32)

"""Command-line interface smoke tests (tiny workloads only)."""

import json

import pytest
import torch
from click.testing import CliRunner

from avatar3d.align import AlignmentResult
from avatar3d.checkpoint import load_checkpoint, save_checkpoint
from avatar3d.cli import main
from avatar3d.data import PHI_RANGE, THETA_RANGE
from avatar3d.generator import Generator


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def source_ckpt(tmp_path):
    torch.manual_seed(0)
    p = tmp_path / "source.pt"
    save_checkpoint(p, Generator())
    return p


@pytest.fixture()
def alignment_json(tmp_path):
    p = tmp_path / "alignment.json"
    AlignmentResult((0.0, 0.0, 0.0), 2.7, tuple(THETA_RANGE), tuple(PHI_RANGE), 0.0).save(p)
    return p


def test_help_lists_all_commands(runner):
    result = runner.invoke(main, ["--help"])
    assert result.exit_code == 0
    for cmd in ("dataset", "pretrain", "align", "adapt", "train-tps",
                "invert", "evaluate", "serve"):
        assert cmd in result.output


def test_dataset_command_writes_samples(runner, tmp_path):
    out = tmp_path / "source"
    result = runner.invoke(main, [
        "dataset", "--out", str(out), "--n-identities", "2", "--resolution", "32",
    ])
    assert result.exit_code == 0, result.output
    assert "wrote" in result.output
    assert len(list(out.glob("images/*.png"))) > 0


def test_dataset_target_domain(runner, tmp_path):
    out = tmp_path / "target"
    result = runner.invoke(main, [
        "dataset", "--out", str(out), "--n-identities", "2", "--resolution", "32",
        "--target",
    ])
    assert result.exit_code == 0, result.output
    assert len(list(out.glob("images/*.png"))) > 0


def test_adapt_command_minimal_run(runner, tmp_path, source_ckpt, alignment_json):
    data_dir = tmp_path / "target"
    runner.invoke(main, ["dataset", "--out", str(data_dir), "--n-identities", "2",
                         "--resolution", "32", "--target"])
    cfg = tmp_path / "adapt.toml"
    cfg.write_text("steps = 2\nbatch = 2\nresolution = 16\nn_ray_steps = 16\n"
                   "weight_depth = 0.0\n")
    out = tmp_path / "adapted.pt"
    result = runner.invoke(main, [
        "adapt", "--source", str(source_ckpt), "--data", str(data_dir),
        "--alignment", str(alignment_json), "--config", str(cfg), "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    assert out.exists()
    run_dir = out.with_suffix("")
    assert (run_dir / "losses.csv").exists()
    assert (run_dir / "samples.png").exists()
    _, _, manifest = load_checkpoint(out)
    assert manifest["baseline"] is False


def test_adapt_rejects_unknown_config_keys(runner, tmp_path, source_ckpt, alignment_json):
    data_dir = tmp_path / "target"
    runner.invoke(main, ["dataset", "--out", str(data_dir), "--n-identities", "2",
                         "--resolution", "32", "--target"])
    cfg = tmp_path / "bad.toml"
    cfg.write_text("learning_rate_typo = 1.0\n")
    result = runner.invoke(main, [
        "adapt", "--source", str(source_ckpt), "--data", str(data_dir),
        "--alignment", str(alignment_json), "--config", str(cfg),
        "--out", str(tmp_path / "x.pt"),
    ])
    assert result.exit_code != 0
    assert "unknown config keys" in result.output


def test_train_tps_command(runner, tmp_path, source_ckpt):
    data_dir = tmp_path / "target"
    runner.invoke(main, ["dataset", "--out", str(data_dir), "--n-identities", "2",
                         "--resolution", "32", "--target"])
    out = tmp_path / "with_tps.pt"
    result = runner.invoke(main, [
        "train-tps", "--ckpt", str(source_ckpt), "--data", str(data_dir),
        "--out", str(out), "--steps", "1",
    ])
    assert result.exit_code == 0, result.output
    _, tps, manifest = load_checkpoint(out)
    assert tps is not None and manifest["has_tps"]


def test_evaluate_command(runner, tmp_path, g_s):
    ckpt = tmp_path / "distilled.pt"
    save_checkpoint(ckpt, g_s)
    out = tmp_path / "report.json"
    result = runner.invoke(main, [
        "evaluate", "--source", str(ckpt), "--target", str(ckpt),
        "--n", "16", "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    doc = json.loads(out.read_text())
    assert {"m_d", "s_d", "rt2", "id_bce", "config_hash"} <= set(doc)


def test_missing_required_option_fails_cleanly(runner):
    result = runner.invoke(main, ["adapt"])
    assert result.exit_code != 0
    assert "Missing option" in result.output

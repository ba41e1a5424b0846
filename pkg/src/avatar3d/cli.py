"""Command-line entry points for the full pipeline.

One subcommand per stage: dataset synthesis, source pretraining, camera
alignment, domain adaptation, deformation training, single-image
projection, evaluation, and the HTTP service.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import click
import tomli
import torch


@click.group()
def main() -> None:
    """Tri-plane avatar domain adaptation toolkit."""


@main.command()
@click.option("--out", type=click.Path(), required=True, help="dataset directory")
@click.option("--n-identities", default=48, show_default=True)
@click.option("--resolution", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--target/--source", default=False, help="emit the stylized 2D target domain")
@click.option("--exaggeration", default=0.6, show_default=True)
def dataset(out, n_identities, resolution, seed, target, exaggeration):
    """Synthesize a source or target dataset to a directory."""
    from .data import SyntheticSpec, make_source_dataset, make_target_dataset, save_dataset

    spec = SyntheticSpec(n_identities=n_identities, resolution=resolution, seed=seed)
    ds = make_source_dataset(spec)
    if target:
        ds = make_target_dataset(ds, exaggeration=exaggeration)
    save_dataset(ds, out)
    click.echo(f"wrote {len(ds)} samples to {out}")


@main.command()
@click.option("--out", type=click.Path(), required=True, help="checkpoint path")
@click.option("--n-identities", default=48, show_default=True)
@click.option("--steps", default=2000, show_default=True)
@click.option("--seed", default=0, show_default=True)
def pretrain(out, n_identities, steps, seed):
    """Distill the toy source generator and save its checkpoint."""
    from .checkpoint import save_checkpoint
    from .data import SyntheticSpec
    from .pretrain import DistillConfig, cached_source_generator

    spec = SyntheticSpec(n_identities=n_identities, seed=seed)
    g = cached_source_generator(spec, DistillConfig(steps=steps, seed=seed), progress=True)
    save_checkpoint(out, g)
    click.echo(f"saved source generator to {out}")


@main.command()
@click.option("--source", type=click.Path(exists=True), required=True, help="source checkpoint")
@click.option("--target2d", type=click.Path(exists=True), required=True,
              help="checkpoint whose mean-latent renders define the target keypoints")
@click.option("--resolution", default=64, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="alignment JSON path")
def align(source, target2d, out, resolution):
    """Estimate the target camera system (lookat offset, radius, ranges)."""
    from .align import AlignConfig, align_cameras, rendered_keypoint_fn
    from .checkpoint import load_checkpoint
    from .oracles import ColorCentroidDetector
    from .render import RenderConfig

    g_s, _, _ = load_checkpoint(source)
    g_2d, _, _ = load_checkpoint(target2d)
    rcfg = RenderConfig(resolution=resolution, n_steps=24)
    detector = ColorCentroidDetector()
    cfg = AlignConfig()

    def render_source(pose):
        with torch.no_grad():
            return g_s(g_s.mapping.w_avg, pose, rcfg).rgb

    # The target generator carries no camera labels; its mean-latent
    # probe renders use the reference camera (lookat origin, the default
    # radius) and the optimizer solves for the source camera matching them.
    from .camera import CameraPose

    target_kps = {}
    with torch.no_grad():
        for yaw in cfg.probe_thetas:
            img = g_2d(g_2d.mapping.w_avg, CameraPose(yaw, 0.0, 2.7), rcfg).rgb
            target_kps[yaw] = detector(img)
    result = align_cameras(
        rendered_keypoint_fn(render_source, detector, resolution), target_kps, cfg
    )
    Path(out).write_text(result.to_json())
    click.echo(f"c'={result.c_prime} r'={result.r_prime:.4f} residual={result.residual:.4f}")


def _load_adapt_config(path: str | None):
    from .adapt import AdaptConfig

    if path is None:
        return AdaptConfig()
    payload = tomli.loads(Path(path).read_text())
    valid = {f.name for f in dataclasses.fields(AdaptConfig)}
    unknown = set(payload) - valid
    if unknown:
        raise click.ClickException(f"unknown config keys: {sorted(unknown)}")
    return AdaptConfig(**payload)


@main.command()
@click.option("--source", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True,
              help="target image directory")
@click.option("--alignment", type=click.Path(exists=True), required=True)
@click.option("--config", type=click.Path(exists=True), default=None,
              help="flat TOML mirroring AdaptConfig")
@click.option("--out", type=click.Path(), required=True)
@click.option("--baseline", is_flag=True, help="no safeguards, all parameters trained")
def adapt(source, data_dir, alignment, config, out, baseline):
    """Adapt the source generator to the target domain."""
    import csv

    from .adapt import make_train_state, train
    from .align import AlignmentResult
    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import load_image_folder

    g_s, _, _ = load_checkpoint(source)
    cfg = _load_adapt_config(config)
    ds, _ = load_image_folder(data_dir, resolution=cfg.resolution * 2)
    state = make_train_state(g_s, AlignmentResult.load(alignment), cfg, baseline=baseline)
    train(state, ds, progress=True)
    save_checkpoint(out, state.generator, extra={"baseline": baseline})
    run_dir = Path(out).with_suffix("")
    run_dir.mkdir(parents=True, exist_ok=True)
    with (run_dir / "losses.csv").open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=sorted({k for row in state.history for k in row}))
        writer.writeheader()
        writer.writerows(state.history)
    _write_sample_grid(state.generator, run_dir / "samples.png", cfg.seed)
    click.echo(f"saved adapted generator to {out}")


def _write_sample_grid(g, path: Path, seed: int, n: int = 4) -> None:
    from .camera import CameraPose
    from .imageio import save_rgb
    from .render import RenderConfig

    rng = torch.Generator().manual_seed(seed)
    rcfg = RenderConfig(resolution=32, n_steps=24)
    with torch.no_grad():
        rows = [g(g.map_latent(torch.randn(64, generator=rng)),
                  CameraPose(0.0, 0.0, 2.7), rcfg).rgb for _ in range(n)]
    save_rgb(path, torch.cat(rows, dim=-1))


@main.command("train-tps")
@click.option("--ckpt", type=click.Path(exists=True), required=True, help="adapted checkpoint")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--steps", default=300, show_default=True)
@click.option("--clip", default=1.0, show_default=True)
def train_tps_cmd(ckpt, data_dir, out, steps, clip):
    """Fit the deformation module on top of a frozen adapted generator."""
    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import load_image_folder
    from .tps import train_tps

    g_t, _, _ = load_checkpoint(ckpt)
    ds, _ = load_image_folder(data_dir, resolution=64)
    tps = train_tps(g_t, ds, clip=clip, steps=steps, progress=True)
    save_checkpoint(out, g_t, tps=tps)
    click.echo(f"saved generator + deformation module to {out}")


@main.command()
@click.option("--image", type=click.Path(exists=True), required=True)
@click.option("--source", type=click.Path(exists=True), required=True)
@click.option("--target", type=click.Path(exists=True), required=True)
@click.option("--alignment", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), required=True, help="avatar JSON path")
@click.option("--steps-source", default=200, show_default=True)
@click.option("--steps-target", default=400, show_default=True)
def invert(image, source, target, alignment, out, steps_source, steps_target):
    """Project a single image into the avatar latent space."""
    from .align import AlignmentResult
    from .camera import CameraPose
    from .checkpoint import load_checkpoint
    from .imageio import load_rgb, save_rgb
    from .invert import ProjectionConfig, project

    g_s, _, _ = load_checkpoint(source)
    g_t, _, _ = load_checkpoint(target)
    pose = (AlignmentResult.load(alignment).canonical_pose()
            if alignment else CameraPose(0.0, 0.0, 2.7))
    cfg = ProjectionConfig(steps_source=steps_source, steps_target=steps_target)
    x = load_rgb(image)
    if x.shape[-1] != cfg.resolution:
        x = torch.nn.functional.interpolate(
            x[None], size=(cfg.resolution, cfg.resolution), mode="bilinear",
            align_corners=False)[0]
    result = project(x, g_s, g_t, pose, cfg)
    out_path = Path(out)
    out_path.write_text(json.dumps({
        "w_source": result.w_source.tolist(),
        "w_target": result.w_target.tolist(),
        "loss_source": min(result.trace_source) if result.trace_source else None,
        "loss_target": min(result.trace_target) if result.trace_target else None,
        "pose": [pose.theta, pose.phi, pose.radius, list(pose.lookat)],
    }, indent=2))
    save_rgb(out_path.with_suffix(".source.png"), result.render_source.rgb)
    save_rgb(out_path.with_suffix(".target.png"), result.render_target.rgb)
    click.echo(f"saved avatar codes to {out}")


@main.command()
@click.option("--source", type=click.Path(exists=True), required=True)
@click.option("--target", type=click.Path(exists=True), required=True)
@click.option("--n", default=256, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="report JSON path")
@click.option("--keypoints/--no-keypoints", default=True,
              help="include landmark statistics (needs detectable renders)")
def evaluate(source, target, n, out, keypoints):
    """Compute the coupled-sample metric report between two generators."""
    from .checkpoint import load_checkpoint
    from .metrics import evaluate as run_evaluate
    from .oracles import AttributeEstimator, ColorCentroidDetector

    g_s, _, _ = load_checkpoint(source)
    g_t, _, _ = load_checkpoint(target)
    report = run_evaluate(g_s, g_t, AttributeEstimator(),
                          detector=ColorCentroidDetector() if keypoints else None, n=n)
    Path(out).write_text(report.to_json())
    click.echo(report.to_json())


@main.command()
@click.option("--checkpoints", type=click.Path(exists=True), required=True,
              help="directory of .pt checkpoints")
@click.option("--run-dir", type=click.Path(), required=True)
@click.option("--alignment", type=click.Path(exists=True), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(checkpoints, run_dir, alignment, host, port):
    """Start the avatar editing HTTP service."""
    import uvicorn

    from .align import AlignmentResult
    from .service import AvatarService, create_app

    al = AlignmentResult.load(alignment) if alignment else None
    service = AvatarService(checkpoints, run_dir, alignment=al)
    uvicorn.run(create_app(service), host=host, port=port)


if __name__ == "__main__":
    main()

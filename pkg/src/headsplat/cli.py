"""Command-line interface.

Every command accepts --config pointing at a TOML or JSON file whose sections
mirror the command path (e.g. [template.gen] or {"eval": {...}}); explicit
flags override config values.  Report-producing commands write machine-
readable JSON (and CSV where applicable) plus matplotlib figures.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import fileio, harness, plots
from .animation import pose_avatar
from .avatar import apply_residuals, init_avatar, upsample_anchors
from .losses import LossWeights
from .optim import estimate_sequence, fit_flame, personalize
from .rasterizer import RenderConfig, head_camera, render
from .template import FlameParams, generate_synthetic_template

try:
    import tomllib  # py311+
except ImportError:  # pragma: no cover
    import tomli as tomllib


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    raw = Path(path).read_bytes()
    if path.endswith(".toml"):
        return tomllib.loads(raw.decode())
    return json.loads(raw)


def _merge_config(ctx: click.Context, section: str) -> dict:
    """Effective params: explicit CLI flags beat config values beat defaults."""
    config = _load_config(ctx.params.get("config"))
    sec: dict = config
    for part in section.split("."):
        sec = sec.get(part, {}) if isinstance(sec, dict) else {}
    out = {}
    for name, value in ctx.params.items():
        if name == "config":
            continue
        source = ctx.get_parameter_source(name)
        if source == click.core.ParameterSource.DEFAULT and name in sec:
            out[name] = sec[name]
        else:
            out[name] = value
    return out


def _render_config(p: dict) -> RenderConfig:
    return RenderConfig(workers=int(p.get("workers", 1)), engine=p.get("engine", "auto"))


def _write_json(obj: dict, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


config_option = click.option("--config", type=click.Path(exists=True), default=None,
                             help="TOML or JSON config file; flags override it.")
workers_option = click.option("--workers", type=int, default=1, show_default=True)
engine_option = click.option("--engine", type=click.Choice(["auto", "numba", "numpy"]),
                             default="auto", show_default=True)


@click.group()
def main() -> None:
    """Animatable Gaussian head avatars: build, fit, render, serve."""


@main.group()
def template() -> None:
    """Head template commands."""


@template.command("gen")
@config_option
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--vertices", "-v", type=int, default=5023, show_default=True)
@click.option("--id-dims", type=int, default=8, show_default=True)
@click.option("--expr-dims", type=int, default=10, show_default=True)
@click.option("--bones", type=int, default=4, show_default=True)
@click.option("--out", "-o", type=click.Path(), required=True)
@click.pass_context
def template_gen(ctx, **_):
    """Generate a synthetic head template (.ght)."""
    p = _merge_config(ctx, "template.gen")
    t = generate_synthetic_template(
        seed=p["seed"], V=p["vertices"], K_id=p["id_dims"], K_expr=p["expr_dims"], B=p["bones"]
    )
    fileio.write_template(t, p["out"])
    click.echo(f"wrote {p['out']} (V={t.num_vertices}, B={t.num_bones}, crc={t.checksum()})")


@main.group()
def avatar() -> None:
    """Canonical avatar commands."""


@avatar.command("init")
@config_option
@click.option("--template", "-t", "template_path", type=click.Path(exists=True), required=True)
@click.option("--count", "-m", type=int, default=None, help="Gaussian count (default: V).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "-o", type=click.Path(), required=True)
@click.pass_context
def avatar_init(ctx, **_):
    """Upsample template anchors and initialize a neutral avatar (.gha)."""
    p = _merge_config(ctx, "avatar.init")
    t = fileio.read_template(p["template_path"])
    count = p["count"] if p["count"] else t.num_vertices
    av = init_avatar(upsample_anchors(t, count, p["seed"]), t)
    fileio.write_avatar(av, p["out"])
    click.echo(f"wrote {p['out']} (M={av.count})")


@avatar.command("upsample")
@config_option
@click.option("--template", "-t", "template_path", type=click.Path(exists=True), required=True)
@click.option("--avatar", "-a", "avatar_path", type=click.Path(exists=True), required=True)
@click.option("--count", "-m", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "-o", type=click.Path(), required=True)
@click.pass_context
def avatar_upsample(ctx, **_):
    """Re-anchor an avatar at a higher Gaussian count, inheriting appearance
    from the nearest existing Gaussian."""
    from scipy.spatial import cKDTree

    p = _merge_config(ctx, "avatar.upsample")
    t = fileio.read_template(p["template_path"])
    old = fileio.read_avatar(p["avatar_path"])
    if old.template_crc != t.checksum():
        raise click.ClickException("avatar was not built from this template")
    dense = init_avatar(upsample_anchors(t, p["count"], p["seed"]), t)
    _, nearest = cKDTree(old.anchors).query(dense.anchors)
    import dataclasses

    av = dataclasses.replace(
        dense,
        offsets=old.offsets[nearest],
        rotations=old.rotations[nearest],
        opacity_logits=old.opacity_logits[nearest],
        colors=old.colors[nearest],
    )
    fileio.write_avatar(av, p["out"])
    click.echo(f"wrote {p['out']} (M={av.count}, from M={old.count})")


@main.group()
def dataset() -> None:
    """Dataset commands."""


@dataset.command("synth")
@config_option
@click.option("--template", "-t", "template_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--frames", "-n", type=int, default=16, show_default=True)
@click.option("--size", type=int, default=128, show_default=True)
@click.option("--count", "-m", type=int, default=None, help="subject Gaussian count")
@click.option("--out", "-o", type=click.Path(), required=True)
@workers_option
@engine_option
@click.pass_context
def dataset_synth(ctx, **_):
    """Render a synthetic subject dataset with ground-truth sidecars."""
    p = _merge_config(ctx, "dataset.synth")
    t = fileio.read_template(p["template_path"])
    cam = head_camera(p["size"], p["size"])
    ds = harness.make_synthetic_subject(
        t, p["seed"], p["frames"], cam, p["out"], target_m=p["count"], config=_render_config(p)
    )
    click.echo(f"wrote {len(ds)} frames to {p['out']}")


def _load_params_file(path: str, template) -> list[FlameParams]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [harness.params_from_json(d) for d in data]


@main.command("render")
@config_option
@click.option("--template", "-t", "template_path", type=click.Path(exists=True), required=True)
@click.option("--avatar", "-a", "avatar_path", type=click.Path(exists=True), required=True)
@click.option("--params", "params_path", type=click.Path(exists=True), default=None,
              help="JSON driving parameters (default: rest pose).")
@click.option("--size", type=int, default=504, show_default=True)
@click.option("--out", "-o", type=click.Path(), required=True)
@click.option("--raw-out", type=click.Path(), default=None,
              help="also dump 8-bit RGBA bytes (width*height*4, row-major)")
@click.option("--f32-out", type=click.Path(), default=None, help="also dump float RGBA as .f32")
@workers_option
@engine_option
@click.pass_context
def render_cmd(ctx, **_):
    """Render one frame to PNG."""
    p = _merge_config(ctx, "render")
    t = fileio.read_template(p["template_path"])
    av = fileio.read_avatar(p["avatar_path"])
    params = (
        _load_params_file(p["params_path"], t)[0]
        if p["params_path"]
        else FlameParams(
            expression=np.zeros(t.num_expression),
            articulation=np.zeros((t.num_bones - 1, 3)),
            head_translation=np.array([0.0, 0.0, -1.0]),
        )
    )
    cam = head_camera(p["size"], p["size"])
    frame = render(pose_avatar(av, t, params), cam, _render_config(p))
    fileio.save_png(frame.rgb, frame.alpha, p["out"])
    if p["raw_out"]:
        Path(p["raw_out"]).write_bytes(fileio.rgba_to_bytes(frame.rgb, frame.alpha).tobytes())
    if p["f32_out"]:
        fileio.write_f32(np.dstack([frame.rgb, frame.alpha[:, :, None]]), p["f32_out"])
    click.echo(f"wrote {p['out']}")


@main.command("animate")
@config_option
@click.option("--template", "-t", "template_path", type=click.Path(exists=True), required=True)
@click.option("--avatar", "-a", "avatar_path", type=click.Path(exists=True), required=True)
@click.option("--params", "params_path", type=click.Path(exists=True), default=None,
              help="JSON list of driving parameters (default: synthetic trajectory)")
@click.option("--frames", "-n", type=int, default=24, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--size", type=int, default=504, show_default=True)
@click.option("--out", "-o", type=click.Path(), required=True, help="output directory")
@workers_option
@engine_option
@click.pass_context
def animate(ctx, **_):
    """Pose and render a parameter sequence; reports achieved FPS."""
    p = _merge_config(ctx, "animate")
    t = fileio.read_template(p["template_path"])
    av = fileio.read_avatar(p["avatar_path"])
    cfg = _render_config(p)
    traj = (
        _load_params_file(p["params_path"], t)
        if p["params_path"]
        else harness.smooth_trajectory(t, p["frames"], p["seed"])
    )
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    cam = head_camera(p["size"], p["size"])
    t0 = time.perf_counter()
    for i, params in enumerate(traj):
        frame = render(pose_avatar(av, t, params), cam, cfg)
        fileio.save_png(frame.rgb, frame.alpha, out / f"anim_{i:04d}.png")
    elapsed = time.perf_counter() - t0
    fps = len(traj) / elapsed
    _write_json({"frames": len(traj), "seconds": elapsed, "fps": fps}, out / "animate.json")
    click.echo(f"rendered {len(traj)} frames at {fps:.1f} FPS -> {out}")


@main.command("fit")
@config_option
@click.option("--template", "-t", "template_path", type=click.Path(exists=True), required=True)
@click.option("--avatar", "-a", "avatar_path", type=click.Path(exists=True), required=True)
@click.option("--dataset", "-d", "dataset_path", type=click.Path(exists=True), required=True)
@click.option("--frame", type=int, default=0, show_default=True)
@click.option("--steps", type=int, default=300, show_default=True)
@click.option("--lr", type=float, default=0.008, show_default=True)
@click.option("--out", "-o", type=click.Path(), required=True, help="output directory")
@workers_option
@engine_option
@click.pass_context
def fit(ctx, **_):
    """Recover one frame's driving parameters photometrically."""
    p = _merge_config(ctx, "fit")
    t = fileio.read_template(p["template_path"])
    av = fileio.read_avatar(p["avatar_path"])
    ds = harness.load_dataset(p["dataset_path"])
    idx = p["frame"]
    target, _ = ds.load_image(idx)
    gt = ds.frames[idx].params
    fitted, report = fit_flame(
        av, t, target, ds.camera_for(idx), FlameParams.viewing(t),
        steps=p["steps"], lr=p["lr"], config=_render_config(p), ground_truth=gt,
    )
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(harness._params_to_json(fitted), out / "fitted_params.json")
    _write_json(report.to_dict(), out / "fit_report.json")
    plots.loss_curve(report.losses, out / "fit_loss.png", "parameter fit loss")
    msg = f"fit frame {idx}: loss {report.losses[0]:.4f} -> {report.losses[-1]:.4f}"
    if report.rmse:
        msg += f", head rotation RMSE {report.rmse['head_rotation']:.4f} rad"
    click.echo(msg + f" -> {out}")


@main.command("personalize")
@config_option
@click.option("--template", "-t", "template_path", type=click.Path(exists=True), required=True)
@click.option("--avatar", "-a", "avatar_path", type=click.Path(exists=True), required=True)
@click.option("--dataset", "-d", "dataset_path", type=click.Path(exists=True), required=True)
@click.option("--views", type=str, default=None,
              help="comma-separated conditioning frame indices (default: split)")
@click.option("--split-s", type=int, default=4, show_default=True)
@click.option("--split-seed", type=int, default=0, show_default=True)
@click.option("--steps", type=int, default=500, show_default=True)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--out", "-o", type=click.Path(), required=True, help="output directory")
@workers_option
@engine_option
@click.pass_context
def personalize_cmd(ctx, **_):
    """Optimize per-subject residuals on conditioning views."""
    p = _merge_config(ctx, "personalize")
    t = fileio.read_template(p["template_path"])
    av = fileio.read_avatar(p["avatar_path"])
    ds = harness.load_dataset(p["dataset_path"])
    if p["views"]:
        indices = [int(v) for v in p["views"].split(",")]
    else:
        from .losses import few_to_many_split

        indices = list(few_to_many_split(len(ds), p["split_s"], len(ds) - p["split_s"], p["split_seed"])[0])
    frames = []
    for i in indices:
        if ds.frames[i].params is None:
            raise click.ClickException(f"frame {i} has no ground-truth params; fit first")
        rgb, _ = ds.load_image(i)
        frames.append((rgb, ds.frames[i].params, ds.camera_for(i)))
    delta, report = personalize(
        av, t, frames, steps=p["steps"], lr=p["lr"], config=_render_config(p)
    )
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_residuals(delta, out / "residuals.ghr")
    fileio.write_avatar(apply_residuals(av, delta), out / "personalized.gha")
    _write_json(report.to_dict(), out / "personalize_report.json")
    plots.loss_curve(report.losses, out / "personalize_loss.png", "personalization loss")
    click.echo(
        f"personalized on views {indices}: loss {report.losses[0]:.4f} -> {report.losses[-1]:.4f} -> {out}"
    )


@main.command("eval")
@config_option
@click.option("--template", "-t", "template_path", type=click.Path(exists=True), required=True)
@click.option("--avatar", "-a", "avatar_path", type=click.Path(exists=True), required=True)
@click.option("--dataset", "-d", "dataset_path", type=click.Path(exists=True), required=True)
@click.option("--s", "-s", "split_s", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "-o", type=click.Path(), required=True, help="output directory")
@workers_option
@engine_option
@click.pass_context
def eval_cmd(ctx, **_):
    """Few-to-many evaluation: PSNR/SSIM per reconstruction frame + means."""
    p = _merge_config(ctx, "eval")
    t = fileio.read_template(p["template_path"])
    av = fileio.read_avatar(p["avatar_path"])
    ds = harness.load_dataset(p["dataset_path"])
    report = harness.evaluate(
        ds, av, t, S=p["split_s"], seed=p["seed"], out_dir=p["out"], config=_render_config(p)
    )
    click.echo(f"mean PSNR {report.mean_psnr:.2f} dB, mean SSIM {report.mean_ssim:.4f} -> {p['out']}")


@main.command("bench")
@config_option
@click.option("--template", "-t", "template_path", type=click.Path(exists=True), required=True)
@click.option("--avatar", "-a", "avatar_path", type=click.Path(exists=True), required=True)
@click.option("--frames", "-n", type=int, default=20, show_default=True)
@click.option("--size", type=int, default=504, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "-o", type=click.Path(), required=True, help="output directory")
@workers_option
@engine_option
@click.pass_context
def bench(ctx, **_):
    """Time pose and render stages over random driving parameters."""
    p = _merge_config(ctx, "bench")
    t = fileio.read_template(p["template_path"])
    av = fileio.read_avatar(p["avatar_path"])
    cam = head_camera(p["size"], p["size"])
    report = harness.bench_animate(
        av, t, cam, n_frames=p["frames"], seed=p["seed"], config=_render_config(p), out_dir=p["out"]
    )
    s = report.summary()
    click.echo(
        f"M={s['gaussians']} @ {p['size']}x{p['size']}: pose {s['pose_ms_mean']:.2f} ms, "
        f"render {s['render_ms_mean']:.1f} ms, {s['fps_mean']:.2f} FPS -> {p['out']}"
    )


@main.command("serve")
@config_option
@click.option("--template", "-t", "template_path", type=click.Path(exists=True), required=True)
@click.option("--avatar", "-a", "avatar_path", type=click.Path(exists=True), required=True)
@click.option("--bind", type=str, default="127.0.0.1:8787", show_default=True)
@workers_option
@engine_option
@click.pass_context
def serve_cmd(ctx, **_):
    """Run the interactive posing WebSocket service."""
    p = _merge_config(ctx, "serve")
    from .serve import serve

    serve(p["avatar_path"], p["template_path"], p["bind"], _render_config(p))


if __name__ == "__main__":
    main(sys.argv[1:])

"""Command-line surface: train / render / animate / relight / bench /
gradcheck / export-ply / synth.

Exit codes: 0 success, 1 runtime error, 2 usage error.  Every command is
deterministic under --seed.
"""

from __future__ import annotations

import os
import sys
import time

import click
import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from . import appearance as ap
from . import dataset as ds
from . import geometry as geo
from . import losses as ls
from . import relight as rl
from . import renderer as rd
from . import rig as rg
from . import train as tr
from .camera import Camera, load_camera, look_at
from .model import HandSplatModel


@click.group()
def cli():
    """Deformable point-splat hand renderer."""


def _load_model(checkpoint, config_path=None, template=None):
    """Rebuild a model around a checkpoint.

    Hyperparameters come from the YAML config written at training time
    (default: config.yaml next to the checkpoint); the rig is the built-in
    toy rig unless a template NPZ is given.
    """
    if config_path is None:
        sibling = os.path.join(os.path.dirname(os.path.abspath(checkpoint)),
                               "config.yaml")
        config_path = sibling if os.path.exists(sibling) else None
    if config_path is not None:
        cfg, _ = tr.load_config(config_path)
    else:
        cfg = tr.TrainConfig()
    rig = rg.load_template_npz(template) if template else rg.build_toy_rig()
    model = HandSplatModel(rig, hidden=cfg.hidden, d_cross=cfg.d_cross,
                           sdf_hidden=cfg.sdf_hidden, sdf_depth=cfg.sdf_depth,
                           seed=cfg.seed, use_shading=cfg.use_shading)
    model.load(checkpoint)
    return model


def _rgba_to_image(rgba):
    vals = rgba.values if hasattr(rgba, "values") else np.asarray(rgba)
    return vals[..., :3]


_model_options = [
    click.option("--config", "config_path", type=click.Path(exists=True),
                 default=None, help="training config YAML (default: config.yaml "
                 "next to the checkpoint)"),
    click.option("--template", type=click.Path(exists=True), default=None,
                 help="template rig NPZ (default: built-in toy rig)"),
]


def _with_model_options(f):
    for opt in reversed(_model_options):
        f = opt(f)
    return f


@cli.command()
@click.option("--out", required=True, type=click.Path(), help="dataset directory")
@click.option("--frames", default=20, show_default=True)
@click.option("--views", default=4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--resolution", default=128, show_default=True)
def synth(out, frames, views, seed, resolution):
    """Generate a synthetic multi-view dataset of the toy rig."""
    manifest = ds.generate_synthetic_dataset(out, n_frames=frames, n_views=views,
                                             seed=seed, resolution=resolution)
    click.echo(manifest)


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True),
              help="dataset manifest YAML")
@click.option("--out", required=True, type=click.Path(), help="output directory")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="training config YAML (defaults used otherwise)")
@click.option("--epochs", type=int, default=None, help="override epoch count")
@click.option("--seed", type=int, default=None, help="override RNG seed")
@click.option("--learning-rate", type=float, default=None, help="override LR")
@click.option("--template", type=click.Path(exists=True), default=None,
              help="template rig NPZ (default: built-in toy rig)")
def train(data, out, config_path, epochs, seed, learning_rate, template):
    """Optimize geometry and appearance against a dataset."""
    if config_path is not None:
        cfg, weights = tr.load_config(config_path)
    else:
        cfg, weights = tr.TrainConfig(), None
    if epochs is not None:
        cfg.epochs = epochs
        cfg.geometry_freeze_epoch = min(cfg.geometry_freeze_epoch, epochs)
    if seed is not None:
        cfg.seed = seed
    if learning_rate is not None:
        cfg.learning_rate = learning_rate
    samples = ds.load_dataset(data)
    rig = rg.load_template_npz(template) if template else rg.build_toy_rig()
    os.makedirs(out, exist_ok=True)
    weights = weights or ls.LossWeights()
    tr.save_config(os.path.join(out, "config.yaml"), cfg, weights)
    res = tr.train(samples, cfg, weights=weights, out_dir=out, rig=rig)
    if res.rows:
        last = res.rows[-1]
        line = "epoch %s  loss %.5f" % (last["epoch"], last["loss"])
        if last.get("psnr") != "":
            line += "  psnr %.2f  ssim %.4f  iou %.4f" % (
                last["psnr"], last["ssim"], last["iou"])
        click.echo(line)
    click.echo(res.checkpoint_path)


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--pose", "pose_path", required=True, type=click.Path(exists=True))
@click.option("--camera", "camera_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_with_model_options
def render(checkpoint, pose_path, camera_path, out, config_path, template):
    """Render one posed frame from a checkpoint to a PNG."""
    model = _load_model(checkpoint, config_path, template)
    pose = ds.load_pose(pose_path)
    cam = load_camera(camera_path)
    rgba = model.render_frame(pose, cam)
    ds.save_image(out, _rgba_to_image(rgba))
    click.echo(out)


def _interpolate_pose(a, b, s):
    """Pose between a (s=0) and b (s=1): lerp angles/shape/translation,
    slerp the global rotation."""
    slerp = Slerp([0.0, 1.0], Rotation.from_matrix(
        np.stack([a.global_rotation, b.global_rotation])))
    return rg.PoseParams(
        theta=(1 - s) * a.theta + s * b.theta,
        phi=(1 - s) * a.phi + s * b.phi,
        global_rotation=slerp(s).as_matrix(),
        global_translation=(1 - s) * a.global_translation + s * b.global_translation)


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--pose-a", required=True, type=click.Path(exists=True))
@click.option("--pose-b", required=True, type=click.Path(exists=True))
@click.option("--camera", "camera_path", required=True, type=click.Path(exists=True))
@click.option("--frames", default=8, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="output directory")
@_with_model_options
def animate(checkpoint, pose_a, pose_b, camera_path, frames, out, config_path,
            template):
    """Write a frame sequence interpolating between two poses."""
    if frames < 2:
        raise click.UsageError("--frames must be >= 2")
    model = _load_model(checkpoint, config_path, template)
    pa, pb = ds.load_pose(pose_a), ds.load_pose(pose_b)
    cam = load_camera(camera_path)
    os.makedirs(out, exist_ok=True)
    for i, s in enumerate(np.linspace(0.0, 1.0, frames)):
        rgba = model.render_frame(_interpolate_pose(pa, pb, float(s)), cam)
        ds.save_image(os.path.join(out, f"frame_{i:03d}.png"), _rgba_to_image(rgba))
    click.echo(out)


def relight_frame(model, pose, cam, light, shadows=False):
    """One relit render: Phong-scale the composed point colors by the posed
    point normals, then splat.  Ambient-only lights reproduce the plain
    render bitwise."""
    transforms = rg.forward_kinematics(model.rig, pose)
    deformed = rg.deform_points(model.points.coords, model.rig_data,
                                transforms, pose).values
    jinv, _ = rg.deformation_jacobian_inverse(model.rig_data, transforms)
    n = np.einsum("ik,ikc->ic", model.canonical_normals(), jinv)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    base = model.point_colors(transforms).values
    view_dir = -cam.rotation[2]  # from the surface toward the camera
    shadow = None
    if shadows:
        mesh = rl.approximate_mesh(model.points.coords.values, deformed,
                                   model.rig.vertices, model.rig.faces)
        vertex_shadow = rl.self_shadow(mesh, light)
        shadow = vertex_shadow[model.rig_data.nearest_template_index]
    colors = rl.phong_point_colors(n, light, view_dir, base, shadow)
    rgba = rd.render(deformed, colors, model.points.radius, cam)
    return _rgba_to_image(rgba)


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--pose", "pose_path", required=True, type=click.Path(exists=True))
@click.option("--camera", "camera_path", required=True, type=click.Path(exists=True))
@click.option("--frames", default=8, show_default=True,
              help="number of light directions in the sweep")
@click.option("--ambient", default=0.3, show_default=True)
@click.option("--diffuse", default=0.7, show_default=True)
@click.option("--specular", default=0.1, show_default=True)
@click.option("--shininess", default=16.0, show_default=True)
@click.option("--shadows/--no-shadows", default=False, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="output directory")
@_with_model_options
def relight(checkpoint, pose_path, camera_path, frames, ambient, diffuse,
            specular, shininess, shadows, out, config_path, template):
    """Sweep a directional light horizontally and write one PNG per step."""
    model = _load_model(checkpoint, config_path, template)
    pose = ds.load_pose(pose_path)
    cam = load_camera(camera_path)
    os.makedirs(out, exist_ok=True)
    for i, az in enumerate(np.linspace(-80.0, 80.0, frames)):
        a = np.deg2rad(az)
        # horizontal sweep in camera space, tilted slightly toward the camera
        d_cam = np.array([np.sin(a), 0.0, -np.cos(a)])
        d_world = cam.rotation.T @ d_cam
        light = rl.PhongLight(d_world / np.linalg.norm(d_world), k_a=ambient,
                              k_d=diffuse, k_s=specular, shininess=shininess)
        img = relight_frame(model, pose, cam, light, shadows=shadows)
        ds.save_image(os.path.join(out, f"light_{i:03d}.png"), img)
    click.echo(out)


def bench_run(n_points, resolution, seed=0, trials=5):
    """Median forward-render wall time (ms) for a random in-view cloud."""
    rng = np.random.default_rng(seed)
    rot, t = look_at(np.array([0.0, 0.0, -2.5]), np.zeros(3),
                     np.array([0.0, 1.0, 0.0]))
    f = 1.2 * resolution
    cam = Camera(fx=f, fy=f, cx=resolution / 2, cy=resolution / 2,
                 width=resolution, height=resolution, rotation=rot, translation=t)
    points = rng.uniform(-0.6, 0.6, size=(n_points, 3))
    colors = rng.uniform(size=(n_points, 3))
    radius = 0.01
    rd.render(points, colors, radius, cam)  # warm-up (JIT compilation)
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        rd.render(points, colors, radius, cam)
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


@cli.command()
@click.option("--points", "n_points", default=100000, show_default=True)
@click.option("--res", "resolution", default=256, show_default=True)
@click.option("--threads", default=None, type=int,
              help="numba thread count (default: leave unchanged)")
@click.option("--seed", default=0, show_default=True)
@click.option("--trials", default=5, show_default=True)
@click.option("--out", default=None, type=click.Path(), help="append CSV row here")
def bench(n_points, resolution, threads, seed, trials, out):
    """Report forward-render ms/frame for a random point cloud."""
    import numba
    if threads is not None:
        numba.set_num_threads(threads)
    ms = bench_run(n_points, resolution, seed=seed, trials=trials)
    row = "%d,%d,%d,%.3f" % (n_points, resolution, numba.get_num_threads(), ms)
    header = "points,resolution,threads,ms_per_frame"
    click.echo(header)
    click.echo(row)
    if out:
        new = not os.path.exists(out)
        with open(out, "a") as fh:
            if new:
                fh.write(header + "\n")
            fh.write(row + "\n")


@cli.command()
@click.option("--seed", default=0, show_default=True)
def gradcheck(seed):
    """Run every finite-difference suite; exit 0 iff all are under threshold."""
    from . import gradcheck as gc
    results = gc.run_all(seed)
    ok = True
    for name, (err, tol, _) in results.items():
        passed = err < tol
        ok &= passed
        click.echo("%-12s max_err %.3e  threshold %.0e  %s" % (
            name, err, tol, "PASS" if passed else "FAIL"))
    if not ok:
        raise click.ClickException("gradient check failed")


@cli.command("export-ply")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_with_model_options
def export_ply(checkpoint, out, config_path, template):
    """Dump the canonical point cloud (positions, normals, albedo) to PLY."""
    model = _load_model(checkpoint, config_path, template)
    albedo = ap.albedo_forward(model.albedo, model.points.coords,
                               model.rig.vertices).values
    geo.export_ply(out, model.points, normals=model.canonical_normals(),
                   colors=albedo)
    click.echo(out)


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:  # --help and friends
        return exc.exit_code
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 2
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure -> exit 1 with message
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

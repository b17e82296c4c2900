"""Dataset I/O and synthetic fixture generation.

A dataset is a YAML manifest listing per-frame records (image, mask, camera,
pose, split tag) relative to a root directory.  Pose files are flat text:

    theta x y z        (one line per joint, N_j lines)
    phi f0 ... f9
    R r00 r01 r02      (three lines, global rotation)
    t tx ty tz

The synthetic generator renders the procedural toy rig with the package's
own splat renderer (generation-0 points, per-vertex color pattern, one
directional light baked per pose) so the data is exactly representable by
the model family being trained.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import yaml
from PIL import Image

from . import camera as cm
from . import geometry as geo
from . import renderer as rd
from . import rig as rg


@dataclass
class FrameSample:
    image: np.ndarray   # (H, W, 3) in [0, 1]
    mask: np.ndarray    # (H, W) in {0, 1}
    camera: cm.Camera
    pose: rg.PoseParams
    split: str = "train"
    name: str = ""


# ------------------------------------------------------------------ images

def save_image(path, image):
    """Clamp to [0, 1] and write an 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def load_image(path):
    return np.asarray(Image.open(path), dtype=np.float64)[..., :3] / 255.0


def save_mask(path, mask):
    Image.fromarray((np.asarray(mask) >= 0.5).astype(np.uint8) * 255).save(path)


def load_mask(path):
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
    return (arr >= 0.5).astype(np.float64)


def save_raster(path, image):
    """Lossless float dump of a raster for metric computation."""
    np.save(path, np.asarray(image, dtype=np.float32))


# ------------------------------------------------------------------ poses

def save_pose(path, pose):
    theta = np.asarray(pose.theta, dtype=float)
    with open(path, "w") as f:
        for row in theta:
            f.write("theta " + " ".join(repr(float(v)) for v in row) + "\n")
        f.write("phi " + " ".join(repr(float(v)) for v in np.asarray(pose.phi)) + "\n")
        for row in np.asarray(pose.global_rotation, dtype=float):
            f.write("R " + " ".join(repr(float(v)) for v in row) + "\n")
        f.write("t " + " ".join(repr(float(v))
                                for v in np.asarray(pose.global_translation)) + "\n")


def load_pose(path):
    theta, rot, phi, trans = [], [], None, None
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            vals = [float(v) for v in parts[1:]]
            if parts[0] == "theta":
                theta.append(vals)
            elif parts[0] == "phi":
                phi = vals
            elif parts[0] == "R":
                rot.append(vals)
            elif parts[0] == "t":
                trans = vals
    if not theta or phi is None or len(rot) != 3 or trans is None:
        raise ValueError(f"pose file {path} is incomplete")
    return rg.PoseParams(theta=np.array(theta), phi=np.array(phi),
                         global_rotation=np.array(rot),
                         global_translation=np.array(trans))


# ------------------------------------------------------------------ manifest

def load_dataset(manifest_path):
    """Read a manifest into FrameSamples; errors name the offending frame."""
    with open(manifest_path) as f:
        manifest = yaml.safe_load(f)
    root = os.path.join(os.path.dirname(os.path.abspath(manifest_path)),
                        manifest.get("root", "."))
    samples = []
    resolutions = {}
    for i, rec in enumerate(manifest.get("frames", [])):
        parts = {}
        for kind in ("image", "mask", "camera", "pose"):
            if kind not in rec:
                raise ValueError(f"frame {i}: manifest record missing '{kind}'")
            path = os.path.join(root, rec[kind])
            if not os.path.exists(path):
                raise ValueError(f"frame {i}: {kind} not found: {path}")
            parts[kind] = path
        try:
            sample = FrameSample(
                image=load_image(parts["image"]), mask=load_mask(parts["mask"]),
                camera=cm.load_camera(parts["camera"]), pose=load_pose(parts["pose"]),
                split=rec.get("split", "train"), name=rec.get("name", f"frame{i}"))
        except Exception as exc:
            raise ValueError(f"frame {i}: failed to load: {exc}") from exc
        h, w = sample.image.shape[:2]
        if sample.mask.shape != (h, w) or (sample.camera.height, sample.camera.width) != (h, w):
            raise ValueError(f"frame {i}: image/mask/camera resolutions disagree")
        if resolutions.setdefault(sample.split, (h, w)) != (h, w):
            raise ValueError(f"frame {i}: resolution mismatch within split '{sample.split}'")
        samples.append(sample)
    if not samples:
        raise ValueError(f"{manifest_path}: dataset is empty")
    return samples


# ------------------------------------------------------------------ synthesis

LIGHT_DIR = np.array([0.3, -0.4, -0.85])
COLOR_FREQS = np.array([[41.0, 13.0, 7.0], [9.0, 47.0, 17.0], [19.0, 11.0, 43.0]])
COLOR_PHASES = np.array([0.0, 2.1, 4.2])


def procedural_albedo(coords):
    """Smooth per-point color pattern in [0.1, 0.9], fixed for all poses."""
    phase = coords @ COLOR_FREQS.T + COLOR_PHASES
    return 0.5 + 0.4 * np.sin(phase)


def _sample_pose(rig, rng):
    theta = np.zeros((rig.num_bones, 3))
    theta[1:, 0] = rng.uniform(-0.15, 0.55, size=rig.num_bones - 1)  # bend
    theta[1:, 2] = rng.uniform(-0.1, 0.1, size=rig.num_bones - 1)   # splay
    phi = rng.uniform(-1.0, 1.0, size=10)
    return rg.PoseParams(theta=theta, phi=phi)


def _view_camera(center, azimuth_deg, resolution, distance=0.45, focal_scale=1.5):
    az = np.deg2rad(azimuth_deg)
    eye = center + distance * np.array([np.sin(az), 0.25, -np.cos(az)])
    rot, t = cm.look_at(eye, center, up=(0.0, 1.0, 0.0))
    f = focal_scale * resolution
    return cm.Camera(f, f, resolution / 2.0, resolution / 2.0, rot, t,
                     resolution, resolution)


def generate_synthetic_dataset(out_dir, rig_config=None, n_frames=20, n_views=4,
                               seed=0, resolution=128, val_views=(3,),
                               camera_distance=0.45, focal_scale=1.5):
    """Render a multi-view toy dataset to disk; returns the manifest path.

    Appearance is a per-vertex procedural albedo times a per-pose Phong-style
    diffuse term from one fixed directional light, so image brightness is
    genuinely pose-dependent.  The last view(s) are tagged as the validation
    split.
    """
    rig = rg.build_toy_rig(rig_config or rg.ToyRigConfig())
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    points = geo.CanonicalPointSet.from_template(rig)
    rig_data = rg.bind_canonical_points(rig, rig.vertices)
    normals = rg.template_vertex_normals(rig)
    base = procedural_albedo(rig.vertices)
    light = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
    center = rig.vertices.mean(axis=0)
    azimuths = np.linspace(-36.0, 36.0, n_views)
    cameras = [_view_camera(center, a, resolution, camera_distance, focal_scale)
               for a in azimuths]
    for v, cam in enumerate(cameras):
        cm.save_camera(os.path.join(out_dir, f"view{v}.txt"), cam)

    records = []
    for fi in range(n_frames):
        pose = _sample_pose(rig, rng)
        save_pose(os.path.join(out_dir, f"pose{fi:03d}.txt"), pose)
        transforms = rg.forward_kinematics(rig, pose)
        deformed = rg.deform_points(rig.vertices, rig_data, transforms, pose).values
        jinv, _ = rg.deformation_jacobian_inverse(rig_data, transforms)
        n_posed = np.einsum("ik,ikc->ic", normals, jinv)
        n_posed /= np.maximum(np.linalg.norm(n_posed, axis=1, keepdims=True), 1e-12)
        shade = 0.3 + 0.7 * np.maximum(n_posed @ -light, 0.0)
        colors = base * shade[:, None]
        for v, cam in enumerate(cameras):
            rgba = rd.render(deformed, colors, points.radius0, cam).values
            img_name = f"f{fi:03d}_v{v}.png"
            mask_name = f"f{fi:03d}_v{v}_mask.png"
            save_image(os.path.join(out_dir, img_name), rgba[..., :3])
            save_mask(os.path.join(out_dir, mask_name), rgba[..., 3] > 0.5)
            records.append({
                "name": f"f{fi:03d}_v{v}", "image": img_name, "mask": mask_name,
                "camera": f"view{v}.txt", "pose": f"pose{fi:03d}.txt",
                "split": "val" if v in val_views else "train"})
    manifest = os.path.join(out_dir, "manifest.yaml")
    with open(manifest, "w") as f:
        yaml.safe_dump({"root": ".", "frames": records}, f, sort_keys=False)
    return manifest

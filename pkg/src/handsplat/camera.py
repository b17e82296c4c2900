"""Pinhole camera model, text-file serialization, differentiable projection.

Camera files are plain text, one record per line:

    fx 500.0
    fy 500.0
    cx 128.0
    cy 128.0
    width 256
    height 256
    R r00 r01 r02
    R r10 r11 r12
    R r20 r21 r22
    t tx ty tz

The extrinsics map world to camera: X_cam = R X_world + t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

NEAR_PLANE = 1e-4  # meters


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        r = self.rotation
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("camera rotation must be orthonormal with det +1")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """World->camera extrinsics for a camera at `eye` looking at `target` (+z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise ValueError("look_at: view direction is parallel to the up vector")
    right /= nr
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])  # rows are camera axes in world coords
    return rot, -rot @ eye


def save_camera(path, cam):
    with open(path, "w") as fh:
        fh.write(f"fx {float(cam.fx)!r}\nfy {float(cam.fy)!r}\n")
        fh.write(f"cx {float(cam.cx)!r}\ncy {float(cam.cy)!r}\n")
        fh.write(f"width {cam.width}\nheight {cam.height}\n")
        for row in cam.rotation:
            fh.write("R " + " ".join(repr(float(v)) for v in row) + "\n")
        fh.write("t " + " ".join(repr(float(v)) for v in cam.translation) + "\n")


def load_camera(path):
    scalars = {}
    rows = []
    t = None
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            key, vals = parts[0], parts[1:]
            if key == "R":
                rows.append([float(v) for v in vals])
            elif key == "t":
                t = [float(v) for v in vals]
            else:
                scalars[key] = float(vals[0])
    missing = {"fx", "fy", "cx", "cy", "width", "height"} - set(scalars)
    if missing or len(rows) != 3 or t is None:
        raise ValueError(f"camera file {path} is incomplete (missing {sorted(missing) or 'R/t'})")
    return Camera(scalars["fx"], scalars["fy"], scalars["cx"], scalars["cy"],
                  np.array(rows), np.array(t),
                  int(scalars["width"]), int(scalars["height"]))


def project(points, cam, radius):
    """Pinhole projection of world points, differentiable through the tape.

    Returns (xy, r_px, depth, valid): screen coordinates (N,2) and projected
    radii (N,1) as tensors, camera-space depths (N,) and a near-plane cull
    mask (N,) as plain arrays.  Culled points still get (finite) values via a
    clamped depth; consumers must gate on `valid`.
    """
    points = points if isinstance(points, ad.Tensor) else ad.Tensor(points)
    cam_pts = ad.matmul(points, ad.Tensor(cam.rotation.T.copy())) + ad.Tensor(
        cam.translation.reshape(1, 3))
    x = ad.gather_cols(cam_pts, np.array([0]))
    y = ad.gather_cols(cam_pts, np.array([1]))
    z = ad.gather_cols(cam_pts, np.array([2]))
    valid = cam_pts.values[:, 2] > NEAR_PLANE
    z_safe = ad.relu(z - NEAR_PLANE) + NEAR_PLANE  # keeps culled depths positive
    u = x / z_safe * cam.fx + cam.cx
    v = y / z_safe * cam.fy + cam.cy
    xy = ad.concat([u, v], axis=1)
    r = radius if isinstance(radius, ad.Tensor) else ad.Tensor(
        np.broadcast_to(np.asarray(radius, dtype=np.float64), (points.shape[0],)).reshape(-1, 1).copy())
    if r.values.ndim == 1:
        r = ad.reshape(r, (-1, 1))
    r_px = r / z_safe * cam.fx
    return xy, r_px, cam_pts.values[:, 2].copy(), valid

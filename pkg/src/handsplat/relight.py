"""Phong relighting over a mesh rebuilt from the optimized point cloud.

The canonical points double as a surface estimate: snapping each template
vertex to its nearest canonical point (in canonical space) and reusing the
template face list gives a posed proxy mesh.  Per-vertex Phong shading with
an optional binary ray-cast self-shadow term then relights the asset under
novel directional lights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


def _vertex_normals(vertices, faces):
    fn = np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]],
                  vertices[faces[:, 2]] - vertices[faces[:, 0]])
    out = np.zeros_like(vertices)
    for c in range(3):
        np.add.at(out, faces[:, c], fn)
    return out / np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)


@dataclass
class ApproximateMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise ValueError("face indices exceed vertex count")
        if self.normals is None:
            self.normals = _vertex_normals(self.vertices, self.faces)


@dataclass
class PhongLight:
    direction: np.ndarray  # unit vector pointing from the surface toward the light
    k_a: float = 0.3
    k_d: float = 0.7
    k_s: float = 0.1
    shininess: float = 16.0

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("light direction must be unit length")
        for name in ("k_a", "k_d", "k_s"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.shininess < 1.0:
            raise ValueError("shininess exponent must be >= 1")


def approximate_mesh(canonical_coords, deformed_coords, template_vertices, faces):
    """Proxy mesh: template connectivity over nearest-canonical-point vertices.

    Vertex v takes the posed position of the canonical point nearest (in
    canonical space) to template vertex v.
    """
    canonical_coords = np.asarray(canonical_coords, dtype=np.float64)
    deformed_coords = np.asarray(deformed_coords, dtype=np.float64)
    _, idx = cKDTree(canonical_coords).query(np.asarray(template_vertices, dtype=np.float64))
    return ApproximateMesh(deformed_coords[np.asarray(idx, dtype=np.int64)],
                           np.asarray(faces, dtype=np.int64))


def phong_shade(mesh, light, view_dir, base_colors, shadow=None):
    """Per-vertex Phong: c = base (k_a + k_d max(0, n.l)) + k_s max(0, r.v)^a."""
    return phong_point_colors(mesh.normals, light, view_dir, base_colors, shadow)


def phong_point_colors(normals, light, view_dir, base_colors, shadow=None):
    """Phong shading applied directly to oriented points (same formula as
    phong_shade).  With k_a = 1 and k_d = k_s = 0 the output equals
    base_colors bitwise, so an ambient-only relight reproduces the plain
    render exactly."""
    view_dir = np.asarray(view_dir, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(view_dir) - 1.0) > 1e-9:
        raise ValueError("view direction must be unit length")
    n = np.asarray(normals, dtype=np.float64)
    l = light.direction
    ndotl = np.maximum(n @ l, 0.0)
    refl = 2.0 * (n @ l)[:, None] * n - l  # reflection of l about n
    spec = np.maximum(refl @ view_dir, 0.0) ** light.shininess
    base = np.asarray(base_colors, dtype=np.float64)
    out = base * (light.k_a + light.k_d * ndotl[:, None]) + light.k_s * spec[:, None]
    if shadow is not None:
        lit = light.k_a * base  # shadowed vertices keep ambient only
        out = np.where(np.asarray(shadow, bool)[:, None], out, lit)
    return out


def self_shadow(mesh, light, eps=1e-6):
    """Binary visibility toward a directional light via ray-triangle casting.

    A vertex is shadowed (0) when the ray from it toward the light hits any
    face it does not itself belong to.  Vertices facing away from the light
    (n.l <= 0) are reported lit: their diffuse term is already zero, and on a
    convex mesh this convention yields no self-shadow anywhere.
    """
    v, f = mesh.vertices, mesh.faces
    d = light.direction
    facing = mesh.normals @ d > 0.0
    v0, v1, v2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    e1, e2 = v1 - v0, v2 - v0
    pvec = np.cross(d, e2)  # constant direction: precompute per face
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-12
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    out = np.ones(len(v), dtype=np.int64)
    for i in range(len(v)):
        if not facing[i]:
            continue
        tvec = v[i] - v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1)
        w = (qvec @ d) * inv_det
        t = np.einsum("ij,ij->i", e2, qvec) * inv_det
        hit = ok & (u >= 0) & (u <= 1) & (w >= 0) & (u + w <= 1) & (t > eps)
        hit &= ~np.any(f == i, axis=1)  # faces adjacent to the vertex never occlude it
        if hit.any():
            out[i] = 0
    return out

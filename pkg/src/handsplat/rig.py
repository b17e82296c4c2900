"""Template rig, forward kinematics, and canonical-to-posed deformation.

The posed position of a canonical point is a skinning-weighted blend of
per-bone rigid transforms applied to the point plus its shape and pose
blendshape offsets.  All of it is built from autodiff primitives so
gradients flow to pose, shape coefficients, and point coordinates.

Conventions: points and normals are row vectors; a rotation R acts on a row
block as ``x @ R.T``.  Normals transform with the inverse Jacobian of the
deformation, which for blendshape-plus-skinning is exactly the weight-blended
rotation (the blendshape offsets are constants w.r.t. the point coordinate,
so they drop out of the Jacobian).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad


@dataclass
class TemplateRig:
    """Template mesh with skinning weights and blendshape bases."""

    vertices: np.ndarray        # (N_M, 3) meters
    faces: np.ndarray           # (F, 3) int
    skinning_weights: np.ndarray  # (N_M, N_j) row-stochastic
    shape_bases: np.ndarray     # (N_M, 3, 10)
    pose_bases: np.ndarray      # (N_M, 3, 9*(N_j-1))
    bone_parents: np.ndarray    # (N_j,) parent index, root points at itself
    rest_joints: np.ndarray     # (N_j, 3)

    def __post_init__(self):
        w = self.skinning_weights
        if np.any(w < -1e-12):
            raise ValueError("skinning weights must be nonnegative")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("skinning weight rows must sum to 1")
        if int(self.bone_parents[0]) != 0:
            raise ValueError("bone 0 must be the root (its own parent)")
        for j in range(1, self.num_bones):
            p, seen = j, set()
            while p != 0:
                if p in seen:
                    raise ValueError("bone hierarchy contains a cycle")
                seen.add(p)
                p = int(self.bone_parents[p])

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_bones(self):
        return self.bone_parents.shape[0]


@dataclass
class PoseParams:
    """Axis-angle joint rotations plus shape coefficients and a global rigid motion."""

    theta: np.ndarray                # (N_j, 3) radians
    phi: np.ndarray                  # (10,)
    global_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    global_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def rest(cls, num_bones):
        return cls(theta=np.zeros((num_bones, 3)), phi=np.zeros(10))


@dataclass
class BoneTransforms:
    """Per-bone world-space rigid transforms, kept as (rotation, translation) tensors."""

    rotations: list       # N_j tensors, each (3, 3)
    translations: list    # N_j tensors, each (1, 3)

    @property
    def matrices(self):
        """(N_j, 4, 4) homogeneous matrices."""
        n = len(self.rotations)
        out = np.tile(np.eye(4), (n, 1, 1))
        for j in range(n):
            out[j, :3, :3] = self.rotations[j].values
            out[j, :3, 3] = self.translations[j].values.ravel()
        return out

    def validate(self, tol=1e-6):
        for j, r in enumerate(self.rotations):
            m = r.values
            if np.max(np.abs(m @ m.T - np.eye(3))) > tol or abs(np.linalg.det(m) - 1.0) > tol:
                raise ValueError(f"bone {j}: rotation block is not in SO(3)")


@dataclass
class PerPointRigData:
    """Rig rows copied from each point's nearest template vertex."""

    weights: np.ndarray                 # (N_C, N_j)
    shape_bases: np.ndarray             # (N_C, 3, 10)
    pose_bases: np.ndarray              # (N_C, 3, 9*(N_j-1))
    nearest_template_index: np.ndarray  # (N_C,)


# skew-symmetric generators: skew(v) = v_x G0 + v_y G1 + v_z G2
_GEN = np.array([
    [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
    [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
    [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
])


def rodrigues(theta):
    """Per-joint rotation matrices from an (N_j, 3) axis-angle tensor.

    Returns a list of (3, 3) tensors.  Uses R = I + sin(a)/a K + 2 sin^2(a/2)/a^2 K^2
    with a tiny bias inside the sqrt so the zero-angle case stays exact and
    differentiable.
    """
    theta = theta if isinstance(theta, ad.Tensor) else ad.Tensor(theta)
    n = theta.shape[0]
    eye = ad.Tensor(np.eye(3))
    gens = [ad.Tensor(_GEN[c]) for c in range(3)]
    out = []
    for j in range(n):
        row = ad.gather_rows(theta, [j])                      # (1, 3)
        comps = [ad.gather_cols(row, [c]) for c in range(3)]  # (1, 1) each
        a2 = comps[0] * comps[0] + comps[1] * comps[1] + comps[2] * comps[2]
        a2 = a2 + 1e-24
        a = ad.sqrt(a2)
        f1 = ad.sin(a) / a
        half_sin = ad.sin(a * 0.5)
        f2 = (half_sin * half_sin) * 2.0 / a2
        k = comps[0] * gens[0] + comps[1] * gens[1] + comps[2] * gens[2]
        out.append(eye + f1 * k + f2 * ad.matmul(k, k))
    return out


def pose_feature(local_rotations):
    """Flattened (R_j - I) of all non-root joints; the pose-blendshape input."""
    if len(local_rotations) < 2:
        return ad.Tensor(np.zeros((0, 1)))
    eye = ad.Tensor(np.eye(3))
    parts = [ad.reshape(r - eye, (9, 1)) for r in local_rotations[1:]]
    return ad.concat(parts, axis=0)  # (9*(N_j-1), 1)


def forward_kinematics(rig, pose):
    """World-space skinning transforms for every bone.

    Each bone's transform composes the parent chain of local Rodrigues
    rotations about the rest joints; the root additionally applies the global
    rigid motion.  Returned transforms map rest-space to posed space (identity
    at the rest pose).
    """
    theta = pose.theta if isinstance(pose.theta, ad.Tensor) else ad.Tensor(pose.theta)
    locals_ = rodrigues(theta)
    n = rig.num_bones
    rest = rig.rest_joints
    g_rot = ad.Tensor(np.asarray(pose.global_rotation, dtype=float))
    g_trans = ad.Tensor(np.asarray(pose.global_translation, dtype=float).reshape(1, 3))

    chain_rot = [None] * n
    chain_trans = [None] * n   # (1, 3) row tensors
    chain_rot[0] = ad.matmul(g_rot, locals_[0])
    chain_trans[0] = ad.matmul(ad.Tensor(rest[0].reshape(1, 3)), ad.transpose(g_rot)) + g_trans
    for j in range(1, n):
        p = int(rig.bone_parents[j])
        off = ad.Tensor((rest[j] - rest[p]).reshape(1, 3))
        chain_rot[j] = ad.matmul(chain_rot[p], locals_[j])
        chain_trans[j] = ad.matmul(off, ad.transpose(chain_rot[p])) + chain_trans[p]

    # undo the rest-pose joint position so the rest pose maps to identity
    rots, trans = [], []
    for j in range(n):
        rest_j = ad.Tensor(rest[j].reshape(1, 3))
        rots.append(chain_rot[j])
        trans.append(chain_trans[j] - ad.matmul(rest_j, ad.transpose(chain_rot[j])))
    bt = BoneTransforms(rots, trans)
    bt.local_rotations = locals_
    return bt


def bind_canonical_points(rig, coords):
    """Copy blendshape/skinning rows from each point's nearest template vertex."""
    coords = np.asarray(coords, dtype=float)
    if rig.num_vertices == 0:
        raise ValueError("cannot bind points to an empty rig")
    if coords.shape[0] == 0:
        raise ValueError("cannot bind an empty point set")
    _, idx = cKDTree(rig.vertices).query(coords)
    idx = np.asarray(idx, dtype=np.int64)
    return PerPointRigData(
        weights=rig.skinning_weights[idx],
        shape_bases=rig.shape_bases[idx],
        pose_bases=rig.pose_bases[idx],
        nearest_template_index=idx,
    )


def blendshape_offsets(rig_data, pose, transforms):
    """Shape plus pose additive offsets, (N_C, 3)."""
    n = rig_data.weights.shape[0]
    phi = pose.phi if isinstance(pose.phi, ad.Tensor) else ad.Tensor(pose.phi)
    phi_col = ad.reshape(phi, (10, 1))
    s_flat = ad.Tensor(rig_data.shape_bases.reshape(n * 3, 10))
    b_s = ad.reshape(ad.matmul(s_flat, phi_col), (n, 3))
    feat = pose_feature(transforms.local_rotations)
    p_flat = ad.Tensor(rig_data.pose_bases.reshape(n * 3, feat.shape[0]))
    b_p = ad.reshape(ad.matmul(p_flat, feat), (n, 3))
    return b_s + b_p


def deform_points(points, rig_data, transforms, pose):
    """Posed coordinates of canonical points (linear blend skinning + blendshapes)."""
    p_c = points if isinstance(points, ad.Tensor) else ad.Tensor(points)
    n = p_c.shape[0]
    if rig_data.weights.shape[0] != n:
        raise ValueError(
            f"deform_points: {n} points but rig data for {rig_data.weights.shape[0]}")
    q = p_c + blendshape_offsets(rig_data, pose, transforms)
    out = None
    for j in range(len(transforms.rotations)):
        w = rig_data.weights[:, j]
        if not np.any(w):
            continue
        moved = ad.matmul(q, ad.transpose(transforms.rotations[j])) + transforms.translations[j]
        term = ad.Tensor(w.reshape(n, 1)) * moved
        out = term if out is None else out + term
    return out


def deformation_jacobian_inverse(rig_data, transforms, singular_tol=1e-8):
    """Inverse of the per-point deformation Jacobian J_i = sum_j w_ij R_j.

    Blendshape offsets are constant per point, so the Jacobian is exactly the
    skinning-blended rotation.  Near-singular blends fall back to the
    Moore-Penrose pseudo-inverse.  Returns ((N_C, 3, 3), singular mask).
    """
    rot = np.stack([r.values for r in transforms.rotations])   # (N_j, 3, 3)
    jac = np.einsum("ij,jkl->ikl", rig_data.weights, rot)
    det = np.linalg.det(jac)
    singular = np.abs(det) < singular_tol
    inv = np.empty_like(jac)
    ok = ~singular
    if np.any(ok):
        inv[ok] = np.linalg.inv(jac[ok])
    if np.any(singular):
        inv[singular] = np.linalg.pinv(jac[singular])
    return inv, singular


def deform_normals(canonical_normals, jacobian_inverses):
    """Normal-deformation feature rows n_i @ Jinv_i (not renormalized).

    This is the pose signal consumed by shading; Phong relighting renormalizes
    a separate copy via `unit_rows`.
    """
    n_c = canonical_normals if isinstance(canonical_normals, ad.Tensor) \
        else ad.Tensor(canonical_normals)
    cols = []
    for c in range(3):
        acc = None
        for k in range(3):
            term = ad.gather_cols(n_c, [k]) * ad.Tensor(jacobian_inverses[:, k, c:c + 1])
            acc = term if acc is None else acc + term
        cols.append(acc)
    return ad.concat(cols, axis=1)


def unit_rows(t, eps=1e-12):
    """Rows scaled to unit length (differentiable)."""
    t = t if isinstance(t, ad.Tensor) else ad.Tensor(t)
    return t / (ad.row_norms(t, eps=eps) + eps)


def template_vertex_normals(rig):
    """Area-weighted vertex normals of the template mesh, unit length."""
    v, f = rig.vertices, rig.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    out = np.zeros_like(v)
    for c in range(3):
        np.add.at(out, f[:, c], fn)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.maximum(norms, 1e-12)


# --------------------------------------------------------------------------
# procedural toy hand (stand-in for a licensed parametric template)

@dataclass
class ToyRigConfig:
    fingers: int = 5
    segments_per_finger: int = 3
    rings_per_segment: int = 4
    verts_per_ring: int = 10
    palm_rings: int = 10
    palm_verts_per_ring: int = 24
    palm_length: float = 0.09
    palm_half_width: float = 0.04
    palm_half_thickness: float = 0.015
    finger_segment_length: float = 0.03
    finger_radius: float = 0.008
    skinning_sigma: float = 0.012
    blendshape_scale: float = 0.002
    seed: int = 0


def _tube(start, end, radius_fn, n_rings, n_around, cap_end=False):
    """Ring-stacked tube mesh between two 3D points; returns (verts, faces)."""
    start, end = np.asarray(start, float), np.asarray(end, float)
    axis = end - start
    length = np.linalg.norm(axis)
    axis = axis / length
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    w = np.cross(axis, u)
    ang = 2.0 * np.pi * np.arange(n_around) / n_around
    verts = []
    for i in range(n_rings):
        t = i / (n_rings - 1)
        center = start + t * length * axis
        ru, rw = radius_fn(t)
        verts.extend(center + ru * np.cos(a) * u + rw * np.sin(a) * w for a in ang)
    faces = []
    for i in range(n_rings - 1):
        for k in range(n_around):
            a = i * n_around + k
            b = i * n_around + (k + 1) % n_around
            c = a + n_around
            d = b + n_around
            faces.append((a, b, d))
            faces.append((a, d, c))
    verts = np.array(verts)
    if cap_end:
        tip = start + (length + 1.2 * radius_fn(1.0)[0]) * axis
        verts = np.vstack([verts, tip])
        base = (n_rings - 1) * n_around
        ti = len(verts) - 1
        for k in range(n_around):
            faces.append((base + k, base + (k + 1) % n_around, ti))
    return verts, np.array(faces, dtype=np.int64)


def _segment_distance(points, a, b):
    """Distance from each point to segment ab."""
    ab = b - a
    t = np.clip((points - a) @ ab / max(ab @ ab, 1e-18), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def build_toy_rig(config=None):
    """Deterministic capsule-hand rig: ~800 vertices, 16 bones, smooth weights."""
    cfg = config or ToyRigConfig()
    n_bones = 1 + cfg.fingers * cfg.segments_per_finger

    rest_joints = np.zeros((n_bones, 3))
    bone_parents = np.zeros(n_bones, dtype=np.int64)
    base_x = np.linspace(-cfg.palm_half_width, cfg.palm_half_width, cfg.fingers)
    seg_ends = {}
    b = 1
    for f in range(cfg.fingers):
        for s in range(cfg.segments_per_finger):
            rest_joints[b] = (base_x[f], cfg.palm_length + s * cfg.finger_segment_length, 0.0)
            bone_parents[b] = b - 1 if s else 0
            seg_ends[b] = rest_joints[b] + np.array([0.0, cfg.finger_segment_length, 0.0])
            b += 1
    seg_ends[0] = np.array([0.0, cfg.palm_length, 0.0])

    verts_list, faces_list = [], []

    def extend(v, f):
        faces_list.append(f + sum(len(x) for x in verts_list))
        verts_list.append(v)

    palm_r = (cfg.palm_half_width + cfg.finger_radius, cfg.palm_half_thickness)
    extend(*_tube(np.array([0.0, -0.01, 0.0]), seg_ends[0],
                  lambda t: palm_r, cfg.palm_rings, cfg.palm_verts_per_ring))
    for f in range(cfg.fingers):
        first = 1 + f * cfg.segments_per_finger
        last = first + cfg.segments_per_finger - 1
        extend(*_tube(rest_joints[first], seg_ends[last],
                      lambda t: (cfg.finger_radius,) * 2,
                      cfg.rings_per_segment * cfg.segments_per_finger,
                      cfg.verts_per_ring, cap_end=True))
    vertices = np.vstack(verts_list)
    faces = np.vstack(faces_list)

    # weld coincident vertices so nearest-vertex binding is unambiguous
    _, keep, inverse = np.unique(np.round(vertices, 9), axis=0,
                                 return_index=True, return_inverse=True)
    vertices = vertices[keep]
    faces = inverse[faces]

    d = np.stack([_segment_distance(vertices, rest_joints[j], seg_ends[j])
                  for j in range(n_bones)], axis=1)
    w = np.exp(-(d / cfg.skinning_sigma) ** 2) + 1e-12
    w /= w.sum(axis=1, keepdims=True)

    rng = np.random.default_rng(cfg.seed)
    n_m = vertices.shape[0]
    shape_bases = rng.normal(size=(n_m, 3, 10)) * cfg.blendshape_scale
    pose_bases = rng.normal(size=(n_m, 3, 9 * (n_bones - 1))) * cfg.blendshape_scale * 0.25

    return TemplateRig(
        vertices=vertices, faces=faces, skinning_weights=w,
        shape_bases=shape_bases, pose_bases=pose_bases,
        bone_parents=bone_parents, rest_joints=rest_joints,
    )


MANO_CONTAINER_KEYS = {
    "vertices": (778, 3),
    "faces": None,           # (F, 3) int64
    "skinning_weights": (778, 16),
    "shape_bases": (778, 3, 10),
    "pose_bases": (778, 3, 135),
    "bone_parents": (16,),
    "rest_joints": (16, 3),
}


def load_template_npz(path):
    """Load a rig from an ``.npz`` container (e.g. converted MANO parameters).

    Required keys and shapes are in `MANO_CONTAINER_KEYS`; `faces` and
    `bone_parents` are integer arrays, everything else float64.  No parameter
    files ship with this repository.
    """
    data = np.load(path)
    missing = [k for k in MANO_CONTAINER_KEYS if k not in data]
    if missing:
        raise ValueError(f"{path}: missing rig container keys {missing}")
    return TemplateRig(
        vertices=np.asarray(data["vertices"], dtype=float),
        faces=np.asarray(data["faces"], dtype=np.int64),
        skinning_weights=np.asarray(data["skinning_weights"], dtype=float),
        shape_bases=np.asarray(data["shape_bases"], dtype=float),
        pose_bases=np.asarray(data["pose_bases"], dtype=float),
        bone_parents=np.asarray(data["bone_parents"], dtype=np.int64),
        rest_joints=np.asarray(data["rest_joints"], dtype=float),
    )

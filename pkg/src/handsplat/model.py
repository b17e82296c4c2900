"""The full deformable point-splat hand model.

Binds together the template rig, the optimizable canonical point set with
its SDF regularizer, the two context-attention appearance modules, and the
splat renderer.  One instance owns everything a checkpoint stores.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import appearance as ap
from . import checkpoint as ck
from . import geometry as geo
from . import renderer as rd
from . import rig as rg


class HandSplatModel:
    def __init__(self, rig, hidden=128, d_cross=64, sdf_hidden=128, sdf_depth=4,
                 seed=0, use_shading=True, sdf_init_radius=0.1):
        self.rig = rig
        self.use_shading = use_shading
        self.points = geo.CanonicalPointSet.from_template(rig)
        self.rig_data = rg.bind_canonical_points(rig, self.points.coords.values)
        self.template_rig_data = rg.PerPointRigData(
            weights=rig.skinning_weights, shape_bases=rig.shape_bases,
            pose_bases=rig.pose_bases,
            nearest_template_index=np.arange(rig.num_vertices, dtype=np.int64))
        self.sdf = geo.SdfNetwork(hidden=sdf_hidden, depth=sdf_depth,
                                  init_radius=sdf_init_radius, seed=seed)
        self.albedo = ap.ContextAttentionModule("albedo", 3, hidden, d_cross, seed + 1)
        self.shading = ap.ContextAttentionModule("shading", 1, hidden, d_cross, seed + 2)
        self.template_normals = rg.template_vertex_normals(rig)
        self._normal_cache = None

    # ------------------------------------------------------------ parameters

    def geometry_parameters(self):
        out = {"points.coords": self.points.coords}
        out.update(self.sdf.parameters())
        return out

    def appearance_parameters(self):
        out = dict(self.albedo.parameters())
        if self.use_shading:
            out.update(self.shading.parameters())
        return out

    def set_points(self, points):
        """Install a new point set (after upsampling or pruning) and rebind."""
        self.points = points
        self.rig_data = rg.bind_canonical_points(self.rig, points.coords.values)
        self._normal_cache = None

    # ------------------------------------------------------------ features

    def canonical_normals(self, refresh=False):
        """Unit surface normals at the canonical points, from the SDF field.

        Evaluated eagerly (no tape); degenerate-gradient rows fall back to the
        nearest template vertex normal.  Cached until the geometry moves.
        """
        if self._normal_cache is None or refresh:
            _, normals, degenerate = geo.sdf_gradient(self.sdf, self.points.coords.values)
            n = np.array(normals.values, copy=True)
            if degenerate.any():
                n[degenerate] = self.template_normals[
                    self.rig_data.nearest_template_index[degenerate]]
            self._normal_cache = n
        return self._normal_cache

    def pose_features(self, transforms):
        """Normal-deformation features (d_C, d_M) for the shading module.

        Plain arrays: the shading signal is a function of pose, not of the
        parameters being optimized, so it carries no gradient.
        """
        jinv_c, _ = rg.deformation_jacobian_inverse(self.rig_data, transforms)
        d_c = np.einsum("ik,ikc->ic", self.canonical_normals(), jinv_c)
        jinv_m, _ = rg.deformation_jacobian_inverse(self.template_rig_data, transforms)
        d_m = np.einsum("ik,ikc->ic", self.template_normals, jinv_m)
        return d_c, d_m

    # ------------------------------------------------------------ forward

    def point_colors(self, transforms):
        """Per-point color = albedo(canonical) * shading(pose features)."""
        albedo = ap.albedo_forward(self.albedo, self.points.coords, self.rig.vertices)
        if not self.use_shading:
            return albedo
        d_c, d_m = self.pose_features(transforms)
        shading = ap.shading_forward(self.shading, d_c, d_m)
        return ap.compose_color(albedo, shading)

    def render_frame(self, pose, camera, tile=rd.TILE, n_z=rd.N_Z, transforms=None):
        """RGBA render of one posed frame, differentiable end to end.

        `transforms` short-circuits forward kinematics with precomputed bone
        transforms (they depend only on the rig and the pose, so callers
        looping over epochs can compute them once per frame)."""
        if transforms is None:
            transforms = rg.forward_kinematics(self.rig, pose)
        deformed = rg.deform_points(self.points.coords, self.rig_data, transforms, pose)
        colors = self.point_colors(transforms)
        return rd.render(deformed, colors, self.points.radius, camera,
                         tile=tile, n_z=n_z)

    def deformed_coords(self, pose, transforms=None):
        """Posed point positions as a plain array (eager, for visibility)."""
        if transforms is None:
            transforms = rg.forward_kinematics(self.rig, pose)
        return rg.deform_points(self.points.coords, self.rig_data, transforms, pose).values

    def posed_template_vertices(self, pose):
        transforms = rg.forward_kinematics(self.rig, pose)
        return rg.deform_points(self.rig.vertices, self.template_rig_data,
                                transforms, pose).values

    # ------------------------------------------------------------ checkpoint

    def state_dict(self):
        out = {}
        for name, t in {**self.geometry_parameters(), **self.appearance_parameters()}.items():
            out[name] = t.values
        p = self.points
        out["points.radius0"] = np.array(p.radius0)
        out["points.generation"] = np.array(float(p.generation))
        out["points.visible"] = p.visible.astype(np.float64)
        out["points.point_generation"] = p.point_generation.astype(np.float64)
        return out

    def save(self, path):
        ck.save_params(path, self.state_dict())

    def load(self, path):
        state = ck.load_params(path)
        coords = state.pop("points.coords")
        points = geo.CanonicalPointSet(
            coords=ad.Tensor(np.array(coords), requires_grad=True),
            radius0=float(np.asarray(state.pop("points.radius0")).reshape(())),
            generation=int(np.asarray(state.pop("points.generation")).reshape(())),
            visible=state.pop("points.visible").astype(bool),
            point_generation=state.pop("points.point_generation").astype(np.int64))
        self.set_points(points)
        params = {**self.geometry_parameters(), **self.appearance_parameters()}
        del params["points.coords"]
        for name, arr in state.items():
            if name not in params:
                raise ValueError(f"checkpoint key {name} does not match this model")
            t = params.pop(name)
            if t.values.shape != arr.shape:
                raise ValueError(
                    f"checkpoint key {name}: shape {arr.shape} vs model {t.values.shape}")
            t.values[...] = arr
        if params:
            raise ValueError(f"checkpoint missing keys: {sorted(params)}")
        self._normal_cache = None
        return self

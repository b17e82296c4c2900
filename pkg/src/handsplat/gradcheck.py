"""Finite-difference gradient suites for every differentiable layer.

Four suites, each returning (max relative error, per-case errors) between
tape gradients and central differences:

  primitives  — every autodiff primitive on small random operands
  deformation — posed point positions w.r.t. joint angles, shape
                coefficients, and canonical coordinates
  geometry    — the SDF/eikonal regularizer w.r.t. network parameters and
                canonical coordinates
  renderer    — a full render-to-loss pass (8x8 image, 20 points) w.r.t.
                point positions, colors, and all appearance parameters

The splat compositor is only piecewise smooth (C0 at splat silhouettes,
discontinuous where the per-pixel depth list saturates), so the renderer
suite seeds its scene into general position and carries a looser threshold.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import losses as ls
from . import renderer as rd
from . import rig as rg
from .camera import Camera, look_at
from .model import HandSplatModel

RENDER_TOL = 1e-3
SMOOTH_TOL = 1e-4


def primitive_suite(seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(4, 5))
    b = ad.Tensor(rng.normal(size=(4, 5)))
    m = ad.Tensor(rng.normal(size=(5, 3)))
    pos = np.abs(a) + 0.5  # keep log/sqrt/div away from their domain edges
    off = ad.Tensor(0.3 * np.ones_like(a))  # push relu/abs kinks off the grid
    idx = np.array([2, 0, 3])

    def s(fn):  # scalarize
        return lambda x: ad.tsum(fn(x))

    cases = {
        "add": (s(lambda x: x + b), a),
        "sub": (s(lambda x: x - b), a),
        "mul": (s(lambda x: x * b), a),
        "div": (s(lambda x: ad.div(x, ad.Tensor(pos))), a),
        "scalar_mul": (s(lambda x: x * 1.7), a),
        "matmul": (s(lambda x: ad.matmul(x, m)), a),
        "transpose": (s(ad.transpose), a),
        "relu": (s(lambda x: ad.relu(x + off)), a),
        "softplus": (s(ad.softplus), a),
        "sigmoid": (s(ad.sigmoid), a),
        "tanh": (s(ad.tanh), a),
        "exp": (s(ad.exp), a),
        "log": (s(ad.log), pos),
        "sqrt": (s(ad.sqrt), pos),
        "sin": (s(ad.sin), a),
        "cos": (s(ad.cos), a),
        "absolute": (s(lambda x: ad.absolute(x + off)), a),
        "softmax_rows": (s(ad.softmax_rows), a),
        "tsum_axis": (s(lambda x: ad.tsum(x, axis=0)), a),
        "tmean": (ad.tmean, a),
        "l2_norm": (ad.l2_norm, a),
        "row_norms": (s(ad.row_norms), a),
        "concat": (s(lambda x: ad.concat([x, b], axis=1)), a),
        "gather_rows": (s(lambda x: ad.gather_rows(x, idx)), a),
        "gather_cols": (s(lambda x: ad.gather_cols(x, np.array([1, 4, 1]))), a),
        "reshape": (s(lambda x: ad.reshape(x, (2, -1))), a),
    }
    errs = {name: ad.finite_difference_check(fn, x) for name, (fn, x) in cases.items()}
    return max(errs.values()), errs


def _small_rig():
    return rg.build_toy_rig(rg.ToyRigConfig(
        fingers=2, segments_per_finger=2, rings_per_segment=2,
        verts_per_ring=6, palm_rings=3, palm_verts_per_ring=10))


def deformation_suite(seed=0):
    rng = np.random.default_rng(seed)
    rig = _small_rig()
    pts = rig.vertices[rng.choice(rig.num_vertices, 12, replace=False)]
    data = rg.bind_canonical_points(rig, pts)
    theta0 = rng.normal(scale=0.3, size=(rig.num_bones, 3))
    phi0 = rng.normal(scale=0.4, size=10)
    probe = ad.Tensor(rng.normal(size=pts.shape))  # random scalarizer

    def run(theta, phi, pc):
        pose = rg.PoseParams(theta=theta, phi=phi)
        bt = rg.forward_kinematics(rig, pose)
        return ad.tsum(rg.deform_points(pc, data, bt, pose) * probe)

    pts_t = ad.Tensor(pts)
    errs = {
        "theta": ad.finite_difference_check(
            lambda t: run(t, ad.Tensor(phi0), pts_t), ad.Tensor(theta0)),
        "phi": ad.finite_difference_check(
            lambda p: run(ad.Tensor(theta0), p, pts_t), ad.Tensor(phi0)),
        "coords": ad.finite_difference_check(
            lambda p: run(ad.Tensor(theta0), ad.Tensor(phi0), p), pts_t),
    }
    return max(errs.values()), errs


def geometry_suite(seed=0):
    net = geo.SdfNetwork(hidden=16, depth=3, seed=seed, beta=1.0)
    rng = np.random.default_rng(seed)
    pts = ad.Tensor(rng.normal(size=(8, 3)))
    omega = ad.Tensor(rng.normal(size=(8, 3)))

    def reg(points):
        s, e = geo.regularization_loss(net, points, omega)
        return s + 0.1 * e

    errs = {"coords": ad.finite_difference_check(reg, pts)}
    for store in (net.weights, net.biases):
        kind = "w" if store is net.weights else "b"
        for i, p in enumerate(store):
            def f(x, store=store, i=i, p=p):
                store[i] = x
                try:
                    return reg(pts)
                finally:
                    store[i] = p
            errs[f"sdf.{kind}{i}"] = ad.finite_difference_check(
                f, ad.Tensor(p.values.copy()))
    return max(errs.values()), errs


def _set_appearance_param(module, rest, tensor):
    """Point the named sub-parameter of a ContextAttentionModule at `tensor`."""
    if rest in ("w_q", "w_k", "w_v"):
        setattr(module, rest, tensor)
        return
    group, slot = rest.split(".")        # "embed"/"out", "w0"/"b1"
    store = module.embed if group == "embed" else module.out
    i = int(slot[1])
    w, b = store[i]
    store[i] = (tensor, b) if slot[0] == "w" else (w, tensor)


def renderer_suite(seed=16):
    """Full render-to-loss pass on an 8x8 image; the scene keeps at most
    8 overlapping splats per pixel (the depth-list capacity) and the chosen
    seed keeps every pixel off the C0 kink at each splat silhouette."""
    rng = np.random.default_rng(seed)
    n = 20
    rot, t = look_at(np.array([0.0, 0.0, -2.0]), np.zeros(3), np.array([0.0, 1.0, 0.0]))
    cam = Camera(fx=12.0, fy=12.0, cx=4.0, cy=4.0, width=8, height=8,
                 rotation=rot, translation=t)
    pts0 = rng.uniform(-0.4, 0.4, size=(n, 3))
    cols0 = rng.uniform(0.2, 0.8, size=(n, 3))
    target = rng.uniform(size=(8, 8, 3))
    mask = np.ones((8, 8))
    radius = 0.05

    def loss_of(points_t, colors_t):
        rgba = rd.render(points_t, colors_t, radius, cam)
        flat = ad.reshape(rgba, (64, 4))
        rgb = ad.reshape(ad.gather_cols(flat, [0, 1, 2]), (8, 8, 3))
        return ls.rgb_loss(rgb, target, mask)

    errs = {
        "positions": ad.finite_difference_check(
            lambda p: loss_of(p, ad.Tensor(cols0)), pts0, h=1e-6),
        "colors": ad.finite_difference_check(
            lambda c: loss_of(ad.Tensor(pts0), c), cols0, h=1e-6),
    }

    # appearance parameters, through a posed model render
    rig = _small_rig()
    model = HandSplatModel(rig, hidden=8, d_cross=4, sdf_hidden=16, sdf_depth=3,
                           seed=seed, use_shading=True)
    center = rig.vertices.mean(axis=0)
    rot2, t2 = look_at(center + np.array([0.0, 0.1, -0.6]), center,
                       np.array([0.0, 1.0, 0.0]))
    cam2 = Camera(fx=12.0, fy=12.0, cx=4.0, cy=4.0, width=8, height=8,
                  rotation=rot2, translation=t2)
    pose = rg.PoseParams.rest(rig.num_bones)

    def model_loss():
        rgba = model.render_frame(pose, cam2)
        flat = ad.reshape(rgba, (64, 4))
        rgb = ad.reshape(ad.gather_cols(flat, [0, 1, 2]), (8, 8, 3))
        return ls.rgb_loss(rgb, target, mask)

    for name, p in model.appearance_parameters().items():
        module = model.albedo if name.startswith("albedo.") else model.shading
        rest = name.split(".", 1)[1]

        def f(x, module=module, rest=rest, p=p):
            _set_appearance_param(module, rest, x)
            try:
                return model_loss()
            finally:
                _set_appearance_param(module, rest, p)
        errs[name] = ad.finite_difference_check(f, ad.Tensor(p.values.copy()), h=1e-6)
    return max(errs.values()), errs


def run_all(seed=0):
    """Run every suite; returns {suite: (max_err, threshold, per_case_errors)}."""
    out = {}
    for name, fn, tol in (("primitives", primitive_suite, SMOOTH_TOL),
                          ("deformation", deformation_suite, SMOOTH_TOL),
                          ("geometry", geometry_suite, SMOOTH_TOL),
                          ("renderer", None, RENDER_TOL)):
        err, detail = renderer_suite() if fn is None else fn(seed)
        out[name] = (err, tol, detail)
    return out

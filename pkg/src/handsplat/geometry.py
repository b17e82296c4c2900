"""Canonical point-set lifecycle: SDF regularization, upsampling, pruning.

The canonical points are the optimizable geometry.  An MLP signed distance
field keeps them on a smooth surface: its zero-level term pulls point
coordinates to the surface and an eikonal term keeps the field metric.
Input gradients of the SDF are computed by forward-mode tangent propagation
built from ordinary tape primitives, so the eikonal penalty is a first-order
expression in the network parameters (the tape never differentiates a
derivative).

Upsampling doubles the point count by drawing one child uniformly inside the
sphere of the current radius around every point, then shrinks the shared
radius by 1/sqrt(2).  Pruning drops points whose projection never fell inside
the hand silhouette during an epoch; the original template-seeded points are
exempt so the set can never collapse below the template.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

RADIUS_SHRINK = 1.0 / np.sqrt(2.0)


@dataclass
class CanonicalPointSet:
    """Optimizable canonical coordinates with the shared per-generation radius."""

    coords: ad.Tensor                    # (N_C, 3), requires_grad
    radius0: float                       # world-space splat radius at generation 0
    generation: int = 0
    visible: np.ndarray = None           # (N_C,) bool, epoch accumulator
    nearest_template_index: np.ndarray = None
    point_generation: np.ndarray = None  # (N_C,) generation each point was born in

    def __post_init__(self):
        n = self.coords.shape[0]
        if self.visible is None:
            self.visible = np.zeros(n, dtype=bool)
        if self.point_generation is None:
            self.point_generation = np.zeros(n, dtype=np.int64)
        if self.nearest_template_index is None:
            self.nearest_template_index = np.zeros(n, dtype=np.int64)

    @property
    def radius(self):
        return self.radius0 * RADIUS_SHRINK ** self.generation

    @property
    def count(self):
        return self.coords.shape[0]

    @classmethod
    def from_template(cls, rig):
        """Full template as generation 0; radius set so neighbor splats overlap."""
        coords = ad.Tensor(np.array(rig.vertices, copy=True), requires_grad=True)
        from scipy.spatial import cKDTree
        d, _ = cKDTree(rig.vertices).query(rig.vertices, k=2)
        radius0 = float(np.median(d[:, 1]))
        return cls(coords=coords, radius0=radius0,
                   nearest_template_index=np.arange(rig.num_vertices, dtype=np.int64))


class SdfNetwork:
    """Softplus MLP approximating a signed distance function R^3 -> R.

    Geometric initialization: the untrained field is approximately the signed
    distance to a sphere of `init_radius`.
    """

    def __init__(self, hidden=128, depth=4, init_radius=0.5, seed=0, beta=100.0):
        # sharpened softplus(beta*x)/beta keeps the geometric init close to
        # the intended sphere while staying smooth for the eikonal term
        self.beta = beta
        rng = np.random.default_rng(seed)
        dims = [3] + [hidden] * depth + [1]
        self.weights, self.biases = [], []
        for i in range(len(dims) - 1):
            n_in, n_out = dims[i], dims[i + 1]
            if i == len(dims) - 2:
                w = rng.normal(np.sqrt(np.pi / n_in), 1e-5, size=(n_in, n_out))
                b = np.full(n_out, -init_radius)
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / n_out), size=(n_in, n_out))
                b = np.zeros(n_out)
            self.weights.append(ad.Tensor(w, requires_grad=True))
            self.biases.append(ad.Tensor(b.reshape(1, n_out), requires_grad=True))

    def parameters(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"sdf.w{i}"] = w
            out[f"sdf.b{i}"] = b
        return out

    def forward(self, p):
        """(N, 3) -> (N, 1) signed distance values."""
        h = p if isinstance(p, ad.Tensor) else ad.Tensor(p)
        for i in range(len(self.weights) - 1):
            z = ad.matmul(h, self.weights[i]) + self.biases[i]
            h = ad.softplus(z * self.beta) * (1.0 / self.beta)
        return ad.matmul(h, self.weights[-1]) + self.biases[-1]

    def forward_with_gradient(self, p):
        """Returns (values (N, 1), spatial gradient (N, 3)), both on the tape."""
        p = p if isinstance(p, ad.Tensor) else ad.Tensor(p)
        n = p.shape[0]
        h = p
        tangents = [ad.Tensor(np.tile(np.eye(3)[c], (n, 1))) for c in range(3)]
        for i in range(len(self.weights) - 1):
            z = ad.matmul(h, self.weights[i]) + self.biases[i]
            gate = ad.sigmoid(z * self.beta)  # d/dz softplus(beta z)/beta
            tangents = [gate * ad.matmul(t, self.weights[i]) for t in tangents]
            h = ad.softplus(z * self.beta) * (1.0 / self.beta)
        value = ad.matmul(h, self.weights[-1]) + self.biases[-1]
        grad = ad.concat([ad.matmul(t, self.weights[-1]) for t in tangents], axis=1)
        return value, grad


def sdf_eval(net, p):
    return net.forward(p)


def sdf_gradient(net, p, degenerate_tol=1e-8):
    """Exact spatial gradient and unit normals; flags near-zero gradients.

    Returns (grad (N, 3) tensor, unit normals (N, 3) tensor, degenerate mask).
    Degenerate rows are excluded from shading features by the caller.
    """
    _, grad = net.forward_with_gradient(p)
    norms = np.linalg.norm(grad.values, axis=1)
    degenerate = norms < degenerate_tol
    normals = grad / (ad.row_norms(grad) + 1e-12)
    return grad, normals, degenerate


def regularization_loss(net, coords, omega, normalize=False):
    """Surface + eikonal regularizer.

    sdf term: sum_i F(p_i)^2 over canonical points; eikonal term:
    sum over canonical points and the perturbation set Omega of
    (||grad F|| - 1)^2.  Internal weights are 1; training applies its own.
    With ``normalize=True`` each term is a per-sample mean so the weighting
    stays scale-free as the point count doubles.
    """
    coords = coords if isinstance(coords, ad.Tensor) else ad.Tensor(coords)
    omega = omega if isinstance(omega, ad.Tensor) else ad.Tensor(omega)
    value, grad_c = net.forward_with_gradient(coords)
    sdf_term = ad.tsum(value * value)
    _, grad_o = net.forward_with_gradient(omega)
    eik = None
    for g in (grad_c, grad_o):
        dev = ad.row_norms(g) - 1.0
        term = ad.tsum(dev * dev)
        eik = term if eik is None else eik + term
    if normalize:
        sdf_term = sdf_term * (1.0 / coords.shape[0])
        eik = eik * (1.0 / (coords.shape[0] + omega.shape[0]))
    return sdf_term, eik


def sample_omega(points, rng):
    """One Gaussian perturbation per canonical point, sigma = 1.5 x radius."""
    base = points.coords.values
    return base + rng.normal(scale=1.5 * points.radius, size=base.shape)


def upsample(points, rng):
    """Draw one child uniformly inside each point's sphere; shrink the radius.

    Rig data for the enlarged set must be rebound by the caller (binding is
    frozen per generation, not per batch).
    """
    base = points.coords.values
    n = base.shape[0]
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    dist = points.radius * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / 3.0)
    children = base + direction * dist
    coords = ad.Tensor(np.vstack([base, children]), requires_grad=True)
    return CanonicalPointSet(
        coords=coords,
        radius0=points.radius0,
        generation=points.generation + 1,
        visible=np.zeros(2 * n, dtype=bool),
        nearest_template_index=np.concatenate([points.nearest_template_index] * 2),
        point_generation=np.concatenate(
            [points.point_generation,
             np.full(n, points.generation + 1, dtype=np.int64)]),
    )


def prune(points, max_fraction=0.5):
    """Drop points never marked visible this epoch; template seeds are exempt.

    Survivors keep their visible flag set, so a second call within the same
    epoch removes nothing.  Removing more than `max_fraction` of the set in
    one call aborts: that signals a camera/mask misconfiguration, not outliers.
    """
    keep = points.visible | (points.point_generation == 0)
    dropped = points.count - int(keep.sum())
    if dropped > max_fraction * points.count:
        raise RuntimeError(
            f"pruning would remove {dropped}/{points.count} points; "
            "check camera and mask configuration")
    if dropped == 0:
        points.visible[:] = True
        return points
    coords = ad.Tensor(points.coords.values[keep], requires_grad=True)
    return CanonicalPointSet(
        coords=coords,
        radius0=points.radius0,
        generation=points.generation,
        visible=np.ones(int(keep.sum()), dtype=bool),
        nearest_template_index=points.nearest_template_index[keep],
        point_generation=points.point_generation[keep],
    )


def export_ply(path, points, normals=None, colors=None):
    """ASCII PLY dump with position, normal, albedo, generation, visibility."""
    n = points.count
    coords = points.coords.values
    normals = np.zeros((n, 3)) if normals is None else np.asarray(normals)
    colors = np.full((n, 3), 0.5) if colors is None else np.asarray(colors)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {n}\n")
        for prop in ("x", "y", "z", "nx", "ny", "nz"):
            f.write(f"property float {prop}\n")
        for prop in ("red", "green", "blue"):
            f.write(f"property uchar {prop}\n")
        f.write("property int generation\nproperty uchar visible\nend_header\n")
        rgb = np.clip(np.round(colors * 255.0), 0, 255).astype(int)
        for i in range(n):
            f.write("%.8g %.8g %.8g %.6g %.6g %.6g %d %d %d %d %d\n" % (
                *coords[i], *normals[i], *rgb[i],
                points.point_generation[i], int(points.visible[i])))

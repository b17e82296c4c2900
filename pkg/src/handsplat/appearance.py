"""Context-attention appearance: canonical albedo and pose-aware shading.

Per-point color is the element-wise product of a pose-independent albedo and
a positive scalar shading value.  Both come from the same module shape: an
embedding MLP lifts raw 3-vectors to a hidden space, a cross-attention block
relates each canonical point (query) to the template points (keys/values),
and an output MLP maps the aggregated feature to the target range.  Albedo
consumes canonical coordinates only, so it is pose-invariant by construction;
shading consumes the normal-deformation features of point and template.

The dense N_C x N_M attention matrix is evaluated with BLAS GEMMs, whose
internal blocking supplies the tiled access pattern this needs at desk scale.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class ContextAttentionModule:
    """Embedding MLP + single-head cross attention + output MLP."""

    def __init__(self, name, out_dim, hidden=128, d_cross=64, seed=0,
                 output_activation="sigmoid"):
        self.name = name
        self.out_dim = out_dim
        self.hidden = hidden
        self.d_cross = d_cross
        self.output_activation = output_activation
        rng = np.random.default_rng(seed)

        def lin(n_in, n_out, scale=None):
            s = np.sqrt(2.0 / n_in) if scale is None else scale
            return (ad.Tensor(rng.normal(0.0, s, size=(n_in, n_out)), requires_grad=True),
                    ad.Tensor(np.zeros((1, n_out)), requires_grad=True))

        self.embed = [lin(3, hidden), lin(hidden, hidden)]
        self.w_q = ad.Tensor(rng.normal(0.0, hidden ** -0.5, size=(hidden, d_cross)),
                             requires_grad=True)
        self.w_k = ad.Tensor(rng.normal(0.0, hidden ** -0.5, size=(hidden, d_cross)),
                             requires_grad=True)
        self.w_v = ad.Tensor(rng.normal(0.0, hidden ** -0.5, size=(hidden, d_cross)),
                             requires_grad=True)
        # small final layer so albedo starts near 0.5 and shading near 1
        self.out = [lin(d_cross, d_cross), lin(d_cross, out_dim, scale=1e-2)]

    def parameters(self):
        out = {}
        for i, (w, b) in enumerate(self.embed):
            out[f"{self.name}.embed.w{i}"] = w
            out[f"{self.name}.embed.b{i}"] = b
        out[f"{self.name}.w_q"] = self.w_q
        out[f"{self.name}.w_k"] = self.w_k
        out[f"{self.name}.w_v"] = self.w_v
        for i, (w, b) in enumerate(self.out):
            out[f"{self.name}.out.w{i}"] = w
            out[f"{self.name}.out.b{i}"] = b
        return out

    def _embed(self, x):
        x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        (w0, b0), (w1, b1) = self.embed
        return ad.matmul(ad.relu(ad.matmul(x, w0) + b0), w1) + b1

    def _out_mlp(self, feats):
        (w0, b0), (w1, b1) = self.out
        return ad.matmul(ad.relu(ad.matmul(feats, w0) + b0), w1) + b1


def cross_attention(module, queries, keys):
    """Row-softmax attention of queries over keys; returns (N_q, d_cross)."""
    e_q = module._embed(queries)
    e_k = module._embed(keys)
    q = ad.matmul(e_q, module.w_q)
    k = ad.matmul(e_k, module.w_k)
    v = ad.matmul(e_k, module.w_v)
    scores = ad.matmul(q, ad.transpose(k)) * (module.d_cross ** -0.5)
    return ad.matmul(ad.softmax_rows(scores), v)


def attention_weights(module, queries, keys):
    """The softmax similarity matrix itself (for tests and inspection)."""
    q = ad.matmul(module._embed(queries), module.w_q)
    k = ad.matmul(module._embed(keys), module.w_k)
    return ad.softmax_rows(ad.matmul(q, ad.transpose(k)) * (module.d_cross ** -0.5))


def albedo_forward(module, canonical_coords, template_coords):
    """Pose-independent intrinsic color per canonical point, in (0, 1)^3."""
    feats = cross_attention(module, canonical_coords, template_coords)
    return ad.sigmoid(module._out_mlp(feats))


_INV_SOFTPLUS0 = 1.0 / np.log(2.0)


def shading_forward(module, point_features, template_features):
    """Positive scalar shading from normal-deformation features; ~1 at init."""
    feats = cross_attention(module, point_features, template_features)
    return ad.softplus(module._out_mlp(feats)) * _INV_SOFTPLUS0


def compose_color(albedo, shading):
    """Per-point color = albedo * shading (shading broadcast over channels).

    Not clamped here; clamping to [0, 1] happens at image-write time only.
    """
    if albedo.shape[0] != shading.shape[0]:
        raise ValueError(
            f"compose_color: {albedo.shape[0]} albedo rows vs {shading.shape[0]} shading rows")
    return albedo * shading

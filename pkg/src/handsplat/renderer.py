"""Tiled differentiable point splatting.

Each point splats as a screen-space circle.  Per pixel, the nearest N_Z
fragments by (depth, point index) are kept in a bounded insertion sort, then
composited front to back:

    c_pix = sum_i c_i a_i prod_{j<i} (1 - a_j),   a = 1 - d^2 / r^2

with alpha accumulated the same way (c_i = 1).  Background is black, alpha 0.

The forward pass parallelizes over 8x8 pixel tiles (every pixel scans all
fragments binned to its tile, so smaller tiles trade binning overhead for a
much shorter per-pixel scan); each tile owns its
pixels, so the image is written race-free and the result is bit-identical
for any tile size (the fragment order is a total order).  The backward pass
writes per-(tile, point) gradient slots in parallel, then reduces them into
per-point gradients serially in tile-major order so accumulation order is
deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange
from scipy import ndimage

from . import autodiff as ad
from . import camera as cam_mod

N_Z = 8
TILE = 8


@njit(cache=True)
def _bin_points(xy, r, active, height, width, tile):
    """CSR tile bins: point i enters every tile its circle's bbox touches."""
    n_ty = (height + tile - 1) // tile
    n_tx = (width + tile - 1) // tile
    n = xy.shape[0]
    tx0 = np.empty(n, np.int64)
    tx1 = np.empty(n, np.int64)
    ty0 = np.empty(n, np.int64)
    ty1 = np.empty(n, np.int64)
    counts = np.zeros(n_ty * n_tx + 1, np.int64)
    for i in range(n):
        tx0[i] = 1
        tx1[i] = 0  # empty range unless the point survives the checks
        if not active[i] or r[i] <= 0.0:
            continue
        x0 = int(np.floor(xy[i, 0] - r[i]))
        x1 = int(np.floor(xy[i, 0] + r[i]))
        y0 = int(np.floor(xy[i, 1] - r[i]))
        y1 = int(np.floor(xy[i, 1] + r[i]))
        if x1 < 0 or y1 < 0 or x0 > width - 1 or y0 > height - 1:
            continue
        tx0[i] = max(x0, 0) // tile
        tx1[i] = min(x1, width - 1) // tile
        ty0[i] = max(y0, 0) // tile
        ty1[i] = min(y1, height - 1) // tile
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                counts[ty * n_tx + tx + 1] += 1
    offsets = np.cumsum(counts)
    ids = np.empty(offsets[-1], np.int64)
    cursor = offsets[:-1].copy()
    for i in range(n):
        if tx1[i] < tx0[i]:
            continue
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                t = ty * n_tx + tx
                ids[cursor[t]] = i
                cursor[t] += 1
    return offsets, ids


@njit(parallel=True, cache=True)
def _forward(xy, r, depth, colors, offsets, ids, height, width, tile, n_z):
    n_tx = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    rgb = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    sel = np.full((height, width, n_z), -1, np.int64)  # CSR entry indices
    cnt = np.zeros((height, width), np.int64)
    for t in prange(n_tiles):
        lo, hi = offsets[t], offsets[t + 1]
        if hi == lo:
            continue
        ty, tx = t // n_tx, t % n_tx
        y1 = min(ty * tile + tile, height)
        x1 = min(tx * tile + tile, width)
        fz = np.empty(n_z)
        fe = np.empty(n_z, np.int64)
        fi = np.empty(n_z, np.int64)
        for py in range(ty * tile, y1):
            for px in range(tx * tile, x1):
                m = 0
                for e in range(lo, hi):
                    i = ids[e]
                    dx = px - xy[i, 0]
                    dy = py - xy[i, 1]
                    d2 = dx * dx + dy * dy
                    if d2 >= r[i] * r[i]:
                        continue
                    z = depth[i]
                    if m == n_z:
                        if z > fz[m - 1] or (z == fz[m - 1] and i > fi[m - 1]):
                            continue
                        pos = m - 1
                    else:
                        pos = m
                        m += 1
                    while pos > 0 and (fz[pos - 1] > z or (fz[pos - 1] == z and fi[pos - 1] > i)):
                        fz[pos] = fz[pos - 1]
                        fe[pos] = fe[pos - 1]
                        fi[pos] = fi[pos - 1]
                        pos -= 1
                    fz[pos] = z
                    fe[pos] = e
                    fi[pos] = i
                trans = 1.0
                c0 = c1 = c2 = ca = 0.0
                for k in range(m):
                    i = fi[k]
                    dx = px - xy[i, 0]
                    dy = py - xy[i, 1]
                    a = 1.0 - (dx * dx + dy * dy) / (r[i] * r[i])
                    w = a * trans
                    c0 += w * colors[i, 0]
                    c1 += w * colors[i, 1]
                    c2 += w * colors[i, 2]
                    ca += w
                    trans *= 1.0 - a
                    sel[py, px, k] = fe[k]
                rgb[py, px, 0] = c0
                rgb[py, px, 1] = c1
                rgb[py, px, 2] = c2
                alpha[py, px] = ca
                cnt[py, px] = m
    return rgb, alpha, sel, cnt


@njit(parallel=True, cache=True)
def _backward_fill(xy, r, colors, offsets, ids, sel, cnt, go_rgb, go_alpha,
                   height, width, tile, n_z):
    n_tx = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    gbuf = np.zeros((ids.shape[0], 6))  # per CSR entry: dx, dy, dr, dc0, dc1, dc2
    for t in prange(n_tiles):
        lo, hi = offsets[t], offsets[t + 1]
        if hi == lo:
            continue
        ty, tx = t // n_tx, t % n_tx
        y1 = min(ty * tile + tile, height)
        x1 = min(tx * tile + tile, width)
        a_loc = np.empty(n_z)
        t_loc = np.empty(n_z)
        for py in range(ty * tile, y1):
            for px in range(tx * tile, x1):
                m = cnt[py, px]
                if m == 0:
                    continue
                trans = 1.0
                for k in range(m):
                    i = ids[sel[py, px, k]]
                    dx = px - xy[i, 0]
                    dy = py - xy[i, 1]
                    a_loc[k] = 1.0 - (dx * dx + dy * dy) / (r[i] * r[i])
                    t_loc[k] = trans
                    trans *= 1.0 - a_loc[k]
                g0 = go_rgb[py, px, 0]
                g1 = go_rgb[py, px, 1]
                g2 = go_rgb[py, px, 2]
                ga = go_alpha[py, px]
                # rest_* hold the composite of everything behind fragment k,
                # so dL/da_k avoids dividing by (1 - a_k)
                r0 = r1 = r2 = racc = 0.0
                for k in range(m - 1, -1, -1):
                    e = sel[py, px, k]
                    i = ids[e]
                    a = a_loc[k]
                    tr = t_loc[k]
                    w = a * tr
                    gbuf[e, 3] += w * g0
                    gbuf[e, 4] += w * g1
                    gbuf[e, 5] += w * g2
                    da = tr * ((colors[i, 0] - r0) * g0 + (colors[i, 1] - r1) * g1
                               + (colors[i, 2] - r2) * g2) + tr * (1.0 - racc) * ga
                    dx = px - xy[i, 0]
                    dy = py - xy[i, 1]
                    inv_r2 = 1.0 / (r[i] * r[i])
                    gbuf[e, 0] += da * 2.0 * dx * inv_r2
                    gbuf[e, 1] += da * 2.0 * dy * inv_r2
                    gbuf[e, 2] += da * 2.0 * (dx * dx + dy * dy) * inv_r2 / r[i]
                    r0 = colors[i, 0] * a + (1.0 - a) * r0
                    r1 = colors[i, 1] * a + (1.0 - a) * r1
                    r2 = colors[i, 2] * a + (1.0 - a) * r2
                    racc = a + (1.0 - a) * racc
    return gbuf


@njit(cache=True)
def _backward_reduce(gbuf, ids, n_points):
    gxy = np.zeros((n_points, 2))
    gr = np.zeros((n_points, 1))
    gc = np.zeros((n_points, 3))
    for e in range(ids.shape[0]):
        i = ids[e]
        gxy[i, 0] += gbuf[e, 0]
        gxy[i, 1] += gbuf[e, 1]
        gr[i, 0] += gbuf[e, 2]
        gc[i, 0] += gbuf[e, 3]
        gc[i, 1] += gbuf[e, 4]
        gc[i, 2] += gbuf[e, 5]
    return gxy, gr, gc


def rasterize(xy, r_px, colors, depth, active, height, width, tile=TILE, n_z=N_Z):
    """Splat points into an (H, W, 4) RGBA tensor, differentiable in
    screen positions, projected radii, and colors.

    `depth` orders fragments but carries no gradient; `active` gates points
    (culled, pruned, or invisible ones never rasterize).
    """
    xy = xy if isinstance(xy, ad.Tensor) else ad.Tensor(xy)
    r_px = r_px if isinstance(r_px, ad.Tensor) else ad.Tensor(r_px)
    colors = colors if isinstance(colors, ad.Tensor) else ad.Tensor(colors)
    n = xy.shape[0]
    if r_px.shape != (n, 1) or colors.shape != (n, 3):
        raise ValueError(
            f"rasterize: xy {xy.shape}, r_px {r_px.shape}, colors {colors.shape} disagree")
    xy_v = np.ascontiguousarray(xy.values)
    r_v = np.ascontiguousarray(r_px.values[:, 0])
    c_v = np.ascontiguousarray(colors.values)
    depth = np.ascontiguousarray(np.asarray(depth, dtype=np.float64))
    active = np.ascontiguousarray(np.asarray(active, dtype=np.bool_))
    offsets, ids = _bin_points(xy_v, r_v, active, height, width, tile)
    rgb, alpha, sel, cnt = _forward(xy_v, r_v, depth, c_v, offsets, ids,
                                    height, width, tile, n_z)
    values = np.concatenate([rgb, alpha[..., None]], axis=2)

    def bwd(g):
        go_rgb = np.ascontiguousarray(g[..., :3])
        go_alpha = np.ascontiguousarray(g[..., 3])
        gbuf = _backward_fill(xy_v, r_v, c_v, offsets, ids, sel, cnt,
                              go_rgb, go_alpha, height, width, tile, n_z)
        return _backward_reduce(gbuf, ids, n)

    return ad.from_op(values, [xy, r_px, colors], bwd)


def render(points, colors, radius, cam, visible=None, tile=TILE, n_z=N_Z):
    """Project world points through `cam` and splat them; returns (H, W, 4)."""
    xy, r_px, depth, valid = cam_mod.project(points, cam, radius)
    active = valid if visible is None else (valid & np.asarray(visible, dtype=bool))
    return rasterize(xy, r_px, colors, depth, active, cam.height, cam.width,
                     tile=tile, n_z=n_z)


def reference_composite(xy, r, depth, colors, height, width, n_z=None):
    """Naive per-pixel compositing oracle; exhaustive unless n_z caps the list."""
    rgb = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    for py in range(height):
        for px in range(width):
            frags = []
            for i in range(xy.shape[0]):
                d2 = (px - xy[i, 0]) ** 2 + (py - xy[i, 1]) ** 2
                if r[i] > 0.0 and d2 < r[i] ** 2:
                    frags.append((depth[i], i, 1.0 - d2 / r[i] ** 2))
            frags.sort()
            if n_z is not None:
                frags = frags[:n_z]
            trans = 1.0
            for _, i, a in frags:
                rgb[py, px] += a * trans * colors[i]
                alpha[py, px] += a * trans
                trans *= 1.0 - a
    return rgb, alpha


@njit(cache=True)
def _scan_triangles(verts2d, faces, in_front, height, width):
    mask = np.zeros((height, width), np.bool_)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        if not (in_front[i0] and in_front[i1] and in_front[i2]):
            continue
        x0, y0 = verts2d[i0, 0], verts2d[i0, 1]
        x1, y1 = verts2d[i1, 0], verts2d[i1, 1]
        x2, y2 = verts2d[i2, 0], verts2d[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        px0 = max(int(np.floor(min(x0, min(x1, x2)))), 0)
        px1 = min(int(np.ceil(max(x0, max(x1, x2)))), width - 1)
        py0 = max(int(np.floor(min(y0, min(y1, y2)))), 0)
        py1 = min(int(np.ceil(max(y0, max(y1, y2)))), height - 1)
        s = 1.0 if area > 0.0 else -1.0
        for py in range(py0, py1 + 1):
            for px in range(px0, px1 + 1):
                w0 = s * ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py))
                w1 = s * ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py))
                w2 = s * ((x0 - px) * (y1 - py) - (x1 - px) * (y0 - py))
                if w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0:
                    mask[py, px] = True
    return mask


_DILATE_2PX = (lambda g: (g[0] ** 2 + g[1] ** 2) <= 4.0)(
    np.meshgrid(np.arange(-2, 3), np.arange(-2, 3), indexing="ij"))


def template_silhouette(vertices, faces, cam, dilate_px=2):
    """Binary foreground mask of the posed template mesh, dilated by a
    Euclidean disk of `dilate_px` pixels."""
    cam_pts = vertices @ cam.rotation.T + cam.translation
    in_front = cam_pts[:, 2] > cam_mod.NEAR_PLANE
    z = np.where(in_front, cam_pts[:, 2], 1.0)
    verts2d = np.stack([cam.fx * cam_pts[:, 0] / z + cam.cx,
                        cam.fy * cam_pts[:, 1] / z + cam.cy], axis=1)
    mask = _scan_triangles(np.ascontiguousarray(verts2d),
                           np.ascontiguousarray(faces.astype(np.int64)),
                           in_front, cam.height, cam.width)
    if dilate_px == 2:
        struct = _DILATE_2PX
    else:
        g = np.meshgrid(*[np.arange(-dilate_px, dilate_px + 1)] * 2, indexing="ij")
        struct = (g[0] ** 2 + g[1] ** 2) <= dilate_px ** 2
    return ndimage.binary_dilation(mask, structure=struct)


def mark_visibility(points, silhouette, cam):
    """True where a point's projected center lands on a silhouette pixel."""
    pts = np.asarray(points.values if isinstance(points, ad.Tensor) else points)
    cam_pts = pts @ cam.rotation.T + cam.translation
    in_front = cam_pts[:, 2] > cam_mod.NEAR_PLANE
    z = np.where(in_front, cam_pts[:, 2], 1.0)
    px = np.rint(cam.fx * cam_pts[:, 0] / z + cam.cx).astype(np.int64)
    py = np.rint(cam.fy * cam_pts[:, 1] / z + cam.cy).astype(np.int64)
    inside = in_front & (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
    out = np.zeros(pts.shape[0], dtype=bool)
    out[inside] = silhouette[py[inside], px[inside]]
    return out

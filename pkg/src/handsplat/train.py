"""Training loop: per-epoch upsampling, per-batch optimization, pruning.

Schedule (1-based epochs): upsample when epoch % upsample_every == 0 and
epoch <= upsample_until (default: geometry_freeze_epoch, which caps it);
prune at the end of every epoch up to the
freeze; after the freeze the point coordinates, count, and SDF are fixed and
only the appearance modules keep training.

Per batch, frames are processed one at a time on separate tapes and their
parameter gradients averaged in batch-index order (a deterministic reduction
that also bounds tape memory to a single frame); the geometry regularizer
gets its own tape per batch.  The logged batch loss equals the mean of the
per-frame totals, each of which includes the shared regularization term.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, fields

import numpy as np
import yaml

from . import autodiff as ad
from . import geometry as geo
from . import losses as ls
from . import renderer as rd
from . import rig as rg_mod
from .model import HandSplatModel
from .optim import Adam


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    geometry_learning_rate: float = None  # None: use learning_rate
    batch_size: int = 16
    upsample_every: int = 5
    upsample_until: int = None  # last upsample epoch; None: geometry_freeze_epoch
    geometry_freeze_epoch: int = 35
    seed: int = 0
    resolution: int = 256
    hidden: int = 128
    d_cross: int = 64
    sdf_hidden: int = 128
    sdf_depth: int = 4
    mask_blur: float = 0.0    # Gaussian sigma (px) applied inside the mask loss
    reg_samples: int = 0      # 0 = regularize at every canonical point
    prune_points: bool = True
    use_shading: bool = True
    eval_every: int = 10

    def __post_init__(self):
        if self.geometry_freeze_epoch > self.epochs:
            raise ValueError("geometry_freeze_epoch must not exceed epochs")
        if self.upsample_every < 1:
            raise ValueError("upsample_every must be >= 1")
        if (self.upsample_until is not None
                and self.upsample_until > self.geometry_freeze_epoch):
            raise ValueError("upsample_until must not exceed geometry_freeze_epoch")


def save_config(path, config, weights):
    data = {f.name: getattr(config, f.name) for f in fields(config)}
    data.update({f.name: getattr(weights, f.name) for f in fields(weights)})
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)


def load_config(path):
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    cfg_names = {f.name for f in fields(TrainConfig)}
    w_names = {f.name for f in fields(ls.LossWeights)}
    unknown = set(data) - cfg_names - w_names
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    cfg = TrainConfig(**{k: v for k, v in data.items() if k in cfg_names})
    weights = ls.LossWeights(**{k: v for k, v in data.items() if k in w_names})
    return cfg, weights


def frame_loss_parts(model, frame, pyramid, reg_value=None, mask_blur=0.0,
                     transforms=None, target_features=None):
    """Per-frame loss parts (on the active tape).  `reg_value` is the scalar
    regularizer carried in for logging symmetry; gradients for it come from
    its own tape.  `transforms` / `target_features` are optional per-frame
    caches (bone transforms and perceptual target features are constant per
    frame, so the training loop computes them once)."""
    rgba = model.render_frame(frame.pose, frame.camera, transforms=transforms)
    h, w = frame.camera.height, frame.camera.width
    flat = ad.reshape(rgba, (h * w, 4))
    rgb = ad.reshape(ad.gather_cols(flat, [0, 1, 2]), (h, w, 3))
    alpha = ad.reshape(ad.gather_cols(flat, [3]), (h, w))
    parts = {
        "rgb": ls.rgb_loss(rgb, frame.image, frame.mask),
        "vgg": ls.perceptual_loss(pyramid, rgb, frame.image,
                                  target_features=target_features),
        "mask": ls.mask_loss(alpha, frame.mask, blur_sigma=mask_blur),
    }
    if reg_value is not None:
        parts["reg"] = ad.Tensor(np.asarray(reg_value))
    return parts


def regularization_value_and_grads(model, weights, rng, reg_samples=0):
    """Backward the geometry regularizer on its own tape.

    Returns (scalar value, {param tensor id: grad}).  Optionally subsamples
    the canonical points so the cost stays flat as the set doubles.
    """
    coords = model.points.coords
    n = coords.shape[0]
    if reg_samples and reg_samples < n:
        idx = rng.choice(n, size=reg_samples, replace=False)
        omega_base = coords.values[idx]
    else:
        idx = None
        omega_base = coords.values
    omega = omega_base + rng.normal(scale=1.5 * model.points.radius,
                                    size=omega_base.shape)
    grads = {}
    with ad.Tape() as tape:
        sub = coords if idx is None else ad.gather_rows(coords, idx)
        sdf_t, eik_t = geo.regularization_loss(model.sdf, sub, omega, normalize=True)
        reg = ls.regularization_part(sdf_t, eik_t, weights)
        tape.backward(reg)
    # the scalar enters total_loss before its lambda_reg factor, so the
    # gradients carried out of this tape must include it
    for t in [coords] + list(model.sdf.parameters().values()):
        if t.grad is not None:
            grads[id(t)] = weights.lambda_reg * t.grad
        t.grad = None
    return float(reg.values), grads


@dataclass
class TrainResult:
    model: HandSplatModel
    rows: list
    checkpoint_path: str
    step_losses: list = None


def _accumulate(acc, params, scale):
    for t in params:
        if t.grad is not None:
            if id(t) in acc:
                acc[id(t)] += scale * t.grad
            else:
                acc[id(t)] = scale * t.grad
            t.grad = None


def train(samples, config, weights=None, out_dir=None, rig=None, model=None):
    """Run the full optimization; returns the model, metric rows, checkpoint.

    `samples` are FrameSamples; records tagged split == "val" are held out of
    optimization and drive the logged metrics.
    """
    weights = weights or ls.LossWeights()
    if model is None:
        if rig is None:
            raise ValueError("train needs either a model or a rig")
        model = HandSplatModel(rig, hidden=config.hidden, d_cross=config.d_cross,
                               sdf_hidden=config.sdf_hidden, sdf_depth=config.sdf_depth,
                               seed=config.seed, use_shading=config.use_shading)
    train_frames = [s for s in samples if s.split != "val"]
    val_frames = [s for s in samples if s.split == "val"]
    if not train_frames:
        raise ValueError("dataset has no training frames")
    pyramid = ls.ConvPyramid()
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    geo_lr = lr if config.geometry_learning_rate is None \
        else config.geometry_learning_rate
    geo_opt = Adam(model.geometry_parameters(), lr=geo_lr)
    app_opt = Adam(model.appearance_parameters(), lr=lr)
    # pose and camera are fixed per frame, so each frame's template silhouette
    # (the visibility test target) is computed once up front
    silhouettes = [rd.template_silhouette(model.posed_template_vertices(s.pose),
                                          model.rig.faces, s.camera)
                   for s in train_frames]
    # two more per-frame constants: bone transforms (pose-only) and the
    # perceptual features of the target image (targets never train)
    fk_cache = [rg_mod.forward_kinematics(model.rig, s.pose) for s in train_frames]
    feat_cache = [pyramid.features(ad.Tensor(np.asarray(s.image, dtype=np.float64)))
                  for s in train_frames]

    rows = []
    checkpoint_path = os.path.join(out_dir, "model.ckpt") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def save_checkpoint():
        if checkpoint_path:
            model.save(checkpoint_path)

    step = 0
    step_losses = []
    for epoch in range(1, config.epochs + 1):
        geometry_live = epoch <= config.geometry_freeze_epoch
        upsample_until = config.geometry_freeze_epoch \
            if config.upsample_until is None else config.upsample_until
        if (geometry_live and epoch <= upsample_until
                and epoch % config.upsample_every == 0):
            model.set_points(geo.upsample(model.points, rng))
            geo_opt = Adam(model.geometry_parameters(), lr=geo_lr)
        model.points.visible[:] = False
        model.canonical_normals(refresh=True)

        order = rng.permutation(len(train_frames))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch_ids = order[start:start + config.batch_size]
            batch = [train_frames[i] for i in batch_ids]
            try:
                reg_value, acc = regularization_value_and_grads(
                    model, weights, rng, config.reg_samples)
                frame_totals = []
                all_params = list({**model.geometry_parameters(),
                                   **model.appearance_parameters()}.values())
                for frame, b in zip(batch, batch_ids):
                    with ad.Tape() as tape:
                        parts = frame_loss_parts(model, frame, pyramid, reg_value,
                                                 mask_blur=config.mask_blur,
                                                 transforms=fk_cache[b],
                                                 target_features=feat_cache[b])
                        total = ls.total_loss(parts, weights)
                        tape.backward(total)
                    frame_totals.append(float(total.values))
                    _accumulate(acc, all_params, 1.0 / len(batch))
            except FloatingPointError as exc:
                save_checkpoint()
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}; "
                    f"last good checkpoint kept at {checkpoint_path}") from exc
            for t in all_params:
                t.grad = acc.get(id(t))
            if geometry_live:
                geo_opt.step()
            app_opt.step()
            for t in all_params:
                t.grad = None
            model.canonical_normals(refresh=True)
            step += 1
            epoch_losses.append(np.mean(frame_totals))
            step_losses.append(float(np.mean(frame_totals)))
            for frame, b in zip(batch, batch_ids):
                model.points.visible |= rd.mark_visibility(
                    model.deformed_coords(frame.pose, transforms=fk_cache[b]),
                    silhouettes[b], frame.camera)

        if geometry_live and config.prune_points:
            before = model.points.count
            model.set_points(geo.prune(model.points))
            if model.points.count != before:
                geo_opt = Adam(model.geometry_parameters(), lr=geo_lr)

        row = {"epoch": epoch, "step": step,
               "loss": float(np.mean(epoch_losses)),
               "n_points": model.points.count,
               "radius": model.points.radius,
               **{f.name: getattr(weights, f.name) for f in fields(weights)},
               "psnr": "", "ssim": "", "iou": "", "ms_per_frame": ""}
        if val_frames and (epoch % config.eval_every == 0 or epoch == config.epochs):
            row.update(evaluate(model, val_frames))
        rows.append(row)

    save_checkpoint()
    if out_dir:
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows)
    return TrainResult(model, rows, checkpoint_path, step_losses)


def evaluate(model, frames):
    """Mean PSNR/SSIM/IoU over frames, plus render wall time per frame."""
    vals = {"psnr": [], "ssim": [], "iou": []}
    t0 = time.perf_counter()
    for frame in frames:
        rgba = model.render_frame(frame.pose, frame.camera).values
        m = ls.metrics(np.clip(rgba[..., :3], 0, 1), frame.image,
                       rgba[..., 3], frame.mask)
        for k in vals:
            vals[k].append(m[k])
    ms = (time.perf_counter() - t0) * 1000.0 / len(frames)
    out = {k: float(np.mean(v)) for k, v in vals.items()}
    out["ms_per_frame"] = ms
    return out


def write_metrics_csv(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

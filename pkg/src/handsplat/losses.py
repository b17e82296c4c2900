"""Training losses and image metrics.

The photometric loss is a masked mean absolute error, the silhouette loss an
MAE between the rendered alpha map and the ground-truth mask (optionally
Gaussian-blurred to widen its gradient support), and the
structural term compares multi-scale features from a frozen, seeded random
convolutional pyramid (a stand-in for a pretrained feature extractor that
keeps the multi-scale loss plumbing without any licensed weights).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.metrics import structural_similarity

from . import autodiff as ad

PYRAMID_SEED = 0x5EED


@dataclass
class LossWeights:
    lambda_rgb: float = 1.0
    lambda_mask: float = 1.0
    lambda_vgg: float = 0.1
    lambda_reg: float = 1.0
    lambda_sdf: float = 1.0
    lambda_eik: float = 0.1

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{name} must be nonnegative, got {v}")


def rgb_loss(rendered, target, mask):
    """Mean absolute color error over foreground pixels only."""
    rendered = rendered if isinstance(rendered, ad.Tensor) else ad.Tensor(rendered)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"rgb_loss: rendered {rendered.shape} vs target {target.shape}")
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        warnings.warn("rgb_loss: empty foreground mask, loss defined as 0")
        return ad.Tensor(np.zeros(()))
    diff = ad.absolute(rendered - ad.Tensor(target)) * ad.Tensor(mask[..., None])
    return ad.tsum(diff) * (1.0 / (3.0 * count))


def gaussian_blur(image, sigma):
    """Differentiable Gaussian blur (zero-padded borders).

    The kernel is symmetric and fixed, so the adjoint of the forward
    convolution is the same convolution; the backward pass reuses it.
    """
    image = image if isinstance(image, ad.Tensor) else ad.Tensor(image)
    blurred = ndimage.gaussian_filter(image.values, sigma, mode="constant")

    def bwd(g):
        return [ndimage.gaussian_filter(np.asarray(g, dtype=np.float64),
                                        sigma, mode="constant")]

    return ad.from_op(blurred, [image], bwd)


def mask_loss(alpha, target_mask, blur_sigma=0.0):
    """Mean absolute silhouette error over all pixels.

    With blur_sigma > 0 both the rendered alpha and the target mask are
    Gaussian-blurred first.  Exact agreement still gives zero loss, but the
    blur spreads silhouette mismatch into neighbouring covered pixels, so
    point positions receive a gradient even where the render has no
    coverage at all (a bare alpha MAE is flat there).
    """
    alpha = alpha if isinstance(alpha, ad.Tensor) else ad.Tensor(alpha)
    target = np.asarray(target_mask, dtype=np.float64)
    if blur_sigma > 0:
        alpha = gaussian_blur(alpha, blur_sigma)
        target = ndimage.gaussian_filter(target, blur_sigma, mode="constant")
    return ad.tmean(ad.absolute(alpha - ad.Tensor(target)))


class ConvPyramid:
    """Frozen 3-stage stride-2 conv feature extractor with seeded weights.

    Each stage is a valid 3x3 convolution (no padding) followed by ReLU;
    channels grow 3 -> 8 -> 16 -> 32.  Weights are fixed at construction and
    never trained; only the images being compared carry gradients.
    """

    CHANNELS = (8, 16, 32)

    def __init__(self, seed=PYRAMID_SEED):
        rng = np.random.default_rng(seed)
        self.weights = []
        c_in = 3
        for c_out in self.CHANNELS:
            w = rng.normal(0.0, np.sqrt(2.0 / (9 * c_in)), size=(9 * c_in, c_out))
            self.weights.append(ad.Tensor(w))
            c_in = c_out
        self._idx_cache = {}

    def _patch_rows(self, h, w):
        # row indices into the flattened (h*w, c) image: 9 taps per output pixel
        key = (h, w)
        if key not in self._idx_cache:
            oy = np.arange(0, h - 2, 2)
            ox = np.arange(0, w - 2, 2)
            base = (oy[:, None] * w + ox[None, :]).ravel()
            taps = (np.arange(3)[:, None] * w + np.arange(3)[None, :]).ravel()
            self._idx_cache[key] = ((base[:, None] + taps[None, :]).ravel(),
                                    len(oy), len(ox))
        return self._idx_cache[key]

    def features(self, image):
        image = image if isinstance(image, ad.Tensor) else ad.Tensor(image)
        h, w, c = image.shape
        x = ad.reshape(image, (h * w, c))
        outs = []
        for wmat in self.weights:
            idx, oh, ow = self._patch_rows(h, w)
            if oh < 1 or ow < 1:
                raise ValueError(f"image too small for conv pyramid at stage size {h}x{w}")
            patches = ad.reshape(ad.gather_rows(x, idx), (oh * ow, -1))
            x = ad.relu(ad.matmul(patches, wmat))
            outs.append(x)
            h, w = oh, ow
        return outs


def perceptual_loss(extractor, image, target, target_features=None):
    """Sum over pyramid stages of mean absolute feature differences.

    `target_features` short-circuits feature extraction on the target (the
    target never trains, so its features can be computed once and reused).
    """
    if target_features is None:
        target = target if isinstance(target, ad.Tensor) else ad.Tensor(np.asarray(target, float))
        target_features = extractor.features(target)
    total = None
    for fa, fb in zip(extractor.features(image), target_features):
        term = ad.tmean(ad.absolute(fa - fb))
        total = term if total is None else total + term
    return total


def regularization_part(sdf_term, eik_term, weights):
    """Geometry regularizer: weighted surface-adherence plus eikonal terms."""
    return sdf_term * weights.lambda_sdf + eik_term * weights.lambda_eik


def total_loss(parts, weights):
    """Weighted sum of the loss parts {rgb, vgg, mask, reg}.

    Aborts the step on any non-finite part, naming it.
    """
    for name, part in parts.items():
        v = part.values if isinstance(part, ad.Tensor) else np.asarray(part)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"total_loss: non-finite loss part '{name}' = {v}")
    lams = {"rgb": weights.lambda_rgb, "vgg": weights.lambda_vgg,
            "mask": weights.lambda_mask, "reg": weights.lambda_reg}
    unknown = set(parts) - set(lams)
    if unknown:
        raise ValueError(f"total_loss: unknown loss parts {sorted(unknown)}")
    total = None
    for name, part in parts.items():
        part = part if isinstance(part, ad.Tensor) else ad.Tensor(np.asarray(part, float))
        term = part * lams[name]
        total = term if total is None else total + term
    if total is None:
        raise ValueError("total_loss: no loss parts given")
    return total


# ------------------------------------------------------------------ metrics

PSNR_CAP = 99.0


def psnr(image, target):
    """Peak signal-to-noise ratio on [0, 1] images, capped at 99 dB."""
    mse = float(np.mean((np.asarray(image, float) - np.asarray(target, float)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def ssim(image, target):
    """Structural similarity with an 11x11 Gaussian window, sigma 1.5."""
    return float(structural_similarity(
        np.asarray(image, float), np.asarray(target, float),
        channel_axis=2 if np.asarray(image).ndim == 3 else None,
        data_range=1.0, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False, win_size=11))


def iou(alpha, target_mask, threshold=0.5):
    """Silhouette intersection over union; alpha thresholded at 0.5."""
    a = np.asarray(alpha) >= threshold
    b = np.asarray(target_mask) >= threshold
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def metrics(image, target, alpha, target_mask):
    return {"psnr": psnr(image, target), "ssim": ssim(image, target),
            "iou": iou(alpha, target_mask)}

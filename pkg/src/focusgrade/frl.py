"""Focus-oriented representation learning.

Per-pixel contribution maps are gradient-weighted activations of the cached
patch-token grid, upsampled to image resolution and min-max normalized.
Thresholding their patch means splits an image into a positive (diagnostic)
and a negative (background) region; the three-region classification loss and
the triplet consistency loss then push the encoder to ground its decision in
the positive region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import pnm
from .autodiff import Graph, Tensor
from .model import Model


@dataclass
class ContributionMap:
    """Pixel scores in [0, 1] plus the channel weights that produced them."""

    scores: np.ndarray  # [H, W]
    alpha: np.ndarray  # [d]
    target_class: int


@dataclass
class PatchMask:
    mask: np.ndarray  # [Ph, Pw] bool
    theta: float
    patch_size: int


@dataclass
class RegionTriplet:
    x_glb: np.ndarray
    x_pos: np.ndarray
    x_neg: np.ndarray


def bilinear_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample a 2-D map to (out_h, out_w), sampling at pixel centers."""
    in_h, in_w = grid.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def _normalize(scores: np.ndarray) -> np.ndarray:
    lo, hi = scores.min(), scores.max()
    if hi <= lo:  # an identically-zero map stays zero
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


def cam_from_grid(token_grid: Tensor, out_h: int, out_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Build (alpha, scores) from a token grid whose .grad is populated.

    alpha sums the grid gradient over both spatial axes per channel; the raw
    map is the rectified channel-weighted activation, upsampled and
    normalized. Supports [Ph, Pw, d] or a batched [B, Ph, Pw, d] grid.
    """
    grad = token_grid.grad
    if grad is None:
        raise ValueError("token grid has no gradient; run backward first")
    vals = token_grid.data
    if vals.ndim == 3:
        alpha = grad.sum(axis=(0, 1))
        raw = np.maximum((vals * alpha).sum(axis=-1), 0.0)
        return alpha, _normalize(bilinear_upsample(raw, out_h, out_w))
    alpha = grad.sum(axis=(1, 2))  # [B, d]
    scores = np.stack(
        [
            _normalize(
                bilinear_upsample(
                    np.maximum((vals[b] * alpha[b]).sum(axis=-1), 0.0), out_h, out_w
                )
            )
            for b in range(vals.shape[0])
        ]
    )
    return alpha, scores


def contribution_map(model: Model, image: np.ndarray, target_class: int) -> ContributionMap:
    """Score each pixel's contribution to the target-class logit.

    Runs one private forward/backward; the result is detached, so nothing
    here leaks gradients into a later training pass.
    """
    cfg = model.config
    if not 0 <= target_class < cfg.num_grades:
        raise ValueError(
            f"target class {target_class} outside [0, {cfg.num_grades})"
        )
    graph = Graph()
    with graph:
        cache = model.forward(np.asarray(image, np.float32), attribution=True)
        score = ad.slice_(cache.logits, target_class)
        ad.backward(score, graph)
    alpha, scores = cam_from_grid(cache.token_grid, cfg.image_h, cfg.image_w)
    return ContributionMap(scores=scores, alpha=alpha, target_class=target_class)


def contribution_maps_batch(
    model: Model, images: np.ndarray, targets: np.ndarray
) -> list[ContributionMap]:
    """Batched contribution maps, identical to per-image calls.

    One backward from the summed per-sample target logits suffices: sample
    b's token grid only ever feeds sample b's logit row.
    """
    cfg = model.config
    targets = np.asarray(targets)
    if targets.min() < 0 or targets.max() >= cfg.num_grades:
        raise ValueError(f"target classes {targets} outside [0, {cfg.num_grades})")
    onehot = np.zeros((len(targets), cfg.num_classes), np.float32)
    onehot[np.arange(len(targets)), targets] = 1.0
    graph = Graph()
    with graph:
        cache = model.forward(np.asarray(images, np.float32), attribution=True)
        score = ad.reduce_sum(ad.mul(cache.logits, Tensor(onehot)))
        ad.backward(score, graph)
    alpha, scores = cam_from_grid(cache.token_grid, cfg.image_h, cfg.image_w)
    return [
        ContributionMap(scores=scores[b], alpha=alpha[b], target_class=int(targets[b]))
        for b in range(len(targets))
    ]


def patch_mask(scores: np.ndarray, patch_size: int, theta: float = 0.5) -> PatchMask:
    """Threshold patch-mean contribution scores; repair degenerate masks.

    An all-false mask gets its highest-mean patch forced positive and an
    all-true mask its lowest-mean patch forced negative, ties going to the
    smallest row-major index, so both regions are always inhabited.
    """
    h, w = scores.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"map {scores.shape} not divisible by patch {patch_size}")
    ph, pw = h // patch_size, w // patch_size
    means = scores.reshape(ph, patch_size, pw, patch_size).mean(axis=(1, 3))
    mask = means > theta
    if not mask.any():
        mask.flat[int(np.argmax(means))] = True
    elif mask.all():
        mask.flat[int(np.argmin(means))] = False
    return PatchMask(mask=mask, theta=theta, patch_size=patch_size)


def split_regions(image: np.ndarray, mask: PatchMask) -> RegionTriplet:
    """Zero pixels by patch membership; x_pos + x_neg reconstructs the image."""
    h, w = image.shape[:2]
    p = mask.patch_size
    if mask.mask.shape != (h // p, w // p):
        raise ValueError(
            f"mask grid {mask.mask.shape} does not tile image {image.shape[:2]} "
            f"with patch {p}"
        )
    pix = np.repeat(np.repeat(mask.mask, p, axis=0), p, axis=1)
    pix = pix.astype(image.dtype)[..., None] if image.ndim == 3 else pix.astype(image.dtype)
    return RegionTriplet(x_glb=image, x_pos=image * pix, x_neg=image * (1 - pix))


def classification_loss(
    logits_glb: Tensor,
    logits_pos: Tensor,
    logits_neg: Tensor,
    labels: np.ndarray,
    background_class: int,
) -> Tensor:
    """Three-region loss: global and positive toward the grade label, the
    negative region toward the reserved background class."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= background_class):
        raise ValueError(
            f"grade labels {labels} outside [0, {background_class})"
        )
    bg = np.full(len(labels), background_class)
    return (
        ad.cross_entropy(logits_glb, labels)
        + ad.cross_entropy(logits_pos, labels)
        + ad.cross_entropy(logits_neg, bg)
    )


def consistency_loss(v_glb: Tensor, v_pos: Tensor, v_neg: Tensor, tau: float) -> Tensor:
    """Pull positive features toward global ones, push negatives away.

    Per sample, with phi(a, b) = exp(cos(a, b) / tau), minimizes
    -log(phi(glb, pos) / (phi(glb, pos) + phi(glb, neg) + phi(pos, neg))).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if v_glb.ndim != 2:
        raise ValueError(f"expected [B, d] features, got shape {v_glb.shape}")
    inv = 1.0 / tau
    c_gp = ad.cosine_similarity(v_glb, v_pos, axis=1) * inv
    c_gn = ad.cosine_similarity(v_glb, v_neg, axis=1) * inv
    c_pn = ad.cosine_similarity(v_pos, v_neg, axis=1) * inv
    denom = ad.exp(c_gp) + ad.exp(c_gn) + ad.exp(c_pn)
    return ad.reduce_mean(ad.log(denom) - c_gp)


def save_cam_pgm(path, scores: np.ndarray) -> None:
    """Contribution map as 8-bit grayscale, round(255 * score)."""
    pnm.write_pgm(path, np.rint(255.0 * np.clip(scores, 0.0, 1.0)))


def save_mask_overlay_ppm(path, image: np.ndarray, mask: PatchMask) -> None:
    """Image with positive patches tinted toward red, as binary PPM."""
    p = mask.patch_size
    pix = np.repeat(np.repeat(mask.mask, p, axis=0), p, axis=1)
    rgb = np.clip(np.asarray(image, np.float64), 0.0, 1.0).copy()
    tint = np.array([1.0, 0.1, 0.1])
    rgb[pix] = 0.55 * rgb[pix] + 0.45 * tint
    pnm.write_ppm(path, np.rint(255.0 * rgb))

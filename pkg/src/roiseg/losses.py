"""Dice-based objectives: global localization loss, contour-aware local loss,
weight decay, and the combined total.

Dice loss uses a symmetric smoothing term:

    L_d(P, G) = 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)

Putting eps in both numerator and denominator makes the empty-empty case
(P = G = 0) come out at exactly 0 instead of -1 and bounds the loss to
[0, 1]; the closed-form gradient below is derived from this smoothed form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .ops import mul, s_add, s_affine, s_div, sum_all, sum_sq
from .volume import Scalar, ShapeError, Volume

EPSILON = 1e-4
LAMBDA_C = 0.5
BETA = 1e-4


@dataclass
class LossTerms:
    l_global: float
    l_region: float
    l_contour: float
    l_weight_decay: float
    l_total: float
    lambda_c: float = LAMBDA_C
    beta: float = BETA
    epsilon: float = EPSILON

    def to_json(self):
        return {k: float(getattr(self, k)) for k in
                ("l_global", "l_region", "l_contour", "l_weight_decay", "l_total",
                 "lambda_c", "beta", "epsilon")}


def dice_loss(p: Volume, g: Volume, epsilon=EPSILON) -> Scalar:
    """Smoothed soft Dice loss, taped for differentiation."""
    if p.shape != g.shape:
        raise ShapeError(f"dice_loss needs identical shapes, got {p.shape} and {g.shape}")
    num = s_affine(sum_all(mul(p, g)), 2.0, epsilon)
    den = s_affine(s_add(sum_all(p), sum_all(g)), 1.0, epsilon)
    return s_affine(s_div(num, den), -1.0, 1.0)


def dice_grad(p: Volume, g: Volume, epsilon=EPSILON) -> Volume:
    """Closed-form dL/dp of dice_loss, for cross-checking the tape.

    With N = 2*sum(pg) + eps and D = sum(p) + sum(g) + eps:
        dL/dp_k = (N - 2 g_k D) / D^2
    """
    if p.shape != g.shape:
        raise ShapeError(f"dice_grad needs identical shapes, got {p.shape} and {g.shape}")
    pd = p.data.astype(np.float64)
    gd = g.data.astype(np.float64)
    n = 2.0 * (pd * gd).sum() + epsilon
    d = pd.sum() + gd.sum() + epsilon
    return Volume(((n - 2.0 * gd * d) / (d * d)).astype(np.float32), spacing=p.spacing)


def global_loss(locator_prob: Volume, downsampled_gt: Volume, epsilon=EPSILON) -> Scalar:
    """Dice loss of the coarse locator against the pooled annotation."""
    if locator_prob.spatial != downsampled_gt.spatial:
        raise ShapeError(f"locator at {locator_prob.spatial} vs annotation at "
                         f"{downsampled_gt.spatial}; both must be at the coarse level")
    return dice_loss(locator_prob, downsampled_gt, epsilon)


def local_loss(region_prob, contour_prob, region_gt, contour_gt,
               lambda_c=LAMBDA_C, epsilon=EPSILON):
    """Region Dice + lambda_c * contour Dice inside one RoI.

    Returns (total, region_term, contour_term) as taped Scalars so the two
    components can be logged separately.
    """
    l_region = dice_loss(region_prob, region_gt, epsilon)
    l_contour = dice_loss(contour_prob, contour_gt, epsilon)
    total = s_add(l_region, s_affine(l_contour, lambda_c, 0.0))
    return total, l_region, l_contour


def weight_decay(conv_weights, beta=BETA) -> Scalar:
    """beta * sum of squared convolution-kernel entries, taped."""
    total = None
    for w in conv_weights:
        sq = sum_sq(w)
        total = sq if total is None else s_add(total, sq)
    if total is None:
        return Scalar(0.0)
    return s_affine(total, beta, 0.0)


def total_loss(l_global: Scalar, l_region: Scalar, l_contour: Scalar, conv_weights,
               lambda_c=LAMBDA_C, beta=BETA, epsilon=EPSILON):
    """Combined objective and its logged terms.

    total = l_global + l_region + lambda_c * l_contour + beta * ||W||^2
    where W ranges over convolution kernels only (norm affines and biases
    are not decayed).
    """
    decay = weight_decay(conv_weights, beta)
    total = s_add(s_add(l_global, l_region), s_affine(l_contour, lambda_c, 0.0))
    total = s_add(total, decay)
    terms = LossTerms(float(l_global.value), float(l_region.value), float(l_contour.value),
                      float(decay.value), float(total.value),
                      lambda_c=lambda_c, beta=beta, epsilon=epsilon)
    return total, terms


def make_contour_labels(region_gt: Volume) -> Volume:
    """One-voxel-thick contour: the mask minus its 6-connected erosion.

    Voxels outside the array count as background, so regions touching the
    border keep their border faces as contour.
    """
    mask = region_gt.arr3() > 0.5
    cross = ndimage.generate_binary_structure(3, 1)
    core = ndimage.binary_erosion(mask, structure=cross, border_value=0)
    return Volume((mask & ~core).astype(np.float32)[None, None], spacing=region_gt.spacing)


def downsample_labels(gt: Volume, factor=(2, 4, 4)) -> Volume:
    """Max-pool a binary mask by an integer factor per axis: a coarse cell is
    foreground if it covers any foreground voxel, which keeps lesions a
    couple of voxels wide visible to the locator."""
    m = gt.arr3()
    fd, fh, fw = factor
    d, h, w = m.shape
    if d % fd or h % fh or w % fw:
        raise ShapeError(f"mask extent {m.shape} not divisible by factor {factor}")
    coarse = m.reshape(d // fd, fd, h // fh, fh, w // fw, fw).max(axis=(1, 3, 5))
    return Volume(coarse[None, None], spacing=tuple(s * f for s, f in zip(gt.spacing, factor)))

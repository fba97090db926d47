"""Body masking, in-body normalization, resampling, cropping, augmentation.

Everything here operates on single-channel volumes.  Geometric resampling is
corner-aligned (index 0 maps to index 0) with clamped borders: trilinear for
images, nearest-neighbor for label masks so labels stay binary.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .roi import BBox3
from .volume import Volume

POOL_DIVISOR = (2, 4, 4)   # cumulative pooling stride of the network


@dataclass
class OtsuResult:
    threshold: float
    degenerate: bool = False

    def __float__(self):
        return float(self.threshold)


@dataclass
class BodyMask:
    mask: Volume          # binary {0,1} f32
    bbox: BBox3           # tight box of the mask, level I
    n_mask: int


@dataclass
class AugmentationConfig:
    scale: tuple = (0.9, 1.1)
    flip_x_prob: float = 0.5
    jitter: tuple = (0.9, 1.1)
    roi_shift: float = 0.5    # RoI-center translation range, fraction of box size
    seed: int | None = None


@dataclass
class CropRecord:
    bbox: BBox3               # body box in original voxel coordinates
    pad_lo: tuple             # zero padding added after cropping (z, y, x)
    pad_hi: tuple
    original_shape: tuple     # (d, h, w)


def otsu_threshold(volume, bins=256) -> OtsuResult:
    """Threshold maximizing between-class variance over a 256-bin histogram."""
    v = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    v = v.astype(np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return OtsuResult(lo, degenerate=True)
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    hist = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(hist)[:-1]                      # class-0 weight for split k = 1..bins-1
    w1 = hist.sum() - w0
    m0 = np.cumsum(hist * centers)[:-1]
    m1 = (hist * centers).sum() - m0
    valid = (w0 > 0) & (w1 > 0)
    score = np.zeros(bins - 1)
    score[valid] = w0[valid] * w1[valid] * (m0[valid] / w0[valid] - m1[valid] / w1[valid]) ** 2
    k = int(np.argmax(score)) + 1                  # ties resolve to the lowest bin
    return OtsuResult(float(edges[k]))


def body_mask(volume: Volume) -> BodyMask:
    """Otsu threshold, keep the largest 26-connected component, close holes.

    Raises ValueError when nothing exceeds the threshold.
    """
    arr = volume.arr3()
    thr = otsu_threshold(volume)
    fg = arr > thr.threshold
    if not fg.any():
        raise ValueError("no foreground above the body threshold")
    labels, n = ndimage.label(fg, structure=np.ones((3, 3, 3), dtype=bool))
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    keep = labels == int(np.argmax(counts))
    cross = ndimage.generate_binary_structure(3, 1)
    closed = ndimage.binary_closing(keep, structure=cross)
    closed |= keep                                 # closing must never remove voxels
    coords = np.argwhere(closed)
    start = tuple(int(c) for c in coords.min(axis=0))
    stop = tuple(int(c) for c in coords.max(axis=0) + 1)
    bbox = BBox3(start, tuple(b - a for a, b in zip(start, stop)), "I")
    out = Volume(closed.astype(np.float32)[None, None], spacing=volume.spacing)
    return BodyMask(out, bbox, int(closed.sum()))


def normalize_in_body(volume: Volume, mask: BodyMask) -> Volume:
    """Standardize intensities by the mean/std over body voxels only; the same
    affine map is applied everywhere (background included)."""
    arr = volume.arr3().astype(np.float64)
    m = mask.mask.arr3() > 0.5
    if m.sum() < 2:
        raise ValueError(f"body mask has {int(m.sum())} voxels; need at least 2")
    mean = arr[m].mean()
    std = arr[m].std()
    if std == 0.0:
        warnings.warn("constant in-body intensities; emitting zeros", stacklevel=2)
        return Volume(np.zeros(volume.shape, np.float32), spacing=volume.spacing)
    return Volume(((arr - mean) / std).astype(np.float32)[None, None], spacing=volume.spacing)


def _grid_1d(out_n, ratio):
    """Fractional source coordinates for one axis, corner-aligned."""
    return np.arange(out_n, dtype=np.float64) * ratio


def _gather_trilinear(arr, fz, fy, fx):
    d, h, w = arr.shape
    z0 = np.floor(fz).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x0 = np.floor(fx).astype(np.int64)
    tz, ty, tx = fz - z0, fy - y0, fx - x0
    z0c, z1c = np.clip(z0, 0, d - 1), np.clip(z0 + 1, 0, d - 1)
    y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    x0c, x1c = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    tz = tz[:, None, None]
    ty = ty[None, :, None]
    tx = tx[None, None, :]
    out = np.zeros((len(fz), len(fy), len(fx)), np.float64)
    for zc, wz in ((z0c, 1 - tz), (z1c, tz)):
        for yc, wy in ((y0c, 1 - ty), (y1c, ty)):
            for xc, wx in ((x0c, 1 - tx), (x1c, tx)):
                out += (wz * wy * wx) * arr[np.ix_(zc, yc, xc)]
    return out


def _gather_nearest(arr, fz, fy, fx):
    d, h, w = arr.shape
    zi = np.clip(np.floor(fz + 0.5).astype(np.int64), 0, d - 1)
    yi = np.clip(np.floor(fy + 0.5).astype(np.int64), 0, h - 1)
    xi = np.clip(np.floor(fx + 0.5).astype(np.int64), 0, w - 1)
    return arr[np.ix_(zi, yi, xi)]


def resample(volume: Volume, target_spacing, mode="trilinear") -> Volume:
    """Resample to a new voxel spacing; output extent = round(extent * ratio)."""
    if any(s <= 0 for s in target_spacing):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    arr = volume.arr3()
    out_shape = tuple(max(1, int(round(n * s / t)))
                      for n, s, t in zip(arr.shape, volume.spacing, target_spacing))
    grids = [_grid_1d(n, t / s) for n, s, t in zip(out_shape, volume.spacing, target_spacing)]
    if mode == "trilinear":
        out = _gather_trilinear(arr.astype(np.float64), *grids)
    elif mode == "nearest":
        out = _gather_nearest(arr, *grids)
    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    return Volume(out.astype(np.float32)[None, None], spacing=tuple(float(t) for t in target_spacing))


def crop_to_body(volume: Volume, body: BodyMask) -> tuple:
    """Crop to the body's tight box, then zero-pad so every axis divides by the
    cumulative pooling stride.  Returns (cropped, CropRecord) for exact un-crop."""
    bbox = body.bbox
    z, y, x = bbox.start
    d, h, w = bbox.size
    arr = volume.arr3()[z:z + d, y:y + h, x:x + w]
    pad_lo, pad_hi = [], []
    for sz, div in zip(arr.shape, POOL_DIVISOR):
        need = (-sz) % div
        pad_lo.append(need // 2)
        pad_hi.append(need - need // 2)
    arr = np.pad(arr, tuple(zip(pad_lo, pad_hi)))
    rec = CropRecord(bbox, tuple(pad_lo), tuple(pad_hi), volume.spatial)
    return Volume(arr[None, None], spacing=volume.spacing), rec


def apply_crop(volume: Volume, rec: CropRecord) -> Volume:
    """Apply a previously computed crop (e.g. to the label volume)."""
    z, y, x = rec.bbox.start
    d, h, w = rec.bbox.size
    arr = volume.arr3()[z:z + d, y:y + h, x:x + w]
    arr = np.pad(arr, tuple(zip(rec.pad_lo, rec.pad_hi)))
    return Volume(arr[None, None], spacing=volume.spacing)


def uncrop(volume: Volume, rec: CropRecord) -> Volume:
    """Paste a cropped volume back into a zero canvas of the original extent."""
    arr = volume.arr3()
    arr = arr[tuple(slice(lo, sz - hi) for lo, hi, sz in zip(rec.pad_lo, rec.pad_hi, arr.shape))]
    out = np.zeros(rec.original_shape, np.float32)
    z, y, x = rec.bbox.start
    d, h, w = rec.bbox.size
    out[z:z + d, y:y + h, x:x + w] = arr
    return Volume(out[None, None], spacing=volume.spacing)


def _zoom(arr, scale, mode):
    """Isotropic zoom about the volume center, same output extent."""
    grids = []
    for n in arr.shape:
        center = (n - 1) / 2.0
        grids.append(center + (np.arange(n, dtype=np.float64) - center) / scale)
    if mode == "trilinear":
        return _gather_trilinear(arr.astype(np.float64), *grids).astype(np.float32)
    return _gather_nearest(arr, *grids)


def augment(image: Volume, region_gt: Volume, cfg: AugmentationConfig, rng) -> tuple:
    """Scale, X-flip and intensity-jitter one image/label pair.

    The same geometric map hits both volumes (trilinear vs nearest); jitter
    multiplies the image only.  All three draws happen unconditionally so
    the rng stream is identical no matter which transforms end up active.
    """
    scale = float(rng.uniform(*cfg.scale))
    flip = bool(rng.random() < cfg.flip_x_prob)
    jitter = float(rng.uniform(*cfg.jitter))
    img = image.arr3()
    gt = region_gt.arr3()
    if scale != 1.0:
        img = _zoom(img, scale, "trilinear")
        gt = _zoom(gt, scale, "nearest")
    if flip:
        img = img[:, :, ::-1]
        gt = gt[:, :, ::-1]
    if jitter != 1.0:
        img = img * np.float32(jitter)
    return (Volume(np.ascontiguousarray(img, np.float32)[None, None], spacing=image.spacing),
            Volume(np.ascontiguousarray(gt, np.float32)[None, None], spacing=region_gt.spacing))

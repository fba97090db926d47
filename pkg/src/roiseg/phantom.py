"""Synthetic abdominal-style phantoms: a bright ellipsoidal body on a dark
noisy background, with one or two small bright lesions inside the body.

These stand in for volumetric scans: they exercise body masking, in-body
normalization, heavy foreground/background class imbalance (lesions occupy
a fraction of a percent of the volume) and multi-instance localization.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import make_contour_labels
from .volfile import save_volume
from .volume import Volume

MAX_PLACEMENT_TRIES = 50


@dataclass
class PhantomSpec:
    extent: tuple = (30, 120, 120)          # (d, h, w) voxels
    spacing: tuple = (1.0, 1.0, 1.0)
    body_radii: tuple = (11.0, 46.0, 46.0)  # ellipsoid semi-axes, voxels
    body_intensity: float = 1.0
    background_intensity: float = 0.05
    noise_sigma: float = 0.08
    lesion_radii_range: tuple = ((2.0, 3.5), (4.0, 9.0), (4.0, 9.0))  # per-axis (lo, hi)
    lesion_offset: float = 0.9              # added to body intensity inside a lesion
    lesion_boundary: float = 0.7            # soft falloff width, voxels
    second_lesion_prob: float = 0.35
    min_fraction: float = 1e-4              # lesion voxels / volume, lower bound
    max_fraction: float = 0.02
    seed: int = 0

    def to_json(self):
        return {"extent": list(self.extent), "spacing": list(self.spacing),
                "body_radii": list(self.body_radii), "body_intensity": self.body_intensity,
                "background_intensity": self.background_intensity,
                "noise_sigma": self.noise_sigma,
                "lesion_radii_range": [list(r) for r in self.lesion_radii_range],
                "lesion_offset": self.lesion_offset, "lesion_boundary": self.lesion_boundary,
                "second_lesion_prob": self.second_lesion_prob,
                "min_fraction": self.min_fraction, "max_fraction": self.max_fraction,
                "seed": self.seed}


def _ellipsoid_field(shape, center, radii):
    """Normalized radial distance field: <= 1 inside the ellipsoid."""
    zz, yy, xx = np.ogrid[:shape[0], :shape[1], :shape[2]]
    return np.sqrt(((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2
                   + ((xx - center[2]) / radii[2]) ** 2)


def _place_lesions(spec: PhantomSpec, rng):
    """Sample 1-2 lesion (center, radii) tuples with all extents inside the body."""
    d, h, w = spec.extent
    bc = ((d - 1) / 2.0, (h - 1) / 2.0, (w - 1) / 2.0)
    n_lesions = 2 if rng.random() < spec.second_lesion_prob else 1
    lesions = []
    for _ in range(n_lesions):
        for attempt in range(MAX_PLACEMENT_TRIES):
            radii = tuple(rng.uniform(lo, hi) for lo, hi in spec.lesion_radii_range)
            # place the center somewhere well inside the body ellipsoid
            u = rng.uniform(-0.55, 0.55, 3)
            center = tuple(c + u[i] * spec.body_radii[i] for i, c in enumerate(bc))
            # the lesion (plus boundary falloff) must stay inside the body:
            # conservative check on the normalized body coordinate of its extremes
            ok = True
            for ax in range(3):
                for sign in (-1.0, 1.0):
                    p = list(center)
                    p[ax] += sign * (radii[ax] + spec.lesion_boundary + 1.0)
                    r = sum(((p[i] - bc[i]) / spec.body_radii[i]) ** 2 for i in range(3))
                    if r >= 0.92:
                        ok = False
            # keep lesions separated so masks have as many components as lesions
            for prev_c, prev_r in lesions:
                gap = sum(abs(center[i] - prev_c[i]) / (radii[i] + prev_r[i] + 2.0)
                          for i in range(3))
                if gap < 1.6:
                    ok = False
            if ok:
                lesions.append((center, radii))
                break
        else:
            raise RuntimeError(f"could not place a lesion after {MAX_PLACEMENT_TRIES} tries")
    return lesions


def generate_case(spec: PhantomSpec, rng):
    """One (image, region_mask) pair as Volumes; mask is binary {0,1}."""
    shape = spec.extent
    d, h, w = shape
    bc = ((d - 1) / 2.0, (h - 1) / 2.0, (w - 1) / 2.0)
    body_r = _ellipsoid_field(shape, bc, spec.body_radii)
    body = body_r <= 1.0
    img = np.full(shape, spec.background_intensity, np.float64)
    img[body] = spec.body_intensity
    region = np.zeros(shape, bool)
    for center, radii in _place_lesions(spec, rng):
        field = _ellipsoid_field(shape, center, radii)
        # soft intensity bump with a sigmoid shoulder at the lesion boundary
        soft = 1.0 / (1.0 + np.exp((field - 1.0) * (max(radii) / spec.lesion_boundary)))
        img += spec.lesion_offset * soft
        region |= field <= 1.0
    img += rng.normal(0.0, spec.noise_sigma, shape)
    frac = region.sum() / region.size
    if not (spec.min_fraction <= frac <= spec.max_fraction):
        raise RuntimeError(f"lesion fraction {frac:.5f} outside "
                           f"[{spec.min_fraction}, {spec.max_fraction}]")
    image = Volume(img.astype(np.float32)[None, None], spacing=spec.spacing)
    mask = Volume(region.astype(np.float32)[None, None], spacing=spec.spacing)
    return image, mask


def case_rng(seed, index):
    return np.random.default_rng([seed, index])


def make_dataset(out_dir, spec: PhantomSpec, n_cases: int) -> list:
    """Write n_cases phantoms under out_dir/case_###/{image,region,contour}.vol.

    Case i is generated from stream (spec.seed, i), so any subset is
    reproducible independently of the others.  A case whose random draw
    violates the lesion-fraction band is retried on substream (seed, i, k).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(n_cases):
        for retry in range(MAX_PLACEMENT_TRIES):
            try:
                rng = np.random.default_rng([spec.seed, i, retry])
                image, region = generate_case(spec, rng)
                break
            except RuntimeError:
                continue
        else:
            raise RuntimeError(f"case {i}: no valid phantom in {MAX_PLACEMENT_TRIES} tries")
        case = out_dir / f"case_{i:03d}"
        case.mkdir(exist_ok=True)
        save_volume(case / "image.vol", image, "image")
        save_volume(case / "region.vol", region, "mask")
        save_volume(case / "contour.vol", make_contour_labels(region), "mask")
        names.append(case.name)
    return names

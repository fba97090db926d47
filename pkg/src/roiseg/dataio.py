"""Dataset loading and per-case preprocessing shared by training and inference."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .losses import downsample_labels
from .preprocess import (
    CropRecord,
    apply_crop,
    body_mask,
    crop_to_body,
    normalize_in_body,
    resample,
)
from .volfile import load_volume
from .volume import Volume


@dataclass
class PreppedCase:
    name: str
    image: Volume             # normalized, cropped to body, stride-divisible
    region: Volume            # binary label on the same grid
    gt_down: Volume           # label max-pooled to the coarse (level-III) grid
    crop: CropRecord
    spacing: tuple
    original_shape: tuple     # pre-crop extent at working spacing


def prep_inference_volume(image: Volume, target_spacing):
    """Resample -> body mask -> normalize -> crop; returns (x, CropRecord)."""
    if tuple(image.spacing) != tuple(target_spacing):
        image = resample(image, target_spacing, "trilinear")
    bm = body_mask(image)
    norm = normalize_in_body(image, bm)
    return crop_to_body(norm, bm)


def prep_case(name, image: Volume, region: Volume, target_spacing) -> PreppedCase:
    if tuple(image.spacing) != tuple(target_spacing):
        image = resample(image, target_spacing, "trilinear")
        region = resample(region, target_spacing, "nearest")
    bm = body_mask(image)
    norm = normalize_in_body(image, bm)
    x, rec = crop_to_body(norm, bm)
    region_c = apply_crop(region, rec)
    return PreppedCase(name, x, region_c, downsample_labels(region_c), rec,
                       tuple(target_spacing), image.spatial)


def load_dataset(data_dir, target_spacing) -> list:
    """All case_*/ directories under data_dir, preprocessed, sorted by name."""
    data_dir = Path(data_dir)
    cases = []
    for case_dir in sorted(data_dir.glob("case_*")):
        image, _ = load_volume(case_dir / "image.vol")
        region, _ = load_volume(case_dir / "region.vol")
        cases.append(prep_case(case_dir.name, image, region, target_spacing))
    if not cases:
        raise FileNotFoundError(f"no case_* directories under {data_dir}")
    return cases

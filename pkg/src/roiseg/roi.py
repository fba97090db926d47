"""Bounding boxes from locator probabilities, box pyramids, feature crops, paste-back.

The locator emits a coarse probability map at the encoder's deepest scale
(level III).  Thresholding + 26-connected component labeling turns it into
tight level-III boxes; each box is grown by a small margin, clamped, and
scaled up through the two pooling strides to get aligned boxes on all three
feature-map levels.  Because the scaling is exact multiplication, crops at
the three levels stay in perfect correspondence under the decoder's
upsampling — no resampling or bin-fitting anywhere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .ops import crop3d
from .volume import ShapeError, Volume

# defaults for locator post-processing
THRESHOLD = 0.5
MIN_VOXELS = 2
MARGIN = 1

_LEVELS = ("I", "II", "III")


@dataclass(frozen=True)
class BBox3:
    start: tuple          # (z, y, x)
    size: tuple           # (d, h, w)
    level: str

    def __post_init__(self):
        if self.level not in _LEVELS:
            raise ValueError(f"level must be one of {_LEVELS}, got {self.level!r}")
        if len(self.start) != 3 or len(self.size) != 3:
            raise ValueError("start and size must be length-3 tuples")
        if any(s < 0 for s in self.start):
            raise ValueError(f"negative box start {self.start}")
        if any(s <= 0 for s in self.size):
            raise ValueError(f"non-positive box size {self.size}")
        object.__setattr__(self, "start", tuple(int(v) for v in self.start))
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))

    @property
    def stop(self):
        return tuple(a + b for a, b in zip(self.start, self.size))

    @property
    def voxels(self):
        d, h, w = self.size
        return d * h * w

    def scaled(self, stride, level):
        return BBox3(tuple(a * s for a, s in zip(self.start, stride)),
                     tuple(a * s for a, s in zip(self.size, stride)), level)

    def to_json(self):
        return {"level": self.level, "start": list(self.start), "size": list(self.size)}

    @classmethod
    def from_json(cls, doc):
        return cls(tuple(doc["start"]), tuple(doc["size"]), doc["level"])


@dataclass(frozen=True)
class BBoxPyramid:
    box3: BBox3
    box2: BBox3
    box1: BBox3

    def to_json(self):
        return {"III": self.box3.to_json(), "II": self.box2.to_json(), "I": self.box1.to_json()}


@dataclass
class RoIPyramid:
    f1: Volume
    f2: Volume
    f3: Volume
    boxes: BBoxPyramid

    def __iter__(self):
        """Unpack as (f1, f2, f3), e.g. straight into the decoder."""
        return iter((self.f1, self.f2, self.f3))


def extract_boxes(prob_map: Volume, threshold=THRESHOLD, min_voxels=MIN_VOXELS):
    """Tight level-III boxes of 26-connected components above threshold.

    Sorted by descending voxel count, ties broken by box start in scan
    order, so the result is independent of labeling order.
    """
    binary = prob_map.arr3() > threshold
    labels, n = ndimage.label(binary, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return []
    counts = np.bincount(labels.ravel())[1:]
    slices = ndimage.find_objects(labels)
    boxes = []
    for count, slc in zip(counts, slices):
        if count < min_voxels or slc is None:
            continue
        start = tuple(s.start for s in slc)
        size = tuple(s.stop - s.start for s in slc)
        boxes.append((int(count), BBox3(start, size, "III")))
    boxes.sort(key=lambda item: (-item[0], item[1].start))
    return [b for _, b in boxes]


def build_pyramid(box3: BBox3, strides=((2, 2, 2), (1, 2, 2)), margin=MARGIN,
                  extents=None) -> BBoxPyramid:
    """Grow a level-III box by margin, clamp to the level-III extent, then
    scale exactly through the pooling strides (deepest first) to levels II
    and I.  Exact multiplication keeps all three boxes aligned under the
    decoder's upsampling.
    """
    if box3.level != "III":
        raise ValueError(f"expected a level-III box, got level {box3.level}")
    start = [max(0, s - margin) for s in box3.start]
    stop = [s + margin for s in box3.stop]
    if extents is not None:
        stop = [min(e, s) for e, s in zip(extents, stop)]
        if any(s >= e for s, e in zip(start, extents)):
            raise ValueError(f"box {box3} lies outside extent {tuple(extents)}")
    if any(b <= a for a, b in zip(start, stop)):
        raise ValueError(f"box {box3} is empty after clamping")
    b3 = BBox3(tuple(start), tuple(b - a for a, b in zip(start, stop)), "III")
    b2 = b3.scaled(strides[0], "II")
    b1 = b2.scaled(strides[1], "I")
    return BBoxPyramid(b3, b2, b1)


def crop_pyramid(f1: Volume, f2: Volume, f3: Volume, pyr: BBoxPyramid) -> RoIPyramid:
    """Raw sub-tensor copies of the three feature maps; taped, so gradients
    flow back into the uncropped maps during training."""
    c1 = crop3d(f1, pyr.box1.start, pyr.box1.size)
    c2 = crop3d(f2, pyr.box2.start, pyr.box2.size)
    c3 = crop3d(f3, pyr.box3.start, pyr.box3.size)
    return RoIPyramid(c1, c2, c3, pyr)


def paste_predictions(canvas: Volume, box1: BBox3, region_prob: Volume) -> Volume:
    """Voxelwise max of the canvas and a region's probabilities inside box1.

    Returns a new Volume; overlapping regions fuse by max, so paste order
    never matters and re-pasting is idempotent.
    """
    if region_prob.spatial != box1.size:
        raise ShapeError(f"region shape {region_prob.spatial} != box size {box1.size}")
    if any(b > e for b, e in zip(box1.stop, canvas.spatial)):
        raise ShapeError(f"box {box1} exceeds canvas extent {canvas.spatial}")
    out = canvas.data.copy()
    z, y, x = box1.start
    d, h, w = box1.size
    view = out[:, :, z:z + d, y:y + h, x:x + w]
    np.maximum(view, region_prob.data, out=view)
    return Volume(out, canvas.spacing)


def boxes_to_json(pyramids) -> str:
    return json.dumps([p.to_json() for p in pyramids], indent=2, sort_keys=True) + "\n"

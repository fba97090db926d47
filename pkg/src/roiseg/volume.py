"""Rank-5 float32 volume tensors and taped scalars.

A Volume is a dense (n, c, d, h, w) float32 array carrying the physical
voxel spacing (sz, sy, sx) in millimeters.  Spacing is metadata only: ops
propagate it (rescaled through pooling/upsampling) but never use it in
arithmetic.  Every Volume gets a unique id so the autodiff tape can refer
to tensors without holding them alive.
"""
from __future__ import annotations

import itertools

import numpy as np

_uid_counter = itertools.count(1)


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


def next_uid() -> int:
    return next(_uid_counter)


class Volume:
    __slots__ = ("data", "spacing", "uid", "requires_grad", "is_empty")

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim != 5:
            raise ShapeError(f"Volume needs rank 5 (n,c,d,h,w), got rank {arr.ndim}")
        if any(s < 1 for s in arr.shape):
            raise ShapeError(
                f"Volume axes must all be >= 1, got {arr.shape}; "
                "use Volume.empty() if you really want an empty volume")
        self.data = arr
        self.spacing = (float(spacing[0]), float(spacing[1]), float(spacing[2]))
        self.uid = next_uid()
        self.requires_grad = bool(requires_grad)
        self.is_empty = False

    @classmethod
    def empty(cls, n=1, c=1, spacing=(1.0, 1.0, 1.0)):
        """The only way to construct a volume with zero voxels."""
        v = cls.__new__(cls)
        v.data = np.zeros((n, c, 0, 0, 0), np.float32)
        v.spacing = (float(spacing[0]), float(spacing[1]), float(spacing[2]))
        v.uid = next_uid()
        v.requires_grad = False
        v.is_empty = True
        return v

    @classmethod
    def from_array(cls, arr, spacing=(1.0, 1.0, 1.0), requires_grad=False):
        """Wrap a (d,h,w) or (c,d,h,w) or (n,c,d,h,w) array as a rank-5 Volume."""
        a = np.asarray(arr)
        if a.ndim == 3:
            a = a[None, None]
        elif a.ndim == 4:
            a = a[None]
        return cls(a, spacing=spacing, requires_grad=requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def c(self):
        return self.data.shape[1]

    @property
    def spatial(self):
        return self.data.shape[2:]

    def arr3(self):
        """The (d,h,w) array for single-item single-channel volumes."""
        if self.shape[0] != 1 or self.shape[1] != 1:
            raise ShapeError(f"arr3() needs shape (1,1,d,h,w), got {self.shape}")
        return self.data[0, 0]

    def copy(self):
        return Volume(self.data.copy(), self.spacing, self.requires_grad)

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("grad")
        if self.is_empty:
            flags.append("empty")
        tag = (" " + ",".join(flags)) if flags else ""
        return f"Volume{self.shape} spacing={self.spacing}{tag}"


class Scalar:
    """A taped scalar (loss values and their intermediates)."""

    __slots__ = ("value", "uid")

    def __init__(self, value):
        self.value = float(value)
        self.uid = next_uid()

    def __repr__(self):
        return f"Scalar({self.value!r})"

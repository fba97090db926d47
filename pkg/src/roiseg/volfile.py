"""Flat binary volume files with a JSON sidecar.

`<name>.vol` holds raw little-endian voxels in row-major (d, h, w) order;
`<name>.json` describes them: {"dims": [d,h,w], "spacing": [sz,sy,sx],
"dtype": "f32"|"u8", "kind": "image"|"mask"}.  Masks are stored as u8 and
come back as {0,1} float32 volumes.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .volume import Volume

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def save_volume(path, volume: Volume, kind="image") -> Path:
    """Write volume data + sidecar; `path` may omit the .vol suffix."""
    if kind not in ("image", "mask"):
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")
    path = Path(path)
    if path.suffix != ".vol":
        path = path.with_suffix(".vol")
    arr = volume.arr3()
    if kind == "mask":
        raw = (arr > 0.5).astype("u1")
        dtype = "u8"
    else:
        raw = arr.astype("<f4")
        dtype = "f32"
    path.write_bytes(raw.tobytes(order="C"))
    sidecar = {"dims": list(arr.shape), "spacing": [float(s) for s in volume.spacing],
               "dtype": dtype, "kind": kind}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
    return path


def load_volume(path):
    """Read a .vol file; returns (Volume, kind)."""
    path = Path(path)
    if path.suffix != ".vol":
        path = path.with_suffix(".vol")
    sidecar = json.loads(path.with_suffix(".json").read_text())
    dims = tuple(sidecar["dims"])
    dtype = _DTYPES[sidecar["dtype"]]
    raw = np.frombuffer(path.read_bytes(), dtype=dtype)
    expect = int(np.prod(dims))
    if raw.size != expect:
        raise ValueError(f"{path}: got {raw.size} voxels, sidecar says {expect}")
    arr = raw.reshape(dims).astype(np.float32)
    vol = Volume.from_array(arr, spacing=tuple(sidecar["spacing"]))
    return vol, sidecar["kind"]

"""Declarative network construction.

The default graph is a 3-scale U-Net that keeps kernels flat (1x3x3) at
full resolution to respect anisotropic voxels: encoder ResBlock1/2/3 with
48/96/192 channels joined by (1,2,2) and (2,2,2) poolings, a 1x1x1 sigmoid
Locator on the deepest map, and a decoder that upsamples cropped RoI
features back to full RoI resolution with Add-fused skips and two sigmoid
heads (region + contour).

Receptive-field variants share every parameter shape and differ only in
the in-plane dilation of some blocks: RF64 (all 1), RF88 (ResBlock3 at
(1,2,2)), RF112 (ResBlock2/3/4 at (1,2,2)).  Weights saved from one
variant load into any other.

A ResBlock is conv+norm+relu three times with a skip connection added
before the last relu; a 1x1x1 projection aligns channels when they differ.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .ops import ConvParams, add, conv3d, instance_norm, maxpool3d, relu, same_padding, sigmoid, upconv3d
from .volume import ShapeError, Volume

RF_VARIANTS = ("RF64", "RF88", "RF112")
_KINDS = ("resblock", "maxpool", "upconv", "add", "head", "roi")
_SOURCES = ("Image",)
_MAGIC = b"RSEGWT01"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple
    kernel: tuple = (1, 1, 1)
    stride: tuple = (1, 1, 1)
    dilation: tuple = (1, 1, 1)
    out_channels: int = 1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "head" and (self.kernel != (1, 1, 1) or self.out_channels != 1):
            raise ValueError(f"head layer {self.name} must have kernel (1,1,1) and 1 output channel")
        if self.out_channels < 1:
            raise ValueError(f"layer {self.name}: out_channels must be >= 1")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    rf_variant: str
    seed: int = 0

    def __post_init__(self):
        if self.rf_variant not in RF_VARIANTS:
            raise ValueError(f"unknown receptive-field variant {self.rf_variant!r}; "
                             f"expected one of {RF_VARIANTS}")
        seen = set(_SOURCES)
        for layer in self.layers:
            for inp in layer.inputs:
                if inp not in seen:
                    raise ValueError(f"layer {layer.name} references {inp!r} "
                                     "before it is declared")
            if layer.name in seen:
                raise ValueError(f"duplicate layer name {layer.name!r}")
            seen.add(layer.name)

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)


def _block_dilation(rf_variant, block):
    dilated = {"RF64": (), "RF88": ("ResBlock3",), "RF112": ("ResBlock2", "ResBlock3", "ResBlock4")}
    return (1, 2, 2) if block in dilated[rf_variant] else (1, 1, 1)


def build_default_spec(rf_variant: str, seed: int = 0) -> NetworkSpec:
    """The standard 48/96/192-channel graph for a given RF variant."""
    if rf_variant not in RF_VARIANTS:
        raise ValueError(f"unknown receptive-field variant {rf_variant!r}; expected one of {RF_VARIANTS}")
    d = lambda b: _block_dilation(rf_variant, b)
    L = LayerSpec
    layers = (
        L("ResBlock1", "resblock", ("Image",), kernel=(1, 3, 3), out_channels=48),
        L("MaxPooling1", "maxpool", ("ResBlock1",), kernel=(1, 2, 2), stride=(1, 2, 2), out_channels=48),
        L("ResBlock2", "resblock", ("MaxPooling1",), kernel=(3, 3, 3), dilation=d("ResBlock2"), out_channels=96),
        L("MaxPooling2", "maxpool", ("ResBlock2",), kernel=(2, 2, 2), stride=(2, 2, 2), out_channels=96),
        L("ResBlock3", "resblock", ("MaxPooling2",), kernel=(3, 3, 3), dilation=d("ResBlock3"), out_channels=192),
        L("Locator", "head", ("ResBlock3",), out_channels=1),
        L("RoITensorI", "roi", ("Locator", "ResBlock1"), out_channels=48),
        L("RoITensorII", "roi", ("Locator", "ResBlock2"), out_channels=96),
        L("RoITensorIII", "roi", ("Locator", "ResBlock3"), out_channels=192),
        L("UpConv1", "upconv", ("RoITensorIII",), kernel=(2, 2, 2), stride=(2, 2, 2), out_channels=96),
        L("Add1", "add", ("UpConv1", "RoITensorII"), out_channels=96),
        L("ResBlock4", "resblock", ("Add1",), kernel=(3, 3, 3), dilation=d("ResBlock4"), out_channels=96),
        L("UpConv2", "upconv", ("ResBlock4",), kernel=(1, 2, 2), stride=(1, 2, 2), out_channels=48),
        L("Add2", "add", ("UpConv2", "RoITensorI"), out_channels=48),
        L("ResBlock5", "resblock", ("Add2",), kernel=(1, 3, 3), out_channels=48),
        L("SegHead1", "head", ("ResBlock5",), out_channels=1),
        L("SegHead2", "head", ("ResBlock5",), out_channels=1),
    )
    return NetworkSpec(layers=layers, rf_variant=rf_variant, seed=seed)


def input_channels(spec: NetworkSpec, layer: LayerSpec) -> int:
    """Channel count feeding a layer (the image has 1, roi crops pass through)."""
    name = layer.inputs[-1] if layer.kind == "roi" else layer.inputs[0]
    if name == "Image":
        return 1
    src = spec.layer(name)
    if src.kind == "roi":
        return src.out_channels
    return src.out_channels


class Network:
    """Parameters + forward passes for a NetworkSpec.

    Parameters are float32 Volumes keyed by '<layer>.<part>.<w|b|gamma|beta>'.
    Convolution weights use He-normal init (std = sqrt(2/fan_in)) from a
    per-layer seeded stream; biases and norm betas start at 0, gammas at 1.
    """

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.params: dict[str, Volume] = {}
        for idx, layer in enumerate(spec.layers):
            rng = np.random.default_rng([spec.seed, idx])
            ci = input_channels(spec, layer)
            if layer.kind == "resblock":
                self._init_resblock(rng, layer.name, ci, layer.out_channels, layer.kernel)
            elif layer.kind == "upconv":
                self._add_he(rng, f"{layer.name}.w",
                             (ci, layer.out_channels) + tuple(layer.kernel), fan_in=ci * int(np.prod(layer.kernel)))
            elif layer.kind == "head":
                self._add_he(rng, f"{layer.name}.w", (1, ci, 1, 1, 1), fan_in=ci)
                self._add_const(f"{layer.name}.b", (1, 1, 1, 1, 1), 0.0)

    def _add_he(self, rng, name, shape, fan_in):
        std = np.sqrt(2.0 / fan_in)
        self.params[name] = Volume(rng.normal(0.0, std, shape).astype(np.float32), requires_grad=True)

    def _add_const(self, name, shape, value):
        self.params[name] = Volume(np.full(shape, value, np.float32), requires_grad=True)

    def _init_resblock(self, rng, name, ci, co, kernel):
        K = int(np.prod(kernel))
        self._add_he(rng, f"{name}.conv1.w", (co, ci) + tuple(kernel), fan_in=ci * K)
        self._add_const(f"{name}.conv1.b", (1, co, 1, 1, 1), 0.0)
        for j in (2, 3):
            self._add_he(rng, f"{name}.conv{j}.w", (co, co) + tuple(kernel), fan_in=co * K)
            self._add_const(f"{name}.conv{j}.b", (1, co, 1, 1, 1), 0.0)
        for j in (1, 2, 3):
            self._add_const(f"{name}.norm{j}.gamma", (1, co, 1, 1, 1), 1.0)
            self._add_const(f"{name}.norm{j}.beta", (1, co, 1, 1, 1), 0.0)
        if ci != co:
            self._add_he(rng, f"{name}.proj.w", (co, ci, 1, 1, 1), fan_in=ci)
            self._add_const(f"{name}.proj.b", (1, co, 1, 1, 1), 0.0)

    # ------------------------------------------------------------- forwards

    def _resblock(self, name: str, x: Volume) -> Volume:
        spec = self.spec.layer(name)
        ci, co = x.c, spec.out_channels
        k, dil = spec.kernel, spec.dilation
        pad = same_padding(k, dil)
        P = self.params
        h = conv3d(x, P[f"{name}.conv1.w"], P[f"{name}.conv1.b"],
                   ConvParams(k, (1, 1, 1), dil, pad, ci, co))
        h = relu(instance_norm(h, P[f"{name}.norm1.gamma"], P[f"{name}.norm1.beta"]))
        h = conv3d(h, P[f"{name}.conv2.w"], P[f"{name}.conv2.b"],
                   ConvParams(k, (1, 1, 1), dil, pad, co, co))
        h = relu(instance_norm(h, P[f"{name}.norm2.gamma"], P[f"{name}.norm2.beta"]))
        h = conv3d(h, P[f"{name}.conv3.w"], P[f"{name}.conv3.b"],
                   ConvParams(k, (1, 1, 1), dil, pad, co, co))
        h = instance_norm(h, P[f"{name}.norm3.gamma"], P[f"{name}.norm3.beta"])
        if ci == co:
            skip = x
        else:
            skip = conv3d(x, P[f"{name}.proj.w"], P[f"{name}.proj.b"],
                          ConvParams((1, 1, 1), in_channels=ci, out_channels=co))
        return relu(add(h, skip))

    def _head(self, name: str, x: Volume) -> Volume:
        w = self.params[f"{name}.w"]
        b = self.params[f"{name}.b"]
        logits = conv3d(x, w, b, ConvParams((1, 1, 1), in_channels=x.c, out_channels=1))
        return sigmoid(logits)

    def encoder_forward(self, image: Volume):
        """image (1,1,d,h,w) -> (F1 48ch full-res, F2 96ch half-plane, F3 192ch half-all)."""
        f1 = self._resblock("ResBlock1", image)
        p1, _ = maxpool3d(f1, (1, 2, 2), (1, 2, 2))
        f2 = self._resblock("ResBlock2", p1)
        p2, _ = maxpool3d(f2, (2, 2, 2), (2, 2, 2))
        f3 = self._resblock("ResBlock3", p2)
        return f1, f2, f3

    def locator_forward(self, f3: Volume) -> Volume:
        return self._head("Locator", f3)

    def decoder_forward(self, pyramid):
        """pyramid (f1, f2, f3) -> (region_prob, contour_prob) at f1 resolution."""
        f1, f2, f3 = pyramid
        u1 = upconv3d(f3, self.params["UpConv1.w"], (2, 2, 2))
        if u1.shape != f2.shape:
            raise ShapeError(f"pyramid shapes inconsistent: upsampled level-III {u1.shape} "
                             f"vs level-II {f2.shape}")
        r4 = self._resblock("ResBlock4", add(u1, f2))
        u2 = upconv3d(r4, self.params["UpConv2.w"], (1, 2, 2))
        if u2.shape != f1.shape:
            raise ShapeError(f"pyramid shapes inconsistent: upsampled level-II {u2.shape} "
                             f"vs level-I {f1.shape}")
        r5 = self._resblock("ResBlock5", add(u2, f1))
        return self._head("SegHead1", r5), self._head("SegHead2", r5)

    # ----------------------------------------------------------- utilities

    def count_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def conv_weight_names(self):
        """Names of convolution kernels (weight-decay set: no biases/norms)."""
        return [n for n in self.params if n.endswith(".w")]

    def shape_hash(self) -> bytes:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.asarray(p.shape, np.int64).tobytes())
        return h.digest()

    def save_weights(self, path):
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(self.shape_hash())
            f.write(struct.pack("<I", len(self.params)))
            for name, p in self.params.items():
                nb = name.encode()
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", p.data.ndim))
                f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
                f.write(np.ascontiguousarray(p.data, "<f4").tobytes())

    def load_weights(self, path):
        with open(path, "rb") as f:
            magic = f.read(len(_MAGIC))
            if magic != _MAGIC:
                raise ValueError(f"not a weight file (bad magic {magic!r})")
            file_hash = f.read(32)
            if file_hash != self.shape_hash():
                raise ValueError("weight file does not match this network's parameter "
                                 "names/shapes (version or architecture mismatch)")
            (count,) = struct.unpack("<I", f.read(4))
            if count != len(self.params):
                raise ValueError(f"weight file has {count} tensors, network has {len(self.params)}")
            for _ in range(count):
                (nlen,) = struct.unpack("<I", f.read(4))
                name = f.read(nlen).decode()
                (rank,) = struct.unpack("<I", f.read(4))
                dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
                raw = f.read(4 * int(np.prod(dims)))
                if name not in self.params:
                    raise ValueError(f"unknown tensor {name!r} in weight file")
                p = self.params[name]
                if tuple(dims) != p.shape:
                    raise ValueError(f"shape mismatch for {name}: file {dims}, network {p.shape}")
                p.data = np.frombuffer(raw, "<f4").reshape(dims).copy()

    def state_copy(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state):
        for n, p in self.params.items():
            p.data = state[n].copy()

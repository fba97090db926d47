"""Numeric operations over Volumes, each with a taped adjoint.

Convolution is cross-correlation (no kernel flip) implemented as im2col +
one BLAS sgemm per batch item; the backward pass reuses the same gather to
rebuild the column matrix instead of caching it, trading one cheap memory
pass for a much smaller peak footprint.  Pooling and transposed convolution
require kernel == stride (the only configuration the network uses), which
makes both exact reshapes.  float32 storage throughout; statistics and loss
sums accumulate in float64.

Parameters that are vectors per channel (conv bias, norm gamma/beta) are
carried as (1, c, 1, 1, 1) Volumes so every learnable tensor is the same
type and owns a tape id.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .tape import active_tape
from .volume import Scalar, ShapeError, Volume

_AXIS_NAMES = ("depth", "height", "width")


@dataclass(frozen=True)
class ConvParams:
    kernel: tuple
    stride: tuple = (1, 1, 1)
    dilation: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        for name, v in (("kernel", self.kernel), ("stride", self.stride), ("dilation", self.dilation)):
            if any(k < 1 for k in v):
                raise ValueError(f"{name} components must be >= 1, got {v}")
        if any(p < 0 for p in self.padding):
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")


def same_padding(kernel, dilation=(1, 1, 1)):
    """Padding that preserves spatial size at stride 1: dilation*(k-1)/2."""
    pad = []
    for k, d in zip(kernel, dilation):
        span = d * (k - 1)
        if span % 2:
            raise ValueError(f"kernel {kernel} with dilation {dilation} has no symmetric same-padding")
        pad.append(span // 2)
    return tuple(pad)


def _conv_out_size(size, k, s, d, p):
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def _im2col(xp, kernel, stride, dilation, out_sp):
    """Gather (ci, D', H', W') padded input into a (ci*kd*kh*kw, P) matrix.

    Column order is channel-major then kernel-tap row-major, matching
    w.reshape(co, ci*kd*kh*kw).
    """
    ci = xp.shape[0]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    dd, dh, dw = dilation
    Do, Ho, Wo = out_sp
    col = np.empty((ci, kd, kh, kw, Do, Ho, Wo), np.float32)
    for a in range(kd):
        za = a * dd
        for b in range(kh):
            yb = b * dh
            for c in range(kw):
                xc = c * dw
                col[:, a, b, c] = xp[:, za:za + (Do - 1) * sd + 1:sd,
                                     yb:yb + (Ho - 1) * sh + 1:sh,
                                     xc:xc + (Wo - 1) * sw + 1:sw]
    return col.reshape(ci * kd * kh * kw, Do * Ho * Wo)


def _col2im(dcol, ci, in_sp, kernel, stride, dilation, padding, out_sp):
    """Scatter-add the (ci*K, P) gradient back onto the (padded) input grid."""
    kd, kh, kw = kernel
    sd, sh, sw = stride
    dd, dh, dw = dilation
    pd, ph, pw = padding
    D, H, W = in_sp
    Do, Ho, Wo = out_sp
    dcol = dcol.reshape(ci, kd, kh, kw, Do, Ho, Wo)
    dxp = np.zeros((ci, D + 2 * pd, H + 2 * ph, W + 2 * pw), np.float32)
    for a in range(kd):
        za = a * dd
        for b in range(kh):
            yb = b * dh
            for c in range(kw):
                xc = c * dw
                dxp[:, za:za + (Do - 1) * sd + 1:sd,
                    yb:yb + (Ho - 1) * sh + 1:sh,
                    xc:xc + (Wo - 1) * sw + 1:sw] += dcol[:, a, b, c]
    if pd or ph or pw:
        return dxp[:, pd:pd + D, ph:ph + H, pw:pw + W].copy()
    return dxp


def _padded(xb, padding):
    pd, ph, pw = padding
    if not (pd or ph or pw):
        return xb
    ci, D, H, W = xb.shape
    xp = np.zeros((ci, D + 2 * pd, H + 2 * ph, W + 2 * pw), np.float32)
    xp[:, pd:pd + D, ph:ph + H, pw:pw + W] = xb
    return xp


def conv3d(x: Volume, w: Volume, bias, p: ConvParams) -> Volume:
    """Dilated stride-able 3D cross-correlation.

    x: (n, ci, d, h, w); w: (co, ci, kd, kh, kw); bias: (1, co, 1, 1, 1) Volume or None.
    """
    n, ci, D, H, W = x.shape
    co = w.shape[0]
    if ci != p.in_channels or co != p.out_channels:
        raise ShapeError(f"channel mismatch: input has {ci} (params say {p.in_channels}), "
                         f"weights produce {co} (params say {p.out_channels})")
    if w.shape[1] != ci:
        raise ShapeError(f"channel mismatch: weights expect {w.shape[1]} input channels, input has {ci}")
    if tuple(w.shape[2:]) != tuple(p.kernel):
        raise ShapeError(f"kernel mismatch: weights are {w.shape[2:]}, params say {p.kernel}")
    if bias is not None and bias.shape != (1, co, 1, 1, 1):
        raise ShapeError(f"bias must be shaped (1,{co},1,1,1), got {bias.shape}")
    out_sp = []
    for ax, (size, k, s, d, pad) in enumerate(zip((D, H, W), p.kernel, p.stride, p.dilation, p.padding)):
        o = _conv_out_size(size, k, s, d, pad)
        if o < 1:
            raise ShapeError(f"{_AXIS_NAMES[ax]} axis too small: size {size} with kernel {k}, "
                             f"dilation {d}, padding {pad}")
        out_sp.append(o)
    Do, Ho, Wo = out_sp
    P = Do * Ho * Wo
    w2 = w.data.reshape(co, -1)
    out = np.empty((n, co, Do, Ho, Wo), np.float32)
    for b in range(n):
        col = _im2col(_padded(x.data[b], p.padding), p.kernel, p.stride, p.dilation, out_sp)
        np.matmul(w2, col, out=out[b].reshape(co, P))
    if bias is not None:
        out += bias.data.reshape(1, co, 1, 1, 1)
    sp = tuple(s0 * s for s0, s in zip(x.spacing, p.stride))
    y = Volume(out, spacing=sp)

    t = active_tape()
    if t is not None:
        xd = x.data

        def bwd(g, acc, need):
            gm = g.reshape(n, co, P)
            if bias is not None and need[2]:
                db = gm.sum(axis=(0, 2), dtype=np.float64).astype(np.float32)
                acc(bias.uid, db.reshape(1, co, 1, 1, 1))
            if need[1]:
                dw = np.zeros((co, w2.shape[1]), np.float32)
                for b in range(n):
                    col = _im2col(_padded(xd[b], p.padding), p.kernel, p.stride, p.dilation, out_sp)
                    dw += gm[b] @ col.T
                acc(w.uid, dw.reshape(w.shape))
            if need[0]:
                dx = np.empty_like(xd)
                for b in range(n):
                    dcol = w2.T @ gm[b]
                    dx[b] = _col2im(dcol, ci, (D, H, W), p.kernel, p.stride,
                                    p.dilation, p.padding, out_sp)
                acc(x.uid, dx)

        inputs = (x, w) if bias is None else (x, w, bias)
        t.record("conv3d", inputs, y, bwd)
    return y


def maxpool3d(x: Volume, kernel, stride):
    """Non-overlapping max pooling (kernel must equal stride).

    Returns (pooled Volume, argmax) where argmax holds the within-window
    flat index (row-major over (kd, kh, kw)) of each selected element;
    ties resolve to the lowest index, and the adjoint routes the gradient
    to exactly that element.
    """
    if tuple(kernel) != tuple(stride):
        raise ValueError(f"only kernel == stride pooling is supported, got kernel {kernel} stride {stride}")
    n, c, D, H, W = x.shape
    kd, kh, kw = kernel
    for ax, (size, k) in enumerate(zip((D, H, W), kernel)):
        if size % k:
            raise ShapeError(f"{_AXIS_NAMES[ax]} axis ({size}) not divisible by pooling stride {k}; "
                             "pad the input first")
    Do, Ho, Wo = D // kd, H // kh, W // kw
    K = kd * kh * kw
    xw = x.data.reshape(n, c, Do, kd, Ho, kh, Wo, kw)
    xw = np.ascontiguousarray(xw.transpose(0, 1, 2, 4, 6, 3, 5, 7)).reshape(n, c, Do, Ho, Wo, K)
    am = xw.argmax(axis=-1)
    out = np.take_along_axis(xw, am[..., None], axis=-1)[..., 0]
    sp = tuple(s0 * k for s0, k in zip(x.spacing, kernel))
    y = Volume(out, spacing=sp)

    t = active_tape()
    if t is not None:
        def bwd(g, acc, need):
            if not need[0]:
                return
            dxw = np.zeros((n, c, Do, Ho, Wo, K), np.float32)
            np.put_along_axis(dxw, am[..., None], g[..., None], axis=-1)
            dx = dxw.reshape(n, c, Do, Ho, Wo, kd, kh, kw) \
                    .transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(x.shape)
            acc(x.uid, np.ascontiguousarray(dx))

        t.record("maxpool3d", (x,), y, bwd)
    return y, am


def upconv3d(x: Volume, w: Volume, stride) -> Volume:
    """Transposed convolution with kernel == stride (exact block upsampling).

    w: (ci, co, kd, kh, kw); no bias.  Output spatial size = input * stride.
    """
    n, ci, D, H, W = x.shape
    if w.shape[0] != ci:
        raise ShapeError(f"channel mismatch: weights expect {w.shape[0]} input channels, input has {ci}")
    kd, kh, kw = w.shape[2:]
    if (kd, kh, kw) != tuple(stride):
        raise ValueError(f"only kernel == stride transposed convolution is supported, "
                         f"got kernel {(kd, kh, kw)} stride {tuple(stride)}")
    co = w.shape[1]
    yt = np.tensordot(x.data, w.data, axes=([1], [0]))          # (n, D, H, W, co, kd, kh, kw)
    out = np.ascontiguousarray(yt.transpose(0, 4, 1, 5, 2, 6, 3, 7)) \
            .reshape(n, co, D * kd, H * kh, W * kw)
    sp = tuple(s0 / k for s0, k in zip(x.spacing, (kd, kh, kw)))
    y = Volume(out, spacing=sp)

    t = active_tape()
    if t is not None:
        xd = x.data

        def bwd(g, acc, need):
            gb = g.reshape(n, co, D, kd, H, kh, W, kw).transpose(0, 2, 4, 6, 1, 3, 5, 7)
            if need[1]:
                dw = np.tensordot(xd, gb, axes=([0, 2, 3, 4], [0, 1, 2, 3]))
                acc(w.uid, np.ascontiguousarray(dw, dtype=np.float32))
            if need[0]:
                dx = np.tensordot(gb, w.data, axes=([4, 5, 6, 7], [1, 2, 3, 4]))
                acc(x.uid, np.ascontiguousarray(dx.transpose(0, 4, 1, 2, 3), dtype=np.float32))

        t.record("upconv3d", (x, w), y, bwd)
    return y


def instance_norm(x: Volume, gamma: Volume, beta: Volume, eps=1e-5) -> Volume:
    """Standardize each (sample, channel) over its d*h*w voxels, then scale/shift.

    Statistics use float64 accumulation and population variance; gamma and
    beta are (1, c, 1, 1, 1) Volumes.
    """
    n, c = x.shape[:2]
    if gamma.shape != (1, c, 1, 1, 1) or beta.shape != (1, c, 1, 1, 1):
        raise ShapeError(f"gamma/beta must be shaped (1,{c},1,1,1), got {gamma.shape} / {beta.shape}")
    xr = x.data.reshape(n, c, -1)
    N = xr.shape[2]
    mu = xr.mean(axis=2, dtype=np.float64)
    var = xr.var(axis=2, dtype=np.float64)
    istd = 1.0 / np.sqrt(var + eps)
    muf = mu.astype(np.float32)[:, :, None]
    istdf = istd.astype(np.float32)[:, :, None]
    gma = gamma.data.reshape(1, c, 1)
    xhat = (xr - muf) * istdf
    out = (xhat * gma + beta.data.reshape(1, c, 1)).reshape(x.shape)
    y = Volume(out, spacing=x.spacing)

    t = active_tape()
    if t is not None:
        xd = x.data

        def bwd(g, acc, need):
            gr = g.reshape(n, c, -1)
            xhat_b = (xd.reshape(n, c, -1) - muf) * istdf
            if need[1]:
                dgamma = (gr * xhat_b).sum(axis=(0, 2), dtype=np.float64)
                acc(gamma.uid, dgamma.astype(np.float32).reshape(1, c, 1, 1, 1))
            if need[2]:
                dbeta = gr.sum(axis=(0, 2), dtype=np.float64)
                acc(beta.uid, dbeta.astype(np.float32).reshape(1, c, 1, 1, 1))
            if need[0]:
                dxhat = gr * gma
                m1 = dxhat.mean(axis=2, dtype=np.float64).astype(np.float32)[:, :, None]
                m2 = (dxhat * xhat_b).mean(axis=2, dtype=np.float64).astype(np.float32)[:, :, None]
                dx = istdf * (dxhat - m1 - xhat_b * m2)
                acc(x.uid, dx.reshape(x.shape))

        t.record("instance_norm", (x, gamma, beta), y, bwd)
    return y


def relu(x: Volume) -> Volume:
    y = Volume(np.maximum(x.data, 0.0), spacing=x.spacing)
    t = active_tape()
    if t is not None:
        xd = x.data

        def bwd(g, acc, need):
            if need[0]:
                acc(x.uid, g * (xd > 0.0))

        t.record("relu", (x,), y, bwd)
    return y


def sigmoid(x: Volume) -> Volume:
    y = Volume(expit(x.data), spacing=x.spacing)
    t = active_tape()
    if t is not None:
        yd = y.data

        def bwd(g, acc, need):
            if need[0]:
                acc(x.uid, g * (yd * (1.0 - yd)))

        t.record("sigmoid", (x,), y, bwd)
    return y


def add(a: Volume, b: Volume) -> Volume:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    y = Volume(a.data + b.data, spacing=a.spacing)
    t = active_tape()
    if t is not None:
        def bwd(g, acc, need):
            if need[0]:
                acc(a.uid, g, own=False)
            if need[1]:
                acc(b.uid, g, own=False)

        t.record("add", (a, b), y, bwd)
    return y


def mul(a: Volume, b: Volume) -> Volume:
    """Elementwise product (used to build loss numerators)."""
    if a.shape != b.shape:
        raise ShapeError(f"mul needs identical shapes, got {a.shape} and {b.shape}")
    y = Volume(a.data * b.data, spacing=a.spacing)
    t = active_tape()
    if t is not None:
        ad, bd = a.data, b.data

        def bwd(g, acc, need):
            if need[0]:
                acc(a.uid, g * bd)
            if need[1]:
                acc(b.uid, g * ad)

        t.record("mul", (a, b), y, bwd)
    return y


def crop3d(x: Volume, start, size) -> Volume:
    """Copy the spatial sub-box start..start+size; adjoint scatters back."""
    n, c, D, H, W = x.shape
    z, y0, x0 = start
    d, h, w = size
    for ax, (s0, sz, ext) in enumerate(zip(start, size, (D, H, W))):
        if s0 < 0 or sz < 1 or s0 + sz > ext:
            raise ShapeError(f"crop box out of bounds on {_AXIS_NAMES[ax]}: "
                             f"start {s0} size {sz} extent {ext}")
    out = x.data[:, :, z:z + d, y0:y0 + h, x0:x0 + w].copy()
    y = Volume(out, spacing=x.spacing)
    t = active_tape()
    if t is not None:
        def bwd(g, acc, need):
            if need[0]:
                dx = np.zeros(x.shape, np.float32)
                dx[:, :, z:z + d, y0:y0 + h, x0:x0 + w] = g
                acc(x.uid, dx)

        t.record("crop3d", (x,), y, bwd)
    return y


def sum_all(x: Volume) -> Scalar:
    """Sum of all elements as a taped Scalar (float64 accumulation)."""
    s = Scalar(x.data.sum(dtype=np.float64))
    t = active_tape()
    if t is not None:
        def bwd(g, acc, need):
            if need[0]:
                acc(x.uid, np.full(x.shape, np.float32(g), np.float32))

        t.record("sum_all", (x,), s, bwd)
    return s


def sum_sq(x: Volume) -> Scalar:
    """Sum of squared elements as a taped Scalar."""
    xd = x.data
    s = Scalar((xd.astype(np.float64) ** 2).sum())
    t = active_tape()
    if t is not None:
        def bwd(g, acc, need):
            if need[0]:
                acc(x.uid, (2.0 * np.float32(g)) * xd)

        t.record("sum_sq", (x,), s, bwd)
    return s


def s_add(a: Scalar, b: Scalar) -> Scalar:
    s = Scalar(a.value + b.value)
    t = active_tape()
    if t is not None:
        def bwd(g, acc, need):
            if need[0]:
                acc(a.uid, g)
            if need[1]:
                acc(b.uid, g)

        t.record("s_add", (a, b), s, bwd)
    return s


def s_affine(a: Scalar, mul_by: float, add_to: float) -> Scalar:
    """mul_by * a + add_to as a taped Scalar."""
    s = Scalar(a.value * mul_by + add_to)
    t = active_tape()
    if t is not None:
        def bwd(g, acc, need):
            if need[0]:
                acc(a.uid, g * mul_by)

        t.record("s_affine", (a,), s, bwd)
    return s


def s_div(a: Scalar, b: Scalar) -> Scalar:
    s = Scalar(a.value / b.value)
    t = active_tape()
    if t is not None:
        av, bv = a.value, b.value

        def bwd(g, acc, need):
            if need[0]:
                acc(a.uid, g / bv)
            if need[1]:
                acc(b.uid, -g * av / (bv * bv))

        t.record("s_div", (a, b), s, bwd)
    return s

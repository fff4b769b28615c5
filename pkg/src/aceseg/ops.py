"""Differentiable layer primitives: convolutions, sampling, normalization, loss.

All ops take and return `Tensor`s and register backward rules through
`tensor.record`. Offset conventions for the deformable convolutions are
fixed once here: the offset field carries, for kernel tap k (row-major
over the kernel window), channel 2k = row displacement and channel
2k + 1 = column displacement, both in pixels, added to the dilated tap
position. Fractional positions are read by bilinear interpolation with
zero padding outside the input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateBatchError,
    GeometryError,
    LabelError,
    ShapeError,
)
from .tensor import Tensor, record

BN_EPS = 1e-5


@dataclass(frozen=True)
class ConvParams:
    """Kernel geometry. dilation = 1 is standard convolution."""

    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ConfigError("kernel size must be >= 1")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.padding < 0:
            raise ConfigError("padding must be >= 0")
        if self.dilation < 1:
            raise ConfigError("dilation must be >= 1")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.dilation * (self.kernel_h - 1) - 1) // self.stride + 1
        ow = (w + 2 * self.padding - self.dilation * (self.kernel_w - 1) - 1) // self.stride + 1
        if oh < 1 or ow < 1:
            raise GeometryError(
                f"kernel {self.kernel_h}x{self.kernel_w} (stride {self.stride}, "
                f"padding {self.padding}, dilation {self.dilation}) yields empty "
                f"output for {h}x{w} input")
        return oh, ow


@dataclass
class OffsetField:
    """Learned per-location sampling offsets plus optional per-tap modulation."""

    offsets: Tensor
    modulation: Optional[Tensor] = None


@dataclass
class BNState:
    """Running statistics for batch normalization, updated in train mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def for_channels(cls, channels: int, momentum: float = 0.1, dtype=np.float32) -> "BNState":
        return cls(mean=np.zeros(channels, dtype=dtype),
                   var=np.ones(channels, dtype=dtype),
                   momentum=momentum)


def _same_dtype(*tensors: Tensor) -> np.dtype:
    dtype = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dtype:
            raise ShapeError(f"mixed tensor dtypes in one op: {dtype} vs {t.dtype}")
    return dtype


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    _same_dtype(a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    _same_dtype(a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    cv = x.dtype.type(c)
    return record("scale", (x,), x.data * cv, lambda g: (g * cv,))


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        return (np.broadcast_to(g.reshape(()), x.shape).copy(),)

    return record("sum_all", (x,), out, backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g * (xd > 0),)

    return record("relu", (x,), np.maximum(xd, 0), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    s[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * s * (1.0 - s),)

    return record("sigmoid", (x,), s, backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    _same_dtype(*xs)
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise ShapeError(f"concat_channels inputs disagree on N/H/W: "
                             f"{xs[0].shape} vs {t.shape}")
    sizes = [t.shape[1] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=1)

    def backward(g):
        pieces = []
        start = 0
        for c in sizes:
            pieces.append(g[:, start:start + c])
            start += c
        return tuple(pieces)

    return record("concat_channels", tuple(xs), out, backward)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover {x.shape[1]} channels")
    outs = []
    start = 0
    for c in sizes:
        lo = start

        def backward(g, lo=lo, c=c):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[:, lo:lo + c] = g
            return (full,)

        outs.append(record("split_channels", (x,), x.data[:, lo:lo + c].copy(), backward))
        start += c
    return outs


# ---------------------------------------------------------------------------
# convolution


def _pad2d(xd: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return xd
    n, c, h, w = xd.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=xd.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = xd
    return out


def _im2col(xp: np.ndarray, p: ConvParams, oh: int, ow: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C, kh, kw, oh, ow) by one strided slice per tap."""
    n, c = xp.shape[:2]
    s, d = p.stride, p.dilation
    cols = np.empty((n, c, p.kernel_h, p.kernel_w, oh, ow), dtype=xp.dtype)
    for a in range(p.kernel_h):
        for b in range(p.kernel_w):
            cols[:, :, a, b] = xp[:, :,
                                  a * d: a * d + (oh - 1) * s + 1: s,
                                  b * d: b * d + (ow - 1) * s + 1: s]
    return cols


def _col2im_add(gcols: np.ndarray, xp_shape: tuple, p: ConvParams) -> np.ndarray:
    n, c, kh, kw, oh, ow = gcols.shape
    s, d = p.stride, p.dilation
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    for a in range(kh):
        for b in range(kw):
            gxp[:, :,
                a * d: a * d + (oh - 1) * s + 1: s,
                b * d: b * d + (ow - 1) * s + 1: s] += gcols[:, :, a, b]
    return gxp


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], p: ConvParams) -> Tensor:
    """Dilated 2-d convolution with zero padding.

    y[n, o, i, j] = sum over c, taps k of x[n, c, i*s - pad + d*kr, j*s - pad + d*kc] * w[o, c, k]
    """
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if (kh, kw) != (p.kernel_h, p.kernel_w):
        raise ShapeError(f"weight kernel {kh}x{kw} does not match params "
                         f"{p.kernel_h}x{p.kernel_w}")
    if cin_w != cin:
        raise ShapeError(f"input has {cin} channels but weight expects {cin_w}")
    if b is not None and b.shape != (1, cout, 1, 1):
        raise ShapeError(f"bias must be 1x{cout}x1x1, got {b.shape}")
    _same_dtype(*([x, w] + ([b] if b is not None else [])))

    oh, ow = p.out_size(h, wd)
    xp = _pad2d(x.data, p.padding)
    cols = _im2col(xp, p, oh, ow).reshape(n, cin * kh * kw, oh * ow)
    w2 = w.data.reshape(cout, cin * kh * kw)
    y = np.matmul(w2, cols)
    if b is not None:
        y = y + b.data.reshape(1, cout, 1)
    y = y.reshape(n, cout, oh, ow)

    def backward(g):
        g2 = g.reshape(n, cout, oh * ow)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(w2.T, g2).reshape(n, cin, kh, kw, oh, ow)
        gxp = _col2im_add(gcols, xp.shape, p)
        pad = p.padding
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        if b is not None:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
            return (gx, gw, gb)
        return (gx, gw)

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv2d", inputs, y, backward)


# ---------------------------------------------------------------------------
# bilinear sampling and deformable convolution


def _gather_plane(xt: np.ndarray, nidx, r, c, h: int, w: int):
    """Zero-padded lookup of xt (C, N, H, W) at integer indices (N, K, oh, ow)."""
    valid = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    rr = np.clip(r, 0, h - 1)
    cc = np.clip(c, 0, w - 1)
    v = xt[:, nidx, rr, cc]
    v *= valid
    return v, valid, rr, cc


def bilinear_sample(plane: Tensor, row, col) -> Tensor:
    """Sample one 1x1xHxW plane at a real-valued position.

    The four integer neighbors are blended; neighbors outside the plane
    contribute zero. `row`/`col` may be floats or 1x1x1x1 tensors, in which
    case gradients flow to them as well.
    """
    if plane.shape[0] != 1 or plane.shape[1] != 1:
        raise ShapeError(f"bilinear_sample expects a 1x1xHxW plane, got {plane.shape}")
    _, _, h, w = plane.shape
    row_t = row if isinstance(row, Tensor) else None
    col_t = col if isinstance(col, Tensor) else None
    rv = row.item() if isinstance(row, Tensor) else float(row)
    cv = col.item() if isinstance(col, Tensor) else float(col)

    r0, c0 = int(np.floor(rv)), int(np.floor(cv))
    tr, tc = rv - r0, cv - c0
    pd = plane.data[0, 0]

    def at(r, c):
        return pd[r, c] if 0 <= r < h and 0 <= c < w else pd.dtype.type(0)

    v00, v01 = at(r0, c0), at(r0, c0 + 1)
    v10, v11 = at(r0 + 1, c0), at(r0 + 1, c0 + 1)
    val = ((1 - tr) * (1 - tc) * v00 + (1 - tr) * tc * v01
           + tr * (1 - tc) * v10 + tr * tc * v11)
    out = np.array(val, dtype=plane.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        gv = g.reshape(())
        gp = np.zeros_like(plane.data)
        for (r, c, wt) in ((r0, c0, (1 - tr) * (1 - tc)), (r0, c0 + 1, (1 - tr) * tc),
                           (r0 + 1, c0, tr * (1 - tc)), (r0 + 1, c0 + 1, tr * tc)):
            if 0 <= r < h and 0 <= c < w:
                gp[0, 0, r, c] += gv * wt
        grads = [gp]
        if row_t is not None:
            dr = (v10 - v00) * (1 - tc) + (v11 - v01) * tc
            grads.append((gv * dr).reshape(1, 1, 1, 1).astype(plane.dtype))
        if col_t is not None:
            dc = (v01 - v00) * (1 - tr) + (v11 - v10) * tr
            grads.append((gv * dc).reshape(1, 1, 1, 1).astype(plane.dtype))
        return tuple(grads)

    inputs = [plane]
    if row_t is not None:
        inputs.append(row_t)
    if col_t is not None:
        inputs.append(col_t)
    return record("bilinear_sample", tuple(inputs), out, backward)


def _deform_conv(x: Tensor, w: Tensor, off: OffsetField, p: ConvParams,
                 modulated: bool) -> Tensor:
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    k = kh * kw
    if (kh, kw) != (p.kernel_h, p.kernel_w):
        raise ShapeError(f"weight kernel {kh}x{kw} does not match params "
                         f"{p.kernel_h}x{p.kernel_w}")
    if cin_w != cin:
        raise ShapeError(f"input has {cin} channels but weight expects {cin_w}")
    if p.stride != 1:
        raise ConfigError("deformable convolution supports stride 1 only")
    oh, ow = p.out_size(h, wd)
    offsets = off.offsets
    if offsets.shape != (n, 2 * k, oh, ow):
        raise ShapeError(f"offset field must be {n}x{2 * k}x{oh}x{ow} for this kernel, "
                         f"got {offsets.shape}")
    mod = off.modulation if modulated else None
    if modulated:
        if mod is None:
            raise ShapeError("modulated deformable convolution needs a modulation field")
        if mod.shape != (n, k, oh, ow):
            raise ShapeError(f"modulation must be {n}x{k}x{oh}x{ow}, got {mod.shape}")
        _same_dtype(x, w, offsets, mod)
    else:
        _same_dtype(x, w, offsets)

    d, pad = p.dilation, p.padding
    taps_r = np.repeat(np.arange(kh), kw)
    taps_c = np.tile(np.arange(kw), kh)
    base_r = (-pad + d * taps_r)[None, :, None, None] + np.arange(oh)[None, None, :, None]
    base_c = (-pad + d * taps_c)[None, :, None, None] + np.arange(ow)[None, None, None, :]
    rows = base_r + off.offsets.data[:, 0::2]
    cols = base_c + off.offsets.data[:, 1::2]

    r0 = np.floor(rows)
    c0 = np.floor(cols)
    tr = (rows - r0).astype(x.dtype)
    tc = (cols - c0).astype(x.dtype)
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    nidx = np.broadcast_to(np.arange(n)[:, None, None, None], rows.shape)

    xt = x.data.transpose(1, 0, 2, 3)
    corners = []
    corner_spec = (
        (r0, c0, (1 - tr) * (1 - tc)),
        (r0, c0 + 1, (1 - tr) * tc),
        (r0 + 1, c0, tr * (1 - tc)),
        (r0 + 1, c0 + 1, tr * tc),
    )
    sampled_t = np.zeros((cin,) + rows.shape, dtype=x.dtype)  # (C, N, K, oh, ow)
    for r, c, wt in corner_spec:
        v, valid, rr, cc = _gather_plane(xt, nidx, r, c, h, wd)
        corners.append((v, valid, rr, cc, wt))
        sampled_t += wt * v

    sampled = sampled_t.transpose(1, 0, 2, 3, 4)  # (N, C, K, oh, ow)
    vals = sampled * mod.data[:, None] if modulated else sampled
    w2 = w.data.reshape(cout, cin * k)
    y = np.matmul(w2, vals.reshape(n, cin * k, oh * ow)).reshape(n, cout, oh, ow)

    def backward(g):
        g2 = g.reshape(n, cout, oh * ow)
        vals2 = vals.reshape(n, cin * k, oh * ow)
        gw = np.matmul(g2, vals2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gvals = np.matmul(w2.T, g2).reshape(n, cin, k, oh, ow)
        if modulated:
            gsampled = gvals * mod.data[:, None]
            gmod = (gvals * sampled).sum(axis=1)
        else:
            gsampled = gvals
            gmod = None
        gst = gsampled.transpose(1, 0, 2, 3, 4)  # (C, N, K, oh, ow)

        # input gradient: scatter-add each corner's weighted contribution
        gx_rows = np.zeros((n * h * wd, cin), dtype=g.dtype)
        for v, valid, rr, cc, wt in corners:
            contrib = (gst * wt) * valid  # (C, N, K, oh, ow)
            flat = ((nidx * h + rr) * wd + cc).reshape(-1)
            np.add.at(gx_rows, flat, contrib.reshape(cin, -1).T)
        gx = gx_rows.reshape(n, h, wd, cin).transpose(0, 3, 1, 2)

        # coordinate gradients, using zero-padded corner values
        v00, v01 = corners[0][0], corners[1][0]
        v10, v11 = corners[2][0], corners[3][0]
        dval_dr = (v10 - v00) * (1 - tc) + (v11 - v01) * tc
        dval_dc = (v01 - v00) * (1 - tr) + (v11 - v10) * tr
        grow = (gst * dval_dr).sum(axis=0)  # (N, K, oh, ow)
        gcol = (gst * dval_dc).sum(axis=0)
        goff = np.stack([grow, gcol], axis=2).reshape(n, 2 * k, oh, ow)

        if modulated:
            return (gx, gw, goff, gmod)
        return (gx, gw, goff)

    if modulated:
        name = "deform_conv_v2"
        inputs = (x, w, offsets, mod)
    else:
        name = "deform_conv_v1"
        inputs = (x, w, offsets)
    return record(name, inputs, y, backward)


def deform_conv_v1(x: Tensor, w: Tensor, off: OffsetField, p: ConvParams) -> Tensor:
    """Deformable convolution: taps displaced by learned offsets.

    y[n, o, i] = sum over c, k of x[n, c, i + d*k + off_k(i)] * w[o, c, k],
    fractional positions read bilinearly. Modulation, if present on the
    field, is ignored.
    """
    return _deform_conv(x, w, off, p, modulated=False)


def deform_conv_v2(x: Tensor, w: Tensor, off: OffsetField, p: ConvParams) -> Tensor:
    """Modulated deformable convolution: each displaced tap is also scaled
    by a learned per-tap factor in [0, 1]."""
    return _deform_conv(x, w, off, p, modulated=True)


def offset_predictor(x: Tensor, w_off: Tensor, b_off: Tensor) -> OffsetField:
    """Predict an offset field from the input with a 3x3 standard convolution.

    The conv emits 3K channels: the first 2K are raw offsets, the last K
    pass through a sigmoid and become modulation values in [0, 1].
    """
    cout = w_off.shape[0]
    if w_off.shape[2:] != (3, 3):
        raise ShapeError(f"offset predictor must be a 3x3 conv, got "
                         f"{w_off.shape[2]}x{w_off.shape[3]}")
    if cout % 3 != 0:
        raise ShapeError(f"offset predictor must emit 3K channels, got {cout}")
    k = cout // 3
    raw = conv2d(x, w_off, b_off, ConvParams(3, 3, stride=1, padding=1))
    offsets, mod_logits = split_channels(raw, [2 * k, k])
    return OffsetField(offsets=offsets, modulation=sigmoid(mod_logits))


# ---------------------------------------------------------------------------
# normalization, pooling, resizing


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               state: Optional[BNState] = None, training: bool = True) -> Tensor:
    """Per-channel batch normalization with affine transform.

    Train mode normalizes by batch statistics and folds them into the
    running state; eval mode normalizes by the running state.
    """
    n, c, h, w = x.shape
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ShapeError(f"gamma/beta must be 1x{c}x1x1, got {gamma.shape} / {beta.shape}")
    _same_dtype(x, gamma, beta)
    m = n * h * w
    if training:
        if m <= 1:
            raise DegenerateBatchError("batch variance undefined with a single value "
                                       "per channel in train mode")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if state is not None:
            mom = state.momentum
            state.mean[:] = (1 - mom) * state.mean + mom * mu
            state.var[:] = (1 - mom) * state.var + mom * var * (m / (m - 1))
    else:
        if state is None:
            raise ConfigError("eval-mode batch_norm requires running statistics")
        mu = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)

    invstd = 1.0 / np.sqrt(var + x.dtype.type(BN_EPS))
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    y = gamma.data * xhat + beta.data

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        gbeta = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        gxhat = g * gamma.data
        istd = invstd.reshape(1, c, 1, 1)
        if training:
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (istd / m) * (m * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * istd
        return (gx, ggamma, gbeta)

    return record("batch_norm", (x, gamma, beta), y, backward)


def _bin_edges(size: int, bins: int) -> np.ndarray:
    return np.array([(j * size) // bins for j in range(bins + 1)], dtype=np.int64)


def adaptive_avg_pool(x: Tensor, bins_h: int, bins_w: int) -> Tensor:
    """Mean over a bins_h x bins_w partition of the plane (floor bin edges)."""
    n, c, h, w = x.shape
    if bins_h < 1 or bins_w < 1:
        raise ConfigError("pool bins must be >= 1")
    if bins_h > h or bins_w > w:
        raise GeometryError(f"cannot pool {h}x{w} input into {bins_h}x{bins_w} bins")
    er, ec = _bin_edges(h, bins_h), _bin_edges(w, bins_w)
    dr, dc = np.diff(er), np.diff(ec)
    sums = np.add.reduceat(np.add.reduceat(x.data, er[:-1], axis=2), ec[:-1], axis=3)
    counts = (dr[:, None] * dc[None, :]).astype(x.dtype)
    y = sums / counts

    def backward(g):
        gn = g / counts
        return (np.repeat(np.repeat(gn, dr, axis=2), dc, axis=3),)

    return record("adaptive_avg_pool", (x,), y, backward)


def _interp_matrix(in_size: int, out_size: int, dtype) -> np.ndarray:
    """Row-interpolation matrix for align-corners bilinear resizing."""
    a = np.zeros((out_size, in_size), dtype=dtype)
    if in_size == 1 or out_size == 1:
        a[:, 0] = 1
        return a
    pos = np.arange(out_size) * ((in_size - 1) / (out_size - 1))
    i0 = np.minimum(np.floor(pos).astype(np.int64), in_size - 2)
    t = (pos - i0).astype(dtype)
    rows = np.arange(out_size)
    a[rows, i0] = 1 - t
    a[rows, i0 + 1] += t
    return a


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with align_corners=True. Identity when sizes match."""
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise GeometryError("output size must be >= 1")
    if (out_h, out_w) == (h, w):
        return record("upsample_bilinear", (x,), x.data.copy(), lambda g: (g,))
    a = _interp_matrix(h, out_h, x.dtype)
    b = _interp_matrix(w, out_w, x.dtype)
    y = np.matmul(np.matmul(a, x.data), b.T)

    def backward(g):
        return (np.matmul(a.T, np.matmul(g, b)),)

    return record("upsample_bilinear", (x,), y, backward)


def resize_bilinear_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Non-differentiable align-corners resize of a (..., H, W) array."""
    h, w = arr.shape[-2], arr.shape[-1]
    if (out_h, out_w) == (h, w):
        return arr.copy()
    a = _interp_matrix(h, out_h, arr.dtype)
    b = _interp_matrix(w, out_w, arr.dtype)
    return np.matmul(np.matmul(a, arr), b.T)


def resize_nearest_labels(label: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of an integer label map; never invents classes."""
    h, w = label.shape
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.int64)
    return label[rows][:, cols]


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          ignore_index: int = 255) -> Tensor:
    """Mean negative log-likelihood over non-ignored pixels.

    `labels` is an integer (N, H, W) map; pixels equal to `ignore_index`
    contribute neither loss nor gradient.
    """
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels must be {n}x{h}x{w}, got {labels.shape}")
    labels = labels.astype(np.int64)
    mask = labels != ignore_index
    bad = mask & ((labels < 0) | (labels >= k))
    if bad.any():
        raise LabelError(f"label value {int(labels[bad][0])} outside [0, {k - 1}] "
                         f"and not the ignore index {ignore_index}")
    count = int(mask.sum())
    if count == 0:
        raise LabelError("every pixel is ignored; loss undefined")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    safe = np.where(mask, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * mask).sum(dtype=logits.dtype) / logits.dtype.type(count)

    def backward(g):
        gl = np.exp(logp)
        idx = safe[:, None]
        np.put_along_axis(gl, idx, np.take_along_axis(gl, idx, axis=1) - 1, axis=1)
        gl *= mask[:, None]
        gl *= g.reshape(()) / logits.dtype.type(count)
        return (gl,)

    return record("softmax_cross_entropy", (logits,), loss.reshape(1, 1, 1, 1), backward)

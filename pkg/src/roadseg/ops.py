"""Differentiable primitives over :class:`roadseg.tensor.Tensor`.

Each function computes its result eagerly with numpy and registers a
local backward rule on the active tape. Elementwise binary ops accept a
python scalar, a 0-d tensor, or an equal-shape tensor as the second
operand; anything else is a dimension error.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import DimensionError, Tensor, record

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)
    raise TypeError(f"unsupported operand type: {type(x)!r}")


def _check_pair(a, b):
    if a.dtype != b.dtype:
        raise TypeError(f"mixed element widths: {a.dtype} vs {b.dtype}")
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast")


def _unbroadcast(g, shape):
    """Reduce gradient g back to ``shape`` (only scalar broadcasting occurs)."""
    if g.shape == shape:
        return g
    return g.sum().reshape(shape)


def add(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_pair(a, b)
    out = Tensor(a.data + b.data, dtype=a.dtype)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_pair(a, b)
    out = Tensor(a.data - b.data, dtype=a.dtype)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_pair(a, b)
    out = Tensor(a.data * b.data, dtype=a.dtype)
    return record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                          _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_pair(a, b)
    out = Tensor(a.data / b.data, dtype=a.dtype)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return record(out, (a, b), bwd)


def neg(a):
    out = Tensor(-a.data, dtype=a.dtype)
    return record(out, (a,), lambda g: (-g,))


def matmul(a, b):
    """Matrix product; leading batch dimensions must match exactly."""
    if a.dtype != b.dtype:
        raise TypeError(f"mixed element widths: {a.dtype} vs {b.dtype}")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    out = Tensor(np.matmul(a.data, b.data), dtype=a.dtype)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return record(out, (a, b), bwd)


def exp(a):
    y = np.exp(a.data)
    out = Tensor(y, dtype=a.dtype)
    return record(out, (a,), lambda g: (g * y,))


def log(a):
    out = Tensor(np.log(a.data), dtype=a.dtype)
    return record(out, (a,), lambda g: (g / a.data,))


def pow_const(a, p):
    """a ** p for a constant exponent p."""
    y = a.data ** p
    out = Tensor(y, dtype=a.dtype)
    return record(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    y = np.where(a.data >= 0, y, 1.0 - y)
    out = Tensor(y, dtype=a.dtype)
    return record(out, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a):
    s = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    s = np.where(a.data >= 0, s, 1.0 - s)
    out = Tensor(a.data * s, dtype=a.dtype)
    return record(out, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def gelu(a):
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor((x * cdf).astype(a.dtype), dtype=a.dtype)

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return record(out, (a,), bwd)


def softplus(a):
    # stable: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(y, dtype=a.dtype)
    s = 1.0 / (1.0 + np.exp(-np.abs(x)))
    s = np.where(x >= 0, s, 1.0 - s)
    return record(out, (a,), lambda g: (g * s,))


def softmax(a):
    """Numerically stabilized softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, dtype=a.dtype)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return record(out, (a,), bwd)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.shape[-1] if a.data.ndim else 0
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
                             f"do not match feature size {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = Tensor(xh * gamma.data + beta.data, dtype=a.dtype)

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xh).sum(axis=lead)
        gxh = g * gamma.data
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                    - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return record(out, (a, gamma, beta), bwd)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), dtype=a.dtype)
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)), dtype=a.dtype)
    return record(out, (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    out = Tensor(np.ascontiguousarray(data), dtype=a.dtype)

    def bwd(g):
        # sum over axes that were added or expanded
        extra = len(shape) - a.data.ndim
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, g.shape)) if s == 1 and t != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return record(out, (a,), bwd)


def tsum(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * a.data.ndim), a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis):
    if not tensors:
        raise DimensionError("concat of an empty list")
    dt = tensors[0].dtype
    if any(t.dtype != dt for t in tensors):
        raise TypeError("mixed element widths in concat")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), dtype=dt)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def take_rows(a, idx):
    """Gather rows along the first axis; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx], dtype=a.dtype)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return record(out, (a,), bwd)


def where_mask(mask, a, b):
    """Select from a (mask true) or b (mask false); mask is a constant."""
    mask = np.asarray(mask, dtype=bool)
    _check_pair(a, b)
    if mask.shape != a.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match {a.shape}")
    out = Tensor(np.where(mask, a.data, b.data), dtype=a.dtype)
    return record(out, (a, b), lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)))


def adaptive_avg_pool(a, out_h, out_w):
    """Adaptive average pooling of an [H, W, C] map to [out_h, out_w, C]."""
    h, w, c = a.shape
    y = np.empty((out_h, out_w, c), dtype=a.dtype)
    bins = []
    for i in range(out_h):
        r0, r1 = (i * h) // out_h, -(-((i + 1) * h) // out_h)
        for j in range(out_w):
            c0, c1 = (j * w) // out_w, -(-((j + 1) * w) // out_w)
            y[i, j] = a.data[r0:r1, c0:c1].mean(axis=(0, 1))
            bins.append((r0, r1, c0, c1))
    out = Tensor(y, dtype=a.dtype)

    def bwd(g):
        ga = np.zeros_like(a.data)
        k = 0
        for i in range(out_h):
            for j in range(out_w):
                r0, r1, c0, c1 = bins[k]
                k += 1
                ga[r0:r1, c0:c1] += g[i, j] / ((r1 - r0) * (c1 - c0))
        return (ga,)

    return record(out, (a,), bwd)


def resize_nearest(a, out_h, out_w):
    """Nearest-neighbor resize of an [H, W, C] map."""
    h, w, _ = a.shape
    ri = (np.arange(out_h) * h) // out_h
    ci = (np.arange(out_w) * w) // out_w
    out = Tensor(a.data[ri][:, ci], dtype=a.dtype)

    def bwd(g):
        ga = np.zeros_like(a.data)
        rr = np.repeat(ri, out_w)
        cc = np.tile(ci, out_h)
        np.add.at(ga, (rr, cc), g.reshape(out_h * out_w, -1))
        return (ga,)

    return record(out, (a,), bwd)


def resize_bilinear(a, out_h, out_w):
    """Bilinear resize of an [H, W, C] map (half-pixel centers)."""
    h, w, _ = a.shape
    sr = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    sc = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    wr = (sr - r0).astype(a.dtype)[:, None, None]
    wc = (sc - c0).astype(a.dtype)[None, :, None]
    x = a.data
    y = (x[r0][:, c0] * (1 - wr) * (1 - wc) + x[r0][:, c1] * (1 - wr) * wc
         + x[r1][:, c0] * wr * (1 - wc) + x[r1][:, c1] * wr * wc)
    out = Tensor(y.astype(a.dtype), dtype=a.dtype)

    def bwd(g):
        ga = np.zeros_like(x)
        for rows, cols, wgt in ((r0, c0, (1 - wr) * (1 - wc)), (r0, c1, (1 - wr) * wc),
                                (r1, c0, wr * (1 - wc)), (r1, c1, wr * wc)):
            rr = np.repeat(rows, out_w)
            cc = np.tile(cols, out_h)
            np.add.at(ga, (rr, cc), (g * wgt).reshape(out_h * out_w, -1))
        return (ga,)

    return record(out, (a,), bwd)


def linear(x, w, b=None):
    """x @ w (+ b broadcast over leading axes)."""
    y = matmul(x, w)
    if b is not None:
        shape = (1,) * (len(y.shape) - 1) + (b.shape[0],)
        y = add(y, broadcast_to(reshape(b, shape), y.shape))
    return y

"""Differentiable operations over :class:`Tensor`.

Every function returns a new tensor and, when any input requires a
gradient, records a :class:`ComputeNode` for :func:`backward`.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from detnas.diffcore.tensor import Tensor, as_tensor, make_result
from detnas.errors import ConfigError, InputError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return make_result(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return make_result(
        "sub", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data
    return make_result(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, s: float) -> Tensor:
    x = as_tensor(x)
    s = x.data.dtype.type(s)
    return make_result("scale", x.data * s, (x,), lambda g: (g * s,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return make_result("square", x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return make_result("silu", out, (x,), lambda g: (g * (s + x.data * s * (1 - s)),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result("clip", out, (x,), lambda g: (g * inside,))


# -- reductions and reshaping -------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_result("sum", out, (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(sum(x), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])

    def bw(g):
        full = np.zeros_like(x.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result("getitem", out, (x,), bw)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InputError(f"matmul shapes {a.shape} @ {b.shape}")
    return make_result(
        "matmul", a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


# -- softmax family ------------------------------------------------------

def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0:
        raise InputError("softmax of an empty vector")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return make_result(
        "log_softmax", out, (x,),
        lambda g: (g - p * g.sum(axis=axis, keepdims=True),),
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.data.size == 0:
        raise InputError("softmax of an empty vector")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    return make_result(
        "softmax", p, (x,),
        lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),),
    )


# -- channel plumbing ----------------------------------------------------

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise InputError("concat_channels needs at least one input")
    n, _, h, w = xs[0].shape
    for t in xs:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise InputError(f"concat_channels: {t.shape} does not align with {xs[0].shape}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_result("concat_channels", out, tuple(xs), bw)


def slice_channels(x: Tensor, c: int) -> Tensor:
    """Leading ``c`` channels of a feature map."""
    if not 0 < c <= x.shape[1]:
        raise InputError(f"slice_channels: c={c} outside (0, {x.shape[1]}]")
    if c == x.shape[1]:
        return x
    return getitem(x, (slice(None), slice(0, c)))


def pad_channels(x: Tensor, c: int) -> Tensor:
    """Extend a feature map with zero channels up to ``c``."""
    have = x.shape[1]
    if c < have:
        raise InputError(f"pad_channels: cannot shrink {have} to {c}")
    if c == have:
        return x
    out = np.zeros((x.shape[0], c) + x.shape[2:], dtype=x.dtype)
    out[:, :have] = x.data
    return make_result("pad_channels", out, (x,), lambda g: (g[:, :have],))


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result("upsample_nearest2x", out, (x,), bw)


def space_to_depth(x: Tensor) -> Tensor:
    """Focus-style 2x2 rearrangement: (N,C,H,W) -> (N,4C,H/2,W/2)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise InputError(f"space_to_depth needs even spatial dims, got {h}x{w}")
    parts = [x.data[..., ::2, ::2], x.data[..., 1::2, ::2], x.data[..., ::2, 1::2], x.data[..., 1::2, 1::2]]
    out = np.concatenate(parts, axis=1)

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., ::2, ::2] = g[:, 0:c]
        full[..., 1::2, ::2] = g[:, c:2 * c]
        full[..., ::2, 1::2] = g[:, 2 * c:3 * c]
        full[..., 1::2, 1::2] = g[:, 3 * c:]
        return (full,)

    return make_result("space_to_depth", out, (x,), bw)


# -- convolution and pooling ---------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    sn, sc, sh, sw = xp.strides
    n, c = xp.shape[:2]
    return as_strided(
        xp,
        shape=(n, ho, wo, c, k, k),
        strides=(sn, sh * stride, sw * stride, sc, sh * dilation, sw * dilation),
        writeable=False,
    )


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation on NCHW input, computed via im2col."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise InputError(f"conv2d expects rank-4 input and weight, got {x.shape}, {w.shape}")
    cout, cin, k, k2 = w.shape
    if k != k2:
        raise InputError(f"conv2d needs square kernels, got {k}x{k2}")
    if x.shape[1] != cin:
        raise InputError(f"conv2d: input has {x.shape[1]} channels, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise InputError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigError(f"conv2d: stride={stride} padding={padding} dilation={dilation}")
    n, _, h, wd = x.shape
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(wd, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: output size {ho}x{wo} for input {h}x{wd}")

    dtype = np.result_type(x.dtype, w.dtype)
    xp = x.data.astype(dtype, copy=False)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _windows(xp, k, stride, dilation, ho, wo).reshape(n * ho * wo, cin * k * k)
    wmat = w.data.astype(dtype, copy=False).reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    inputs = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape).astype(w.dtype, copy=False)
        dcols = (g2 @ wmat).reshape(n, ho, wo, cin, k, k)
        gxp = np.zeros(xp.shape, dtype=dtype)
        hspan = stride * (ho - 1) + 1
        wspan = stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                r, c = i * dilation, j * dilation
                gxp[:, :, r:r + hspan:stride, c:c + wspan:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        grads = [gx.astype(x.dtype, copy=False), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).astype(bias.dtype, copy=False))
        return tuple(grads)

    return make_result("conv2d", out, inputs, bw)


def maxpool2d(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Windowed maximum; ties route gradient to the first index in scan order."""
    if k < 1 or stride < 1 or padding < 0 or padding > k // 2:
        raise ConfigError(f"maxpool2d: k={k} stride={stride} padding={padding}")
    n, c, h, wd = x.shape
    ho = conv_output_size(h, k, stride, padding, 1)
    wo = conv_output_size(wd, k, stride, padding, 1)
    if ho < 1 or wo < 1:
        raise ConfigError(f"maxpool2d: output size {ho}x{wo}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = _windows(xp, k, stride, 1, ho, wo).reshape(n, ho, wo, c, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0].transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho)[None, :, None, None] * stride + di
        cols = np.arange(wo)[None, None, :, None] * stride + dj
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, None, None, :]
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        np.add.at(gxp, (nn, cc, rows, cols), g.transpose(0, 2, 3, 1))
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return (gx,)

    return make_result("maxpool2d", out, (x,), bw)

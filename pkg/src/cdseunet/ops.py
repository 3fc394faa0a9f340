"""Differentiable operations on (N, C, H, W) tensors.

Every function takes and returns :class:`~cdseunet.tensor.Tensor` objects and
registers a backward closure when an input requires a gradient. Conventions
fixed here so gradient checks are deterministic:

* convolution is cross-correlation (the kernel is not flipped);
* ``relu`` has derivative 0 at exactly 0;
* ``maxpool2d`` routes the gradient to the first maximum in row-major order.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigError, DimensionError
from .tensor import Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _require_rank(x: Tensor, rank: int, op: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{op} expects a rank-{rank} tensor, got shape {x.shape}")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, Cin, H, W) with ``w`` (Cout, Cin, k, k)."""
    _require_rank(x, 4, "conv2d")
    _require_rank(w, 4, "conv2d weight")
    n, c, h, wd = x.shape
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"conv2d needs a square odd kernel, got {k}x{k2}")
    if c != cin:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {cin}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ConfigError("conv2d: stride must be >= 1 and padding >= 0")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {k} too large for input {h}x{wd} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wdat = w.data

    if k == 1 and stride == 1:
        cols = None
        out = np.einsum("oc,nchw->nohw", wdat[:, :, 0, 0], xp, optimize=True)
    else:
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        # (N, Ho, Wo, Cin*k*k) @ (Cin*k*k, Cout): one BLAS call
        mat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
        out = (mat @ wdat.reshape(cout, -1).T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
        cols = mat
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        if cols is None:
            w2 = wdat[:, :, 0, 0]
            gw = np.einsum("nohw,nchw->oc", g, xp, optimize=True)[:, :, None, None]
            gxp = np.einsum("oc,nohw->nchw", w2, g, optimize=True)
        else:
            gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
            gw = (gmat.T @ cols).reshape(cout, cin, k, k)
            gcols = (gmat @ wdat.reshape(cout, -1)).reshape(n, ho, wo, cin, k, k)
            gxp = np.zeros_like(xp)
            hspan = stride * (ho - 1) + 1
            wspan = stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward_fn)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics over (N, H, W) are used and the
    running buffers are updated in place (running variance uses the unbiased
    estimate). In eval mode the running buffers are used unchanged.
    """
    _require_rank(x, 4, "batchnorm2d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    gdat = gamma.data[None, :, None, None]
    bdat = beta.data[None, :, None, None]
    m = x.shape[0] * x.shape[2] * x.shape[3]

    if training:
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        centered = x.data - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(-1)
        unbiased = var.reshape(-1) * (m / (m - 1) if m > 1 else 1.0)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)[None, :, None, None]
        xhat = (x.data - running_mean.astype(x.dtype)[None, :, None, None]) * inv_std
    out = gdat * xhat + bdat

    def backward_fn(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gdat
        if training:
            gx = inv_std / m * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),))


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; only window == stride == 2 is supported."""
    _require_rank(x, 4, "maxpool2d")
    if window != 2 or stride != 2:
        raise ConfigError("maxpool2d supports window=2, stride=2 only")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)[..., None]  # argmax returns the first max: row-major tie rule
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward_fn(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_result(out, (x,), backward_fn)


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    _require_rank(x, 4, "upsample2d")
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward_fn(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_rank(x, 4, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward_fn(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return make_result(out, (x,), backward_fn)


def flatten(x: Tensor) -> Tensor:
    """(N, ...) -> (N, prod(...))."""
    shape = x.shape
    out = x.data.reshape(shape[0], -1)
    return make_result(out, (x,), lambda g: (g.reshape(shape),))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map of (N, Cin) by ``w`` (Cout, Cin) plus ``b`` (Cout,)."""
    _require_rank(x, 2, "linear")
    _require_rank(w, 2, "linear weight")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[1]} != weight width {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward_fn(g):
        return g @ w.data, g.T @ x.data, (g.sum(axis=0) if b is not None else None)

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis, ``a``'s channels first."""
    _require_rank(a, 4, "concat_channels")
    _require_rank(b, 4, "concat_channels")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise DimensionError(f"concat_channels: {a.shape} and {b.shape} differ outside the channel axis")
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_rank(x, 4, "slice_channels")
    out = x.data[:, start:stop].copy()

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(out, (x,), backward_fn)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each (n, c) feature plane of ``x`` by the scalar ``s[n, c]``."""
    _require_rank(x, 4, "scale_channels")
    if s.shape != x.shape[:2]:
        raise DimensionError(f"scale_channels: scale shape {s.shape} != {x.shape[:2]}")
    sb = s.data[:, :, None, None]
    out = x.data * sb

    def backward_fn(g):
        return g * sb, (g * x.data).sum(axis=(2, 3))

    return make_result(out, (x, s), backward_fn)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    return make_result(x.data * factor, (x,), lambda g: (g * factor,))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))

"""Differentiable image ops used by the network.

Feature tensors are logically ``[N, C, H, W]`` (a bare ``[C, H, W]`` is
treated as a batch of one).  Internally the heavy ops work on channels-last
memory and hand back ``[N, C, H, W]`` views of it, so a chain of
conv -> batchnorm -> relu never pays for a layout change.
"""
from __future__ import annotations

from fractions import Fraction
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import _kernels
from .core import ShapeError, Tensor


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return y.reshape(*y.shape[1:]) if squeeze else y


def _channels_last(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 2, 3, 1)


def _im2col3x3(xh: np.ndarray) -> np.ndarray:
    """Rows of 3x3xC patches, ordered (ky, kx, c), from channels-last input."""
    n, h, w, c = xh.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=xh.dtype)
    xp[:, 1:-1, 1:-1] = xh
    s = xp.strides
    # a row of three neighbouring pixels is contiguous in channels-last memory
    view = as_strided(xp, (n, h, w, 3, 3 * c), (s[0], s[1], s[2], s[1], s[3]))
    return np.ascontiguousarray(view).reshape(n * h * w, 9 * c)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    xb, squeeze = _batched(x)
    n, cin, h, w = xb.shape
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d needs a [Cout,Cin,3,3] kernel, got {kernel.shape}")
    cout = kernel.shape[0]
    if kernel.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {kernel.shape[1]}")
    xh = _channels_last(xb.data)
    wm = kernel.data.transpose(2, 3, 1, 0).reshape(9 * cin, cout)
    cols = _im2col3x3(xh)
    out = cols @ wm
    if bias is not None:
        out += bias.data
    y = out.reshape(n, h, w, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gh = _channels_last(g).reshape(-1, cout)
        gk = (cols.T @ gh).reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
        gb = gh.sum(axis=0) if bias is not None else None
        gx = None
        if xb.requires_grad:
            # the input gradient is a 3x3 correlation of g with the flipped, transposed kernel
            wflip = kernel.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(9 * cout, cin)
            gx = (_im2col3x3(_channels_last(g)) @ wflip).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (xb, kernel, bias) if bias is not None else (xb, kernel)
    return _unbatch(Tensor._from_op(y, parents, bw, "conv2d"), squeeze)


def conv1x1(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-pixel linear map of channel vectors; kernel is [Cout,Cin,1,1]."""
    xb, squeeze = _batched(x)
    n, cin, h, w = xb.shape
    if kernel.ndim != 4 or kernel.shape[2:] != (1, 1) or kernel.shape[1] != cin:
        raise ShapeError(f"conv1x1 kernel {kernel.shape} does not fit input channels {cin}")
    cout = kernel.shape[0]
    wm = kernel.data[:, :, 0, 0]
    xf = _channels_last(xb.data).reshape(-1, cin)
    out = xf @ wm.T
    if bias is not None:
        out += bias.data
    y = out.reshape(n, h, w, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gh = _channels_last(g).reshape(-1, cout)
        gk = (gh.T @ xf)[:, :, None, None]
        gx = (gh @ wm).reshape(n, h, w, cin).transpose(0, 3, 1, 2) if xb.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, gh.sum(axis=0)

    parents = (xb, kernel, bias) if bias is not None else (xb, kernel)
    return _unbatch(Tensor._from_op(y, parents, bw, "conv1x1"), squeeze)


def maxpool2x2(x: Tensor) -> Tensor:
    """Max over disjoint 2x2 windows.

    The backward pass routes the whole gradient of a window to its first
    maximum in row-major order, so ties are deterministic.
    """
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    xh = np.ascontiguousarray(_channels_last(xb.data))
    out = np.empty((n, h2, w2, c), dtype=xh.dtype)
    idx = np.empty((n, h2, w2, c), dtype=np.uint8)
    _kernels.maxpool_forward(xh, out, idx)
    y = out.transpose(0, 3, 1, 2)

    def bw(g):
        gx = np.empty((n, h, w, c), dtype=g.dtype)
        _kernels.maxpool_backward(np.ascontiguousarray(_channels_last(g)), idx, gx)
        return (gx.transpose(0, 3, 1, 2),)

    return _unbatch(Tensor._from_op(y, (xb,), bw, "maxpool2x2"), squeeze)


def global_avgpool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, [N,C,H,W] -> [N,C,1,1]."""
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    y = xb.data.mean(axis=(2, 3), keepdims=True)

    def bw(g):
        return (np.broadcast_to(g / (h * w), xb.shape).copy(),)

    return _unbatch(Tensor._from_op(y, (xb,), bw, "global_avgpool"), squeeze)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In training mode the batch statistics are used and the running
    estimates are updated in place (unbiased variance, like most frameworks).
    """
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    m = n * h * w
    if m == 0:
        raise ShapeError("batchnorm over an empty batch")
    # statistics over the rows of the channels-last [N*H*W, C] matrix
    x2 = np.ascontiguousarray(_channels_last(xb.data)).reshape(m, c)
    if training:
        mu, var = _kernels.bn_stats(x2)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1) if m > 1 else 1.0)
    else:
        mu, var = running_mean, running_var
    dt = xb.dtype
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    gam, bet = gamma.data.astype(dt, copy=False), beta.data.astype(dt, copy=False)
    xhat, y2 = np.empty_like(x2), np.empty_like(x2)
    _kernels.bn_apply(x2, mu.astype(dt), inv_std, gam, bet, xhat, y2)
    y = y2.reshape(n, h, w, c).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = np.ascontiguousarray(_channels_last(g)).reshape(m, c)
        gx = np.empty_like(g2)
        ggamma, gbeta = _kernels.bn_backward(g2, xhat.astype(g2.dtype, copy=False), gam, inv_std, training, gx)
        return gx.reshape(n, h, w, c).transpose(0, 3, 1, 2), ggamma, gbeta

    return _unbatch(Tensor._from_op(y, (xb, gamma, beta), bw, "batchnorm"), squeeze)


# --- non-differentiable resampling -----------------------------------------------

def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    ratio = n_in / n_out
    src = (np.arange(n_out) + 0.5) * ratio - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for tap in range(-1, 3):
        wts = _cubic(frac - tap)
        cols = np.clip(base + tap, 0, n_in - 1)
        np.add.at(mat, (rows, cols), wts)
    return mat


def resize_bicubic(
    image: Union[np.ndarray, Tensor],
    scale: Union[float, Fraction, None] = None,
    size: Optional[tuple[int, int]] = None,
) -> np.ndarray:
    """Catmull-Rom (a=-0.5) resampling of a [C,H,W] image with edge clamping.

    Give either ``scale`` (output extents ``round(extent*scale)``, at least 1)
    or an explicit ``size=(H, W)``.  Returns a plain array; this op is only
    used for data synthesis and carries no gradient.
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.ndim != 3:
        raise ShapeError(f"resize_bicubic expects [C,H,W], got {img.shape}")
    _, h, w = img.shape
    if size is None:
        if scale is None or scale <= 0:
            raise ValueError("resize_bicubic needs a positive scale or an explicit size")
        size = (max(1, round(h * scale)), max(1, round(w * scale)))
    oh, ow = size
    if (oh, ow) == (h, w):
        return img.copy()
    wy = _resize_matrix(h, oh).astype(img.dtype)
    wx = _resize_matrix(w, ow).astype(img.dtype)
    return np.einsum("oh,chw,pw->cop", wy, img, wx, optimize=True)

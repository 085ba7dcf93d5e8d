"""Local Attention Kernel.

Every query position ``x`` attends to the ``(2r+1)**2`` key positions
``x + u`` with ``u`` in ``[-r, r]**2``.  The window index of an offset
``u = (uy, ux)`` is ``d = (uy + r) * (2r + 1) + (ux + r)``.

All forward and backward passes reduce to three loops over positions, run
as compiled kernels on channels-last memory:

* ``correlate(a, b)[p, d] = a[p] . b[p + u_d]``   (logits; map gradient)
* ``aggregate(w, b)[p]    = sum_d w[p, d] b[p + u_d]``   (attention conv; query gradient)
* ``scatter(w, a)[t]      = sum_d w[t - u_d, d] a[t - u_d]``   (key/value gradient)

``scatter`` is computed as ``aggregate`` over window-transposed weights.

Reads outside the feature extent are skipped, which is the same as zero
padding the keys and values.  Whether those window slots also take part in
the softmax is the ``boundary`` rule: ``"mask"`` (default) removes them,
``"zero-pad"`` keeps them as logits of value 0.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Optional, Union

import numba
import numpy as np
from numba import njit, prange

from .tensor.core import ShapeError, Tensor

numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

BOUNDARY_RULES = ("mask", "zero-pad")


# --- compiled kernels ----------------------------------------------------------------

@njit(parallel=True, fastmath=True, cache=True)
def _correlate(a, b, r, h0, h1, out):
    n_img, height, width, channels = a.shape
    side = 2 * r + 1
    rows = h1 - h0
    for job in prange(n_img * rows):
        n = job // rows
        h = h0 + job % rows
        for w in range(width):
            for dy in range(side):
                y = h + dy - r
                for dx in range(side):
                    x = w + dx - r
                    d = dy * side + dx
                    if y < 0 or y >= height or x < 0 or x >= width:
                        out[n, h - h0, w, d] = 0.0
                    else:
                        acc = 0.0
                        for c in range(channels):
                            acc += a[n, h, w, c] * b[n, y, x, c]
                        out[n, h - h0, w, d] = acc


@njit(parallel=True, fastmath=True, cache=True)
def _aggregate(wts, b, r, h0, h1, out):
    n_img, height, width, channels = b.shape
    side = 2 * r + 1
    rows = h1 - h0
    for job in prange(n_img * rows):
        n = job // rows
        h = h0 + job % rows
        acc = np.zeros(channels, dtype=out.dtype)
        for w in range(width):
            acc[:] = 0.0
            for dy in range(side):
                y = h + dy - r
                if y < 0 or y >= height:
                    continue
                for dx in range(side):
                    x = w + dx - r
                    if x < 0 or x >= width:
                        continue
                    wv = wts[n, h - h0, w, dy * side + dx]
                    for c in range(channels):
                        acc[c] += wv * b[n, y, x, c]
            out[n, h - h0, w, :] = acc


@njit(parallel=True, fastmath=True, cache=True)
def _transpose_windows(wts, r, out):
    # out[t, D-1-d] = wts[t - u_d, d]: the weight each source position sends to t
    n_img, height, width, depth = wts.shape
    side = 2 * r + 1
    for job in prange(n_img * height):
        n = job // height
        y = job % height
        for x in range(width):
            for dy in range(side):
                py = y - (dy - r)
                for dx in range(side):
                    px = x - (dx - r)
                    d = dy * side + dx
                    if py < 0 or py >= height or px < 0 or px >= width:
                        out[n, y, x, depth - 1 - d] = 0.0
                    else:
                        out[n, y, x, depth - 1 - d] = wts[n, py, px, d]


def correlate(a: np.ndarray, b: np.ndarray, r: int, rows: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Window inner products of channels-last ``a`` and ``b``; out-of-range slots are 0."""
    n, h, w, _ = a.shape
    h0, h1 = rows or (0, h)
    out = np.empty((n, h1 - h0, w, (2 * r + 1) ** 2), dtype=a.dtype)
    _correlate(a, b, r, h0, h1, out)
    return out


def aggregate(wts: np.ndarray, b: np.ndarray, r: int, rows: Optional[tuple[int, int]] = None) -> np.ndarray:
    n, h, w, c = b.shape
    h0, h1 = rows or (0, h)
    out = np.empty((n, h1 - h0, w, c), dtype=b.dtype)
    _aggregate(wts, b, r, h0, h1, out)
    return out


def scatter(wts: np.ndarray, a: np.ndarray, r: int) -> np.ndarray:
    """Adjoint of :func:`aggregate` with respect to ``b``: transposed windows, then aggregate."""
    wt = np.empty_like(wts)
    _transpose_windows(wts, r, wt)
    return aggregate(wt, a, r)


# --- operation counters -------------------------------------------------------------------

@dataclass
class OpCostReport:
    multiply_accumulate_count: int = 0
    attention_map_elements: int = 0

    def __post_init__(self):
        if self.multiply_accumulate_count < 0 or self.attention_map_elements < 0:
            raise ValueError("cost counts must be nonnegative")


_active_counters: list[OpCostReport] = []


@contextmanager
def count_ops() -> Iterator[OpCostReport]:
    """Collect MACs and attention-map sizes of every kernel call in the block."""
    counter = OpCostReport()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _tally(macs: int, elements: int = 0) -> None:
    for c in _active_counters:
        c.multiply_accumulate_count += int(macs)
        c.attention_map_elements += int(elements)


def cost_report(height: int, width: int, channels: int, radius: int, mode: str = "local") -> OpCostReport:
    """Analytic per-image cost of one attention pass (map generation + convolution)."""
    if min(height, width, channels) <= 0 or radius < 0:
        raise ValueError("cost_report needs positive extents")
    hw = height * width
    if mode == "local":
        window = (2 * radius + 1) ** 2
        return OpCostReport(2 * hw * window * channels, hw * window)
    if mode == "global":
        return OpCostReport(2 * hw * hw * channels, hw * hw)
    raise ValueError(f"unknown mode {mode!r}")


# --- attention map type ---------------------------------------------------------------------

@lru_cache(maxsize=64)
def valid_mask(height: int, width: int, r: int) -> np.ndarray:
    """Boolean [H, W, D] marking window slots that fall inside the feature."""
    off = np.arange(-r, r + 1)
    ys = np.arange(height)[:, None] + off[None, :]
    xs = np.arange(width)[:, None] + off[None, :]
    vy = (ys >= 0) & (ys < height)
    vx = (xs >= 0) & (xs < width)
    mask = vy[:, None, :, None] & vx[None, :, None, :]
    mask = mask.reshape(height, width, -1)
    mask.flags.writeable = False
    return mask


@dataclass
class LocalAttentionMap:
    """Per-position attention windows.

    ``tensor`` is logically ``[N, (2r+1)**2, H, W]`` so that it can feed a
    convolution directly; :meth:`window_array` gives the ``[N, H, W, 2r+1, 2r+1]``
    view.  ``batched`` records whether the inputs carried a batch axis.
    """

    tensor: Tensor
    radius: int
    normalized: bool
    boundary: str = "mask"
    batched: bool = True
    _nhwd: np.ndarray = field(default=None, repr=False)

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def spatial(self) -> tuple[int, int]:
        return self.tensor.shape[2], self.tensor.shape[3]

    def window_array(self) -> np.ndarray:
        n, _, h, w = self.tensor.shape
        arr = self.tensor.data.transpose(0, 2, 3, 1).reshape(n, h, w, self.side, self.side)
        return arr if self.batched else arr[0]

    def in_bounds(self) -> np.ndarray:
        h, w = self.spatial
        return valid_mask(h, w, self.radius).reshape(h, w, self.side, self.side)

    def to_channels(self) -> Tensor:
        """[N, (2r+1)**2, H, W] tensor for the homography head."""
        return self.tensor

    @classmethod
    def from_window_array(cls, arr: np.ndarray, normalized: bool = False) -> "LocalAttentionMap":
        batched = arr.ndim == 5
        a = arr if batched else arr[None]
        n, h, w, s, s2 = a.shape
        if s != s2 or s % 2 == 0:
            raise ShapeError(f"window must be square with odd side, got {s}x{s2}")
        nhwd = np.ascontiguousarray(a.reshape(n, h, w, s * s))
        return cls(Tensor(nhwd.transpose(0, 3, 1, 2), dtype=arr.dtype), (s - 1) // 2, normalized,
                   batched=batched, _nhwd=nhwd)

    def nhwd(self) -> np.ndarray:
        if self._nhwd is None:
            self._nhwd = np.ascontiguousarray(self.tensor.data.transpose(0, 2, 3, 1))
        return self._nhwd


# --- differentiable ops -----------------------------------------------------------------

def _prep(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape(1, *x.shape), False
    if x.ndim != 4:
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")
    return x, True


def _nhwc(x: Tensor) -> np.ndarray:
    return np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))


def _nchw(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 3, 1, 2)


def _check_pair(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _check_boundary(boundary: str) -> None:
    if boundary not in BOUNDARY_RULES:
        raise ValueError(f"boundary must be one of {BOUNDARY_RULES}, got {boundary!r}")


def local_attention_logits(q: Tensor, k: Tensor, radius: int) -> LocalAttentionMap:
    """Raw local correspondence map ``M'(x, u) = q(x) . k(x + u)``."""
    if radius < 1:
        raise ValueError("radius must be at least 1")
    _check_pair(q, k, "local_attention_logits")
    qb, batched = _prep(q)
    kb, _ = _prep(k)
    qa, ka = _nhwc(qb), _nhwc(kb)
    n, h, w, c = qa.shape
    logits = correlate(qa, ka, radius)
    _tally(n * h * w * logits.shape[-1] * c, n * h * w * logits.shape[-1])

    def bw(g):
        gl = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gq = _nchw(aggregate(gl, ka, radius)) if qb.requires_grad else None
        gk = _nchw(scatter(gl, qa, radius)) if kb.requires_grad else None
        return gq, gk

    t = Tensor._from_op(_nchw(logits), (qb, kb), bw, "lak_logits")
    return LocalAttentionMap(t, radius, normalized=False, batched=batched, _nhwd=logits)


def _masked_softmax(logits: np.ndarray, scale: float, mask: Optional[np.ndarray]) -> np.ndarray:
    z = logits * scale
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(m: np.ndarray, gm: np.ndarray, scale: float) -> np.ndarray:
    return scale * m * (gm - (gm * m).sum(axis=-1, keepdims=True))


def softmax_local(raw: LocalAttentionMap, channels: int, boundary: str = "mask") -> LocalAttentionMap:
    """Softmax of ``M' / sqrt(C)`` over each position's window."""
    _check_boundary(boundary)
    if raw.normalized:
        raise ValueError("softmax_local expects a raw (unnormalized) map")
    scale = 1.0 / math.sqrt(channels)
    h, w = raw.spatial
    mask = valid_mask(h, w, raw.radius) if boundary == "mask" else None
    probs = _masked_softmax(raw.nhwd(), scale, mask)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1)
        return (_nchw(_softmax_backward(probs, gm, scale)),)

    t = Tensor._from_op(_nchw(probs), (raw.tensor,), bw, "lak_softmax")
    return LocalAttentionMap(t, raw.radius, normalized=True, boundary=boundary,
                             batched=raw.batched, _nhwd=probs)


def local_attention_conv(m: LocalAttentionMap, v: Tensor) -> Tensor:
    """Position-varying convolution ``h(x) = sum_u M(x, u) v(x + u)``."""
    vb, _ = _prep(v)
    n, c, h, w = vb.shape
    if m.tensor.shape[0] != n or m.spatial != (h, w):
        raise ShapeError(f"attention map {m.tensor.shape} does not match values {vb.shape}")
    r = m.radius
    wa, va = m.nhwd(), _nhwc(vb)
    out = aggregate(wa, va, r)
    _tally(n * h * w * wa.shape[-1] * c)

    def bw(g):
        ga = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gm = _nchw(correlate(ga, va, r)) if m.tensor.requires_grad else None
        gv = _nchw(scatter(wa, ga, r)) if vb.requires_grad else None
        return gm, gv

    y = Tensor._from_op(_nchw(out), (m.tensor, vb), bw, "lak_conv")
    return y if m.batched else y.reshape(c, h, w)


def lak_fused(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    channels: int,
    radius: int,
    boundary: str = "mask",
    low_memory: bool = False,
    block_rows: int = 8,
) -> tuple[Tensor, LocalAttentionMap]:
    """Local self/cross attention ``softmax(q . k / sqrt(C))`` applied to ``v``.

    Returns the attended features and the normalized attention map.  With
    ``low_memory`` the raw logits exist only for one block of rows at a time.
    """
    _check_boundary(boundary)
    if radius < 1:
        raise ValueError("radius must be at least 1")
    _check_pair(q, k, "lak_fused")
    if q.ndim != v.ndim or q.shape[:-3] != v.shape[:-3] or q.shape[-2:] != v.shape[-2:]:
        raise ShapeError(f"lak_fused: values {v.shape} do not match queries {q.shape}")
    qb, batched = _prep(q)
    kb, _ = _prep(k)
    vb, _ = _prep(v)
    qa, ka, va = _nhwc(qb), _nhwc(kb), _nhwc(vb)
    n, h, w, c = qa.shape
    r = radius
    depth = (2 * r + 1) ** 2
    scale = 1.0 / math.sqrt(channels)
    mask = valid_mask(h, w, r) if boundary == "mask" else None
    step = block_rows if low_memory else h
    probs = np.empty((n, h, w, depth), dtype=qa.dtype)
    out = np.empty_like(va)
    for h0 in range(0, h, step):
        h1 = min(h, h0 + step)
        blk = correlate(qa, ka, r, (h0, h1))
        probs[:, h0:h1] = _masked_softmax(blk, scale, None if mask is None else mask[h0:h1])
        out[:, h0:h1] = aggregate(probs[:, h0:h1], va, r, (h0, h1))
    _tally(2 * n * h * w * depth * c, n * h * w * depth)

    def bw(g):
        ga = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gm = correlate(ga, va, r)
        gv = scatter(probs, ga, r) if vb.requires_grad else None
        gl = np.ascontiguousarray(_softmax_backward(probs, gm, scale))
        gq = aggregate(gl, ka, r) if qb.requires_grad else None
        gk = scatter(gl, qa, r) if kb.requires_grad else None
        return tuple(None if a is None else _nchw(a) for a in (gq, gk, gv))

    y = Tensor._from_op(_nchw(out), (qb, kb, vb), bw, "lak_fused")
    # the map shares the forward buffer; gradients flow through the fused node only
    amap = LocalAttentionMap(Tensor(_nchw(probs), dtype=probs.dtype), r, normalized=True,
                             boundary=boundary, batched=batched, _nhwd=probs)
    return (y if batched else y.reshape(va.shape[-1], h, w)), amap


# --- dense reference ---------------------------------------------------------------------------

class AttentionBudgetError(ValueError):
    """The dense oracle was asked for a map larger than its element budget."""


DEFAULT_ORACLE_BUDGET = 1 << 25


def global_attention_oracle(
    q: Union[Tensor, np.ndarray],
    k: Union[Tensor, np.ndarray],
    v: Union[Tensor, np.ndarray],
    channels: int,
    radius: Optional[int] = None,
    max_elements: int = DEFAULT_ORACLE_BUDGET,
) -> np.ndarray:
    """Dense ``HW x HW`` attention; ``radius`` restricts each query to its window.

    Quadratic in the number of positions, so inputs whose map would exceed
    ``max_elements`` entries are refused.
    """
    qa, ka, va = (np.asarray(t.data if isinstance(t, Tensor) else t) for t in (q, k, v))
    single = qa.ndim == 3
    if single:
        qa, ka, va = qa[None], ka[None], va[None]
    n, c, h, w = qa.shape
    hw = h * w
    if hw * hw > max_elements:
        raise AttentionBudgetError(
            f"dense attention over {h}x{w} needs {hw * hw} map elements; budget is {max_elements}"
        )
    if radius is not None:
        ys, xs = np.divmod(np.arange(hw), w)
        allowed = (np.abs(ys[:, None] - ys[None, :]) <= radius) & (np.abs(xs[:, None] - xs[None, :]) <= radius)
    out = np.empty_like(va)
    for i in range(n):
        qf = qa[i].reshape(c, hw).T
        kf = ka[i].reshape(c, hw).T
        vf = va[i].reshape(va.shape[1], hw).T
        logits = (qf @ kf.T) / math.sqrt(channels)
        if radius is not None:
            logits = np.where(allowed, logits, -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        att = np.exp(logits)
        att /= att.sum(axis=1, keepdims=True)
        out[i] = (att @ vf).T.reshape(va.shape[1], h, w)
        del logits, att
    _tally(2 * n * hw * hw * c, n * hw * hw)
    return out[0] if single else out

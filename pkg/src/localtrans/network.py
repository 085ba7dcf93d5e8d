"""Multiscale local-transformer homography network.

Level ``k`` of ``K`` works on feature grids of stride ``2**(K-k+1)``: the
coarsest level comes first and each later level refines the residual left by
the ones before it.  Per level the two images are encoded by a shared
convolutional stack, refined by local self-attention, cross-attended, turned
into a raw local correspondence map and regressed to four corner offsets.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import lak
from .homography.geometry import (
    DegenerateConfigurationError,
    DegenerateHomographyError,
    Homography,
    base_corners,
    dlt,
    warp,
)
from .tensor import ops
from .tensor.core import Tensor, concat, get_default_dtype
from .tensor.nn import Conv1x1, ConvBNReLU, Module

log = logging.getLogger(__name__)

GROUPS = ("encoder", "saem", "tdm", "head")


class CascadeError(RuntimeError):
    """A level produced corner offsets that do not define a homography."""

    def __init__(self, level: int, sample: int, reason: str):
        super().__init__(f"level {level}, sample {sample}: {reason}")
        self.level = level
        self.sample = sample


@dataclass
class ModelConfig:
    levels: int = 3
    channels: int = 32
    height: int = 128
    width: int = 128
    radii: Optional[tuple[int, ...]] = None
    boundary: str = "mask"
    shared_encoder: bool = True
    scaled_correlation: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1 or self.channels < 1:
            raise ValueError("levels and channels must be positive")
        div = 2 ** self.levels
        if self.height % div or self.width % div:
            raise ValueError(f"input {self.height}x{self.width} is not divisible by 2**K = {div}")
        if self.radii is not None:
            self.radii = tuple(int(r) for r in self.radii)
            if len(self.radii) != self.levels or min(self.radii) < 1:
                raise ValueError(f"radii override needs {self.levels} positive entries")
        if self.boundary not in lak.BOUNDARY_RULES:
            raise ValueError(f"unknown boundary rule {self.boundary!r}")

    def radius(self, k: int) -> int:
        return self.radii[k - 1] if self.radii is not None else k + 1

    def stride(self, k: int) -> int:
        return 2 ** (self.levels - k + 1)

    def grid(self, k: int) -> tuple[int, int]:
        s = self.stride(k)
        return self.height // s, self.width // s

    def window_side(self, k: int) -> int:
        return 2 * self.radius(k) + 1


class Block(Module):
    """Two conv+BN+ReLU layers followed by 2x2 max pooling (or global average pooling)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, global_pool: bool = False):
        super().__init__()
        self.c1 = self.add_child("c1", ConvBNReLU(cin, cout, rng))
        self.c2 = self.add_child("c2", ConvBNReLU(cout, cout, rng))
        self.global_pool = global_pool

    def __call__(self, x: Tensor) -> Tensor:
        y = self.c2(self.c1(x))
        if self.global_pool:
            return ops.global_avgpool(y)
        h, w = y.shape[-2:]
        # odd grids (only with unusual K/H combinations) skip the pooling step
        return ops.maxpool2x2(y) if h % 2 == 0 and w % 2 == 0 else y


class Encoder(Module):
    """Siamese feature extractor; level ``k`` reads the output of ``K-k+1`` blocks.

    With ``shared`` one stack of ``K`` blocks is truncated per level, otherwise
    every level owns an independent stack.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        n_stacks = 1 if cfg.shared_encoder else cfg.levels
        self.stacks: list[list[Block]] = []
        for s in range(n_stacks):
            depth = cfg.levels if cfg.shared_encoder else cfg.levels - s
            blocks = []
            for b in range(depth):
                name = f"block{b + 1}" if cfg.shared_encoder else f"level{s + 1}.block{b + 1}"
                blocks.append(self.add_child(name, Block(3 if b == 0 else cfg.channels, cfg.channels, rng)))
            self.stacks.append(blocks)

    def depth(self, k: int) -> int:
        return self.cfg.levels - k + 1

    def __call__(self, x: Tensor, k: int) -> Tensor:
        blocks = self.stacks[0 if self.cfg.shared_encoder else k - 1]
        for block in blocks[: self.depth(k)]:
            x = block(x)
        return x

    def all_levels(self, x: Tensor) -> dict[int, Tensor]:
        """Features of one image stream for every level, sharing the common prefix."""
        if not self.cfg.shared_encoder:
            return {k: self(x, k) for k in range(1, self.cfg.levels + 1)}
        out = {}
        for b, block in enumerate(self.stacks[0], start=1):
            x = block(x)
            out[self.cfg.levels - b + 1] = x
        return out


class SelfAttention(Module):
    """Local self-attention over one feature map: projections, local attention, output projection."""

    def __init__(self, channels: int, radius: int, boundary: str, rng: np.random.Generator):
        super().__init__()
        self.channels, self.radius, self.boundary = channels, radius, boundary
        self.q = self.add_child("q", Conv1x1(channels, channels, rng))
        self.k = self.add_child("k", Conv1x1(channels, channels, rng))
        self.v = self.add_child("v", Conv1x1(channels, channels, rng))
        self.out = self.add_child("out", Conv1x1(channels, channels, rng))
        self.last_map: Optional[lak.LocalAttentionMap] = None

    def __call__(self, x: Tensor) -> Tensor:
        h, self.last_map = lak.lak_fused(
            self.q(x), self.k(x), self.v(x), self.channels, self.radius, self.boundary
        )
        return self.out(h)


class CrossDecoder(Module):
    """Two-iteration cross-attention producing the raw correspondence map.

    Iteration one attends from each image into the other with shared
    projections; iteration two projects both results once more and correlates
    them inside the local window.
    """

    def __init__(self, channels: int, radius: int, boundary: str, scaled: bool, rng: np.random.Generator):
        super().__init__()
        self.channels, self.radius, self.boundary, self.scaled = channels, radius, boundary, scaled
        self.q = self.add_child("q", Conv1x1(channels, channels, rng))
        self.k = self.add_child("k", Conv1x1(channels, channels, rng))
        self.v = self.add_child("v", Conv1x1(channels, channels, rng))
        self.proj = self.add_child("proj", Conv1x1(channels, channels, rng))

    def __call__(self, feat_t: Tensor, feat_u: Tensor) -> lak.LocalAttentionMap:
        n = feat_t.shape[0]
        both = concat([feat_t, feat_u], axis=0)
        q, k, v = self.q(both), self.k(both), self.v(both)
        # first half: queries from U against T; second half: queries from T against U
        h, _ = lak.lak_fused(
            concat([q[n:], q[:n]], axis=0),
            concat([k[:n], k[n:]], axis=0),
            concat([v[:n], v[n:]], axis=0),
            self.channels, self.radius, self.boundary,
        )
        s = self.proj(h)
        m = lak.local_attention_logits(s[:n], s[n:], self.radius)
        if self.scaled:
            m = lak.softmax_local(m, self.channels, self.boundary)
        return m


class Head(Module):
    """Regresses 8 corner offsets from a correspondence map.

    The final 1x1 layer starts at zero so an untrained head predicts the
    identity.  Raw outputs are in feature-grid units and are multiplied by
    the level stride to give full-resolution pixels.
    """

    def __init__(self, in_channels: int, channels: int, n_blocks: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.stride = stride
        self.blocks = []
        for b in range(n_blocks):
            cin = in_channels if b == 0 else channels
            self.blocks.append(self.add_child(f"block{b + 1}", Block(cin, channels, rng, global_pool=b == n_blocks - 1)))
        self.fc = self.add_child("fc", Conv1x1(channels, 8, None, bias=True))

    def __call__(self, m: Tensor) -> Tensor:
        x = m
        for block in self.blocks:
            x = block(x)
        y = self.fc(x)
        return y.reshape(y.shape[0], 8) * float(self.stride)


class LocalTrans(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = self.add_child("encoder", Encoder(cfg, rng))
        self.saem, self.tdm, self.head = {}, {}, {}
        for k in range(1, cfg.levels + 1):
            r = cfg.radius(k)
            self.saem[k] = self.add_child(f"saem{k}", SelfAttention(cfg.channels, r, cfg.boundary, rng))
            self.tdm[k] = self.add_child(
                f"tdm{k}", CrossDecoder(cfg.channels, r, cfg.boundary, cfg.scaled_correlation, rng)
            )
            self.head[k] = self.add_child(
                f"head{k}", Head((2 * r + 1) ** 2, cfg.channels, k + 1, cfg.stride(k), rng)
            )

    def param_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(name.split(".", 1)[0], []).append(name)
        return groups

    def level(self, k: int, feat_t: Tensor, feat_u: Tensor) -> tuple[Tensor, lak.LocalAttentionMap]:
        """One level on precomputed features: returns offsets [N,8] and the raw map."""
        n = feat_t.shape[0]
        phi = self.saem[k](concat([feat_t, feat_u], axis=0))
        m = self.tdm[k](phi[:n], phi[n:])
        return self.head[k](m.to_channels()), m

    def estimator(self) -> Callable[[np.ndarray, np.ndarray], Homography]:
        """Pairwise estimator in native pixel coordinates (target patch -> unaligned image)."""
        return lambda target, unaligned: estimate(self, target, unaligned)


# --- cascade -----------------------------------------------------------------------------------

@dataclass
class LevelOutput:
    offsets: np.ndarray
    homographies: list[Homography]
    attention: lak.LocalAttentionMap
    warped: np.ndarray
    prediction: Tensor = field(repr=False, default=None)
    target: Optional[np.ndarray] = None


@dataclass
class CascadeOutput:
    levels: list[LevelOutput]
    estimates: list[Homography]
    loss: Optional[Tensor] = None
    level_losses: list[float] = field(default_factory=list)


def _as_batch(images: np.ndarray) -> np.ndarray:
    a = np.asarray(images, dtype=get_default_dtype())
    return a[None] if a.ndim == 3 else a


def offsets_to_homographies(offsets: np.ndarray, base: np.ndarray, level: int) -> list[Homography]:
    out = []
    for i, off in enumerate(np.asarray(offsets, dtype=np.float64).reshape(-1, 4, 2)):
        try:
            out.append(dlt(base, base + off))
        except (DegenerateConfigurationError, DegenerateHomographyError, np.linalg.LinAlgError) as exc:
            raise CascadeError(level, i, str(exc)) from None
    return out


def residual_targets(gt: Sequence[Homography], acc: Sequence[Homography], base: np.ndarray) -> np.ndarray:
    """Offsets still to be explained after ``acc``: ``acc^-1(gt(c)) - c`` per sample, as [N,8]."""
    return np.stack([(a.inverse() @ g).apply(base) - base for g, a in zip(gt, acc)]).reshape(len(gt), 8)


def corner_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over corners (and samples) of the L1 corner displacement error."""
    n = pred.shape[0]
    return (pred - Tensor(target, dtype=pred.dtype)).abs().sum() * (1.0 / (4 * n))


def cascade_forward(
    model: LocalTrans,
    targets: np.ndarray,
    unaligned: np.ndarray,
    gt: Optional[Sequence[Homography]] = None,
    fixed_homographies: Optional[Sequence[Sequence[Homography]]] = None,
) -> CascadeOutput:
    """Run all levels coarse to fine.

    ``targets``/``unaligned`` are ``[N,3,H,W]`` (or a single ``[3,H,W]``)
    at the model resolution.  Level ``k`` sees the unaligned image resampled
    by the product of the earlier level estimates; no gradient flows through
    that resampling.  With ``gt`` the summed per-level residual loss is
    attached.  ``fixed_homographies`` replaces the per-level estimates used
    for resampling (used by gradient checks to freeze the piecewise-linear
    warp).
    """
    cfg = model.cfg
    it, iu = _as_batch(targets), _as_batch(unaligned)
    if it.shape != iu.shape or it.shape[1:] != (3, cfg.height, cfg.width):
        raise ValueError(f"inputs {it.shape}/{iu.shape} do not match model size 3x{cfg.height}x{cfg.width}")
    n = it.shape[0]
    base = base_corners(cfg.width, cfg.height)
    feats_t = model.encoder.all_levels(Tensor(it))
    acc = [Homography.identity() for _ in range(n)]
    current = iu
    levels, losses, total = [], [], None
    for k in range(1, cfg.levels + 1):
        feat_u = model.encoder(Tensor(current), k)
        pred, amap = model.level(k, feats_t[k], feat_u)
        tgt = None
        if gt is not None:
            tgt = residual_targets(gt, acc, base).astype(pred.dtype)
            lk = corner_loss(pred, tgt)
            losses.append(lk.item())
            total = lk if total is None else total + lk
        hs = offsets_to_homographies(pred.data, base, k)
        levels.append(LevelOutput(pred.data.astype(np.float64).reshape(n, 4, 2), hs, amap, current, pred, tgt))
        used = fixed_homographies[k - 1] if fixed_homographies is not None else hs
        acc = [a @ h for a, h in zip(acc, used)]
        if k < cfg.levels:
            # resample the original once by the running product instead of re-warping warped images
            current = np.stack([warp(iu[i], acc[i]) for i in range(n)]).astype(iu.dtype)
    return CascadeOutput(levels, acc, total, losses)


def estimate(model: LocalTrans, target: np.ndarray, unaligned: np.ndarray) -> Homography:
    """Homography from ``target`` pixel coordinates to ``unaligned`` pixel coordinates.

    Both images are bicubically resized to the model resolution first; the
    estimate is mapped back to the native frames.
    """
    cfg = model.cfg
    size = (cfg.height, cfg.width)
    th, tw = target.shape[1:]
    uh, uw = unaligned.shape[1:]
    t = ops.resize_bicubic(target, size=size)
    u = ops.resize_bicubic(unaligned, size=size)
    was_training = model.training
    model.eval()
    try:
        out = cascade_forward(model, t, u)
    finally:
        model.train(was_training)
    to_model_t = Homography.scaling(cfg.width / tw, cfg.height / th, about_centres=True)
    to_model_u = Homography.scaling(cfg.width / uw, cfg.height / uh, about_centres=True)
    return to_model_u.inverse() @ out.estimates[0] @ to_model_t

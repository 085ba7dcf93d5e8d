"""Synthetic image pairs for training and evaluation.

Pairs follow the usual four-corner recipe: crop a patch from a larger
source, jitter its corners, warp the source by the inverse of the resulting
homography and crop the same window again.  Optional cross-resolution
degradation blurs the target by a bicubic down/up round trip.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .homography.geometry import CornerOffsets, DegenerateHomographyError, Homography, base_corners, dlt, warp
from .homography.imageio import quantize, read_pnm, write_pnm
from .tensor.ops import resize_bicubic

PathLike = Union[str, os.PathLike]


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed."""


class DatasetInvariantError(ValueError):
    """A parsed sample violates the homography/offset consistency rule."""


@dataclass
class AugmentRanges:
    noise_sigma_max: float = 0.02
    brightness: tuple[float, float] = (0.8, 1.2)
    contrast: tuple[float, float] = (0.8, 1.2)
    saturation: tuple[float, float] = (0.8, 1.2)

    @classmethod
    def none(cls) -> "AugmentRanges":
        return cls(0.0, (1.0, 1.0), (1.0, 1.0), (1.0, 1.0))


@dataclass
class GenConfig:
    patch_size: int = 128
    rho: float = 32.0
    margin: int = 32
    cross_res: int = 1
    augment: bool = True
    ranges: AugmentRanges = field(default_factory=AugmentRanges)
    source: str = "procedural"
    image_dir: Optional[str] = None
    max_retries: int = 100

    def __post_init__(self):
        if self.cross_res not in (1, 4, 8) and self.cross_res < 1:
            raise ValueError(f"cross-resolution factor must be >= 1, got {self.cross_res}")
        if self.rho < 0 or self.patch_size < 2:
            raise ValueError("invalid patch size or perturbation bound")
        if self.source not in ("procedural", "image-directory"):
            raise ValueError(f"unknown source {self.source!r}")
        if self.source == "image-directory" and not self.image_dir:
            raise ValueError("image-directory source needs image_dir")

    @property
    def source_extent(self) -> int:
        return int(self.patch_size + 2 * np.ceil(self.rho) + 2 * self.margin)


@dataclass
class SamplePair:
    target: np.ndarray
    unaligned: np.ndarray
    gt_offsets: CornerOffsets
    gt_h: Homography
    cross_res: int = 1
    seed: int = 0

    def check(self, rho_max: Optional[float] = None, tol: float = 1e-8) -> None:
        expected = dlt(self.gt_offsets.base, self.gt_offsets.targets())
        err = np.abs(expected.apply(self.gt_offsets.base) - self.gt_h.apply(self.gt_offsets.base)).max()
        if err > tol:
            raise DatasetInvariantError(f"ground-truth homography disagrees with offsets by {err:.3g} px")
        if rho_max is not None and np.abs(self.gt_offsets.offsets).max() > rho_max:
            raise DatasetInvariantError("offset exceeds the perturbation bound")


# --- source imagery -----------------------------------------------------------------------

def procedural_image(seed: int, size: Union[int, tuple[int, int]]) -> np.ndarray:
    """Deterministic textured RGB image in [0, 1].

    Smooth colour gradients, soft-edged rectangles and ellipses and
    band-limited noise.  Edges are a few pixels wide so that resampling the
    image stays accurate.
    """
    h, w = (size, size) if isinstance(size, int) else size
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = xs / max(w - 1, 1), ys / max(h - 1, 1)

    img = np.empty((3, h, w))
    for c in range(3):
        a, bx, by = rng.uniform(0.2, 0.8), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)
        img[c] = a + bx * (u - 0.5) + by * (v - 0.5)

    scale = min(h, w)
    for _ in range(rng.integers(10, 18)):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        rx, ry = rng.uniform(0.04, 0.22) * scale, rng.uniform(0.04, 0.22) * scale
        theta = rng.uniform(0, np.pi)
        dx, dy = xs - cx, ys - cy
        px = (np.cos(theta) * dx + np.sin(theta) * dy) / rx
        py = (-np.sin(theta) * dx + np.cos(theta) * dy) / ry
        if rng.random() < 0.5:
            dist = (np.sqrt(px ** 2 + py ** 2) - 1.0) * min(rx, ry)
        else:
            dist = (np.maximum(np.abs(px), np.abs(py)) - 1.0) * min(rx, ry)
        alpha = rng.uniform(0.5, 0.9) / (1.0 + np.exp(np.clip(dist / 1.6, -50, 50)))
        colour = rng.uniform(0, 1, size=3)
        img = img * (1 - alpha) + colour[:, None, None] * alpha

    noise = gaussian_filter(rng.normal(size=(3, h, w)), sigma=(0, 2.0, 2.0))
    noise *= 0.05 / max(noise.std(), 1e-12)
    return np.clip(img + noise, 0.0, 1.0)


def _image_files(image_dir: PathLike) -> list[Path]:
    files = sorted(p for p in Path(image_dir).iterdir() if p.suffix.lower() in (".ppm", ".pgm", ".pnm"))
    if not files:
        raise FileNotFoundError(f"no PPM/PGM images in {image_dir}")
    return files


def load_source(path: PathLike, min_extent: int) -> np.ndarray:
    img = read_pnm(path)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    short = min(img.shape[1:])
    if short < min_extent:
        img = np.clip(resize_bicubic(img, scale=min_extent / short), 0, 1)
    return img


# --- pair synthesis --------------------------------------------------------------------------

def is_convex_quad(pts: np.ndarray) -> bool:
    """True for a strictly convex quad with the clockwise (y-down) order of the base corners."""
    crosses = []
    for i in range(4):
        a, b, c = pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]
        crosses.append((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]))
    crosses = np.array(crosses)
    return bool(np.all(crosses > 0))


def sample_offsets(rng: np.random.Generator, rho: float, base: np.ndarray, max_retries: int = 100) -> np.ndarray:
    """Independent uniform corner offsets in [-rho, rho], redrawn until the quad is convex."""
    for _ in range(max_retries):
        off = rng.uniform(-rho, rho, size=(4, 2)) if rho > 0 else np.zeros((4, 2))
        if is_convex_quad(base + off):
            return off
    raise RuntimeError(f"no convex corner perturbation after {max_retries} draws")


def _inverse_covered(gt_h: Homography, base: np.ndarray, window: tuple) -> bool:
    """Whether the inverse map sends the whole patch to finite points inside ``window``.

    The projective depth is affine, so positivity at the four corners covers
    the square, whose image is then the convex hull of the mapped corners.
    """
    m = np.linalg.inv(gt_h.m)
    hom = np.c_[base, np.ones(4)] @ m.T
    if np.any(hom[:, 2] <= 1e-6):
        return False
    pts = hom[:, :2] / hom[:, 2:]
    x_lo, y_lo, x_hi, y_hi = window
    return bool(np.all((pts[:, 0] >= x_lo) & (pts[:, 0] <= x_hi) & (pts[:, 1] >= y_lo) & (pts[:, 1] <= y_hi)))


def degrade(image: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic down-sampling by ``factor`` followed by up-sampling to the original size."""
    if factor == 1:
        return image
    _, h, w = image.shape
    small = resize_bicubic(image, size=(max(1, round(h / factor)), max(1, round(w / factor))))
    return np.clip(resize_bicubic(small, size=(h, w)), 0.0, 1.0)


def augment(image: np.ndarray, rng: np.random.Generator, ranges: AugmentRanges) -> np.ndarray:
    """Photometric jitter: brightness, contrast, saturation, Gaussian noise, clamp to [0, 1]."""
    b = rng.uniform(*ranges.brightness)
    c = rng.uniform(*ranges.contrast)
    s = rng.uniform(*ranges.saturation)
    sigma = rng.uniform(0.0, ranges.noise_sigma_max) if ranges.noise_sigma_max > 0 else 0.0
    out = image.astype(np.float64, copy=True)
    if b != 1.0:
        out *= b
    if c != 1.0:
        m = out.mean()
        out = m + c * (out - m)
    if s != 1.0 and out.shape[0] == 3:
        luma = np.tensordot([0.299, 0.587, 0.114], out, axes=1)
        out = luma + s * (out - luma)
    if sigma > 0:
        out += rng.normal(0.0, sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def make_pair(source: np.ndarray, cfg: GenConfig, rng: np.random.Generator, seed: int = 0) -> SamplePair:
    p, rho = cfg.patch_size, cfg.rho
    _, sh, sw = source.shape
    pad = int(np.ceil(rho))
    if sh < p + 2 * pad or sw < p + 2 * pad:
        raise ValueError(f"source {sh}x{sw} too small for patch {p} with rho {rho}")
    x0 = int(rng.integers(pad, sw - p - pad + 1))
    y0 = int(rng.integers(pad, sh - p - pad + 1))
    base = base_corners(p, p)
    window = (-x0, -y0, sw - 1 - x0, sh - 1 - y0)
    for _ in range(cfg.max_retries):
        off = sample_offsets(rng, rho, base, cfg.max_retries)
        gt_h = dlt(base, base + off)
        if _inverse_covered(gt_h, base, window):
            break
    else:
        raise RuntimeError(f"no perturbation keeps the unaligned crop inside the source after {cfg.max_retries} draws")
    target = source[:, y0:y0 + p, x0:x0 + p].copy()
    unaligned = warp(source, Homography.translation(x0, y0) @ gt_h.inverse(), (p, p))
    target = degrade(target, cfg.cross_res)
    if cfg.augment:
        target = augment(target, rng, cfg.ranges)
        unaligned = augment(unaligned, rng, cfg.ranges)
    return SamplePair(target, unaligned, CornerOffsets(off, base), gt_h, cfg.cross_res, seed)


def sample_seeds(master_seed: int, n: int) -> list[int]:
    """Independent per-sample seeds derived from one master seed."""
    children = np.random.SeedSequence(master_seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def pair_from_seed(seed: int, cfg: GenConfig) -> SamplePair:
    rng = np.random.default_rng(seed)
    if cfg.source == "procedural":
        source = procedural_image(int(rng.integers(2 ** 63)), cfg.source_extent)
    else:
        files = _image_files(cfg.image_dir)
        source = load_source(files[int(rng.integers(len(files)))], cfg.patch_size + 2 * int(np.ceil(cfg.rho)))
    return make_pair(source, cfg, rng, seed)


def generate_pairs(cfg: GenConfig, n: int, master_seed: int, quantized: bool = True) -> list[SamplePair]:
    """``n`` pairs, each reproducible from its own recorded seed.

    With ``quantized`` the images are snapped to 8 bits so that they equal
    what a dataset round trip returns.
    """
    pairs = [pair_from_seed(s, cfg) for s in sample_seeds(master_seed, n)]
    if quantized:
        for pair in pairs:
            pair.target, pair.unaligned = quantize(pair.target), quantize(pair.unaligned)
    return pairs


# --- persistence -------------------------------------------------------------------------------

GT_FIELDS = ["homography"] * 9 + ["offset"] * 8 + ["cross_res", "seed"]


def _format_gt(pair: SamplePair) -> str:
    lines = [
        pair.gt_h.to_text(),
        " ".join(f"{v:.17g}" for v in pair.gt_offsets.vector()),
        f"{pair.cross_res} {pair.seed}",
    ]
    return "\n".join(lines) + "\n"


def _parse_gt(path: Path, patch_hw: tuple[int, int]) -> tuple[Homography, CornerOffsets, int, int]:
    text = path.read_text(encoding="ascii")
    tokens: list[tuple[str, int]] = []
    pos = 0
    for line in text.split("\n"):
        start = 0
        for tok in line.split(" "):
            if tok:
                tokens.append((tok, pos + line.index(tok, start)))
                start = line.index(tok, start) + len(tok)
        pos += len(line) + 1
    names = [f"homography[{i}]" for i in range(9)] + [f"offset[{i}]" for i in range(8)] + ["cross_res", "seed"]
    if len(tokens) < len(names):
        raise DatasetFormatError(
            f"{path}: missing field {names[len(tokens)]} at byte {len(text.encode('ascii'))}"
        )
    if len(tokens) > len(names):
        raise DatasetFormatError(f"{path}: unexpected extra field at byte {tokens[len(names)][1]}")
    values = []
    for (tok, off), name in zip(tokens, names):
        try:
            values.append(int(tok) if name in ("cross_res", "seed") else float(tok))
        except ValueError:
            raise DatasetFormatError(f"{path}: cannot parse {name} {tok!r} at byte {off}") from None
    try:
        gt_h = Homography(np.array(values[:9]))
    except DegenerateHomographyError as exc:
        raise DatasetInvariantError(f"{path}: {exc}") from None
    h, w = patch_hw
    offsets = CornerOffsets(np.array(values[9:17]), base_corners(w, h))
    return gt_h, offsets, values[17], values[18]


def write_dataset(pairs: Iterable[SamplePair], root: PathLike) -> int:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    count = 0
    for i, pair in enumerate(pairs):
        d = root / f"{i:06d}"
        d.mkdir(exist_ok=True)
        write_pnm(d / "target.ppm", pair.target)
        write_pnm(d / "unaligned.ppm", pair.unaligned)
        (d / "gt.txt").write_bytes(_format_gt(pair).encode("ascii"))
        count += 1
    return count


def read_sample(d: PathLike) -> SamplePair:
    d = Path(d)
    target = read_pnm(d / "target.ppm")
    unaligned = read_pnm(d / "unaligned.ppm")
    gt_h, offsets, s, seed = _parse_gt(d / "gt.txt", target.shape[1:])
    pair = SamplePair(target, unaligned, offsets, gt_h, s, seed)
    try:
        pair.check()
    except DatasetInvariantError as exc:
        raise DatasetInvariantError(f"{d / 'gt.txt'}: {exc}") from None
    return pair


def read_dataset(root: PathLike, limit: Optional[int] = None) -> list[SamplePair]:
    dirs = sorted(p for p in Path(root).iterdir() if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no samples under {root}")
    return [read_sample(d) for d in dirs[:limit]]


def stack_pairs(pairs: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays: targets [N,3,p,p], unaligned [N,3,p,p], gt homographies [N,3,3]."""
    return (
        np.stack([p.target for p in pairs]),
        np.stack([p.unaligned for p in pairs]),
        np.stack([p.gt_h.m for p in pairs]),
    )

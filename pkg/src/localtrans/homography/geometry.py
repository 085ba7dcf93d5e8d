"""Planar projective maps, 4-point DLT and backward warping.

Coordinates put pixel centres on integers, origin top-left, x to the right
and y down.  ``warp(image, H)`` samples the input at ``H(x)`` for every
output pixel ``x``, so ``warp(warp(I, A), B) == warp(I, A @ B)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, Sequence]

DET_EPS = 1e-12
W_EPS = 1e-12


class DegenerateHomographyError(ValueError):
    """The matrix is singular or cannot be scaled to h33 = 1."""


class DegenerateConfigurationError(ValueError):
    """Point correspondences do not determine a homography."""


class PointAtInfinityError(ArithmeticError):
    """A point maps onto (or behind) the line at infinity."""


class Homography:
    """A 3x3 projective matrix stored with ``m[2, 2] == 1``."""

    __slots__ = ("m",)

    def __init__(self, m: ArrayLike):
        m = np.array(m, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)) or abs(m[2, 2]) < DET_EPS:
            raise DegenerateHomographyError(f"cannot normalise matrix with h33={m[2, 2]!r}")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) < DET_EPS:
            raise DegenerateHomographyError("singular homography")
        self.m = m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        return cls([[1, 0, dx], [0, 1, dy], [0, 0, 1]])

    @classmethod
    def scaling(cls, sx: float, sy: float, about_centres: bool = False) -> "Homography":
        """Scale map; ``about_centres`` keeps pixel-centre conventions of resized images."""
        if about_centres:
            return cls([[sx, 0, 0.5 * sx - 0.5], [0, sy, 0.5 * sy - 0.5], [0, 0, 1]])
        return cls([[sx, 0, 0], [0, sy, 0], [0, 0, 1]])

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.m @ other.m)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def apply(self, points: ArrayLike) -> np.ndarray:
        """Map one point ``(x, y)`` or an ``(n, 2)`` array of points."""
        mapped, w = _project(self.m, np.asarray(points, dtype=np.float64))
        if np.any(w <= W_EPS):
            raise PointAtInfinityError("point maps to or beyond the line at infinity")
        return mapped

    def to_text(self) -> str:
        return " ".join(f"{v:.17g}" for v in self.m.ravel())

    @classmethod
    def from_text(cls, text: str) -> "Homography":
        vals = text.split()
        if len(vals) != 9:
            raise ValueError(f"homography needs 9 numbers, found {len(vals)}")
        return cls(np.array([float(v) for v in vals]))

    def __repr__(self) -> str:
        return f"Homography({self.m.tolist()})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Homography) and np.array_equal(self.m, other.m)


def _project(m: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, y = pts[..., 0], pts[..., 1]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    safe = np.where(w > W_EPS, w, 1.0)
    u = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / safe
    v = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / safe
    return np.stack([u, v], axis=-1), w


def compose(a: Homography, b: Homography) -> Homography:
    """``a @ b``: apply ``b`` first, then ``a``."""
    return a @ b


def invert(h: Homography) -> Homography:
    return h.inverse()


def apply(h: Homography, points: ArrayLike) -> np.ndarray:
    return h.apply(points)


# --- corner parameterisation -----------------------------------------------------------

def base_corners(width: int, height: int) -> np.ndarray:
    """Pixel-centre corners of a ``width x height`` image: TL, TR, BR, BL."""
    return np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]], dtype=np.float64)


@dataclass
class CornerOffsets:
    """Displacements of four reference corners (TL, TR, BR, BL)."""

    offsets: np.ndarray
    base: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(4, 2)
        self.base = np.asarray(self.base, dtype=np.float64).reshape(4, 2)
        b = self.base
        # axis-aligned rectangle in clockwise (image) order
        if not (b[0, 1] == b[1, 1] and b[2, 1] == b[3, 1] and b[0, 0] == b[3, 0] and b[1, 0] == b[2, 0]
                and b[1, 0] > b[0, 0] and b[3, 1] > b[0, 1]):
            raise ValueError("base corners must be an axis-aligned rectangle ordered TL, TR, BR, BL")

    @classmethod
    def from_vector(cls, vec: ArrayLike, base: np.ndarray) -> "CornerOffsets":
        return cls(np.asarray(vec, dtype=np.float64).reshape(4, 2), base)

    @classmethod
    def from_homography(cls, h: Homography, base: np.ndarray) -> "CornerOffsets":
        return cls(h.apply(base) - base, base)

    def vector(self) -> np.ndarray:
        return self.offsets.reshape(8).copy()

    def targets(self) -> np.ndarray:
        return self.base + self.offsets

    def homography(self) -> Homography:
        return dlt(self.base, self.targets())


def _check_general_position(pts: np.ndarray, what: str) -> None:
    span = max(float(np.ptp(pts[:, 0])), float(np.ptp(pts[:, 1])), 1.0)
    for i, j, k in combinations(range(4), 3):
        a, b, c = pts[i], pts[j], pts[k]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area) <= 1e-10 * span * span:
            raise DegenerateConfigurationError(f"{what} points {i},{j},{k} are collinear")


def _normaliser(pts: np.ndarray) -> np.ndarray:
    centre = pts.mean(axis=0)
    spread = np.sqrt(((pts - centre) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / spread
    return np.array([[s, 0, -s * centre[0]], [0, s, -s * centre[1]], [0, 0, 1.0]])


def dlt(src: ArrayLike, dst: ArrayLike) -> Homography:
    """Homography taking four ``src`` points onto four ``dst`` points.

    Both point sets are conditioned (centred, mean radius sqrt(2)) before the
    8x8 system with h33 = 1 is solved by LU with partial pivoting.
    """
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    _check_general_position(src, "source")
    _check_general_position(dst, "destination")
    ts, td = _normaliser(src), _normaliser(dst)
    s = src @ ts[:2, :2].T + ts[:2, 2]
    d = dst @ td[:2, :2].T + td[:2, 2]
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(s, d)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * i], rhs[2 * i + 1] = u, v
    try:
        h = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfigurationError("singular DLT system") from exc
    hn = np.append(h, 1.0).reshape(3, 3)
    return Homography(np.linalg.inv(td) @ hn @ ts)


# --- resampling ----------------------------------------------------------------------

def _bilinear(image: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample ``image[C,H,W]`` at in-range coordinates; exact on integer positions."""
    _, h, w = image.shape
    x0 = np.clip(np.floor(sx).astype(np.intp), 0, w - 1)
    y0 = np.clip(np.floor(sy).astype(np.intp), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0).astype(image.dtype)
    fy = (sy - y0).astype(image.dtype)
    top = image[:, y0, x0] + fx * (image[:, y0, x1] - image[:, y0, x0])
    bot = image[:, y1, x0] + fx * (image[:, y1, x1] - image[:, y1, x0])
    return top + fy * (bot - top)


def sample_coordinates(h: Homography, out_size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Input coordinates ``H(x)`` for every output pixel plus a w > 0 flag."""
    oh, ow = out_size
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    mapped, wgt = _project(h.m, np.stack([xs, ys], axis=-1))
    return mapped[..., 0], mapped[..., 1], wgt > W_EPS


def warp(
    image: np.ndarray,
    h: Homography,
    out_size: Optional[tuple[int, int]] = None,
    return_mask: bool = False,
):
    """Backward warp: ``out(x) = bilinear(image)(H(x))``, 0 outside the input.

    ``image`` is ``[C, H, W]``; ``out_size`` defaults to the input size.
    With ``return_mask`` the boolean map of in-bounds samples is returned too.
    """
    image = np.asarray(image)
    _, ih, iw = image.shape
    out_size = out_size or (ih, iw)
    sx, sy, ok = sample_coordinates(h, out_size)
    ok &= (sx >= 0) & (sx <= iw - 1) & (sy >= 0) & (sy <= ih - 1)
    out = np.zeros((image.shape[0],) + tuple(out_size), dtype=image.dtype)
    if ok.any():
        out[:, ok] = _bilinear(image, sx[ok], sy[ok])
    return (out, ok) if return_mask else out

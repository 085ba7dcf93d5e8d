"""Placing a grid of local images onto a global view.

Each grid cell of the global image is paired with one local image.  An
estimator returns, per cell, the homography from cell-patch pixel
coordinates to local-image pixel coordinates.  The local image outline is
mapped back into the global frame, every grid vertex is replaced by the mean
of the estimates of the cells that share it, and each local image is warped
into its smoothed quadrilateral.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..tensor.ops import resize_bicubic
from .geometry import CornerOffsets, Homography, _bilinear, dlt, sample_coordinates

log = logging.getLogger(__name__)

Estimator = Callable[[np.ndarray, np.ndarray], Homography]


@dataclass
class GridLayout:
    rows: int
    cols: int
    cells: list[CornerOffsets]
    failed: list[tuple[int, int]] = field(default_factory=list)

    def cell(self, i: int, j: int) -> CornerOffsets:
        return self.cells[i * self.cols + j]


def grid_edges(extent: int, parts: int) -> np.ndarray:
    return np.round(np.arange(parts + 1) * extent / parts).astype(int)


def outline(height: int, width: int) -> np.ndarray:
    """Outer boundary of an image (half a pixel beyond the corner centres): TL, TR, BR, BL."""
    return np.array([[-0.5, -0.5], [width - 0.5, -0.5], [width - 0.5, height - 0.5], [-0.5, height - 0.5]])


def scale_matched_identity(patch_hw: tuple[int, int], local_hw: tuple[int, int]) -> Homography:
    (ph, pw), (lh, lw) = patch_hw, local_hw
    return Homography.scaling(lw / pw, lh / ph, about_centres=True)


def grid_stitch(
    global_img: np.ndarray,
    locals_: Sequence[tuple[np.ndarray, tuple[int, int]]],
    estimator: Estimator,
    rows: Optional[int] = None,
    cols: Optional[int] = None,
    scale: float = 1.0,
) -> tuple[np.ndarray, GridLayout]:
    """Mosaic of local images over ``global_img`` with neighbour-averaged corners.

    ``locals_`` holds ``(image, (row, col))`` pairs.  The mosaic has the
    global image's size times ``scale``; uncovered pixels show the (resized)
    global image.  Cells are painted in row-major order, later cells winning
    in overlaps.  A failing estimator falls back to the scale-matched identity
    and the cell is listed in ``GridLayout.failed``.
    """
    _, gh, gw = global_img.shape
    rows = rows or 1 + max(rc[0] for _, rc in locals_)
    cols = cols or 1 + max(rc[1] for _, rc in locals_)
    ey, ex = grid_edges(gh, rows), grid_edges(gw, cols)
    by_cell = {tuple(rc): img for img, rc in locals_}
    if len(by_cell) != rows * cols:
        raise ValueError(f"expected {rows * cols} local images for a {rows}x{cols} grid, got {len(by_cell)}")

    acc = np.zeros((rows + 1, cols + 1, 2))
    hits = np.zeros((rows + 1, cols + 1))
    failed: list[tuple[int, int]] = []
    vertex_of = [(0, 0), (0, 1), (1, 1), (1, 0)]  # TL, TR, BR, BL as (di, dj)
    for i in range(rows):
        for j in range(cols):
            local = by_cell[(i, j)]
            patch = global_img[:, ey[i]:ey[i + 1], ex[j]:ex[j + 1]]
            try:
                est = estimator(patch, local)
                quad = est.inverse().apply(outline(*local.shape[1:]))
            except Exception as exc:  # noqa: BLE001 - any estimator failure triggers the fallback
                log.warning("cell (%d, %d): estimator failed (%s); using identity placement", i, j, exc)
                failed.append((i, j))
                est = scale_matched_identity(patch.shape[1:], local.shape[1:])
                quad = est.inverse().apply(outline(*local.shape[1:]))
            quad = quad + [ex[j], ey[i]]
            for (di, dj), q in zip(vertex_of, quad):
                acc[i + di, j + dj] += q
                hits[i + di, j + dj] += 1
    vertices = acc / hits[..., None]

    nominal = np.stack(np.meshgrid(ex - 0.5, ey - 0.5), axis=-1)
    cells = []
    for i in range(rows):
        for j in range(cols):
            corners = np.array([vertices[i + di, j + dj] for di, dj in vertex_of])
            base = np.array([nominal[i + di, j + dj] for di, dj in vertex_of])
            cells.append(CornerOffsets(corners - base, base))

    out_h, out_w = int(round(gh * scale)), int(round(gw * scale))
    mosaic = resize_bicubic(global_img, size=(out_h, out_w)) if scale != 1 else global_img.copy()
    to_mosaic = Homography.scaling(out_w / gw, out_h / gh, about_centres=True)
    for i in range(rows):
        for j in range(cols):
            local = by_cell[(i, j)]
            lh, lw = local.shape[1:]
            quad = to_mosaic.apply(cells[i * cols + j].targets())
            mosaic_to_local = dlt(quad, outline(lh, lw))
            sx, sy, ok = sample_coordinates(mosaic_to_local, (out_h, out_w))
            ok &= (sx >= -0.5) & (sx <= lw - 0.5) & (sy >= -0.5) & (sy <= lh - 0.5)
            if ok.any():
                mosaic[:, ok] = _bilinear(local, np.clip(sx[ok], 0, lw - 1), np.clip(sy[ok], 0, lh - 1))
    return mosaic, GridLayout(rows, cols, cells, failed)


# --- synthetic fixture ---------------------------------------------------------------------

def _smooth_field(rng: np.random.Generator, n_waves: int = 12, min_wavelength: float = 12.0):
    freqs = rng.uniform(-1, 1, size=(n_waves, 2))
    freqs *= (1.0 / min_wavelength) / np.maximum(np.abs(freqs).max(axis=1, keepdims=True), 1e-9)
    freqs *= rng.uniform(0.3, 1.0, size=(n_waves, 1))
    phases = rng.uniform(0, 2 * np.pi, size=n_waves)
    amps = rng.uniform(0.2, 1.0, size=(3, n_waves))
    amps /= amps.sum(axis=1, keepdims=True) * 2.5

    def field_at(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        arg = 2 * np.pi * (np.multiply.outer(x, freqs[:, 0]) + np.multiply.outer(y, freqs[:, 1])) + phases
        return 0.5 + np.tensordot(np.sin(arg), amps.T, axes=([-1], [0])).transpose(2, 0, 1)

    return field_at


@dataclass
class GridFixture:
    global_img: np.ndarray
    locals_: list[tuple[np.ndarray, tuple[int, int]]]
    true_maps: dict[tuple[int, int], Homography]
    vertices: np.ndarray
    rows: int
    cols: int

    def oracle_estimator(self) -> Estimator:
        lookup = {id(img): self.true_maps[rc] for img, rc in self.locals_}
        return lambda patch, local: lookup[id(local)]


def make_synthetic_grid(
    seed: int = 0,
    rows: int = 3,
    cols: int = 3,
    cell: int = 32,
    zoom: int = 2,
    jitter: float = 3.0,
) -> GridFixture:
    """Global view plus ``zoom``-times sharper local views of a smooth scene.

    Interior grid vertices are jittered; each local image covers exactly the
    quad of its (shared) vertices, so the true per-cell homographies agree on
    every shared corner.
    """
    rng = np.random.default_rng(seed)
    field_at = _smooth_field(rng)
    gh, gw = rows * cell, cols * cell
    ys, xs = np.mgrid[0:gh, 0:gw].astype(np.float64)
    global_img = field_at(xs, ys)
    ey, ex = grid_edges(gh, rows), grid_edges(gw, cols)
    vertices = np.stack(np.meshgrid(ex - 0.5, ey - 0.5), axis=-1).astype(np.float64)
    vertices[1:-1, 1:-1] += rng.uniform(-jitter, jitter, size=(rows - 1, cols - 1, 2))
    vertex_of = [(0, 0), (0, 1), (1, 1), (1, 0)]
    locals_, maps = [], {}
    lh = lw = cell * zoom
    for i in range(rows):
        for j in range(cols):
            quad = np.array([vertices[i + di, j + dj] for di, dj in vertex_of])
            local_to_global = dlt(outline(lh, lw), quad)
            ly, lx = np.mgrid[0:lh, 0:lw].astype(np.float64)
            pts = local_to_global.apply(np.stack([lx, ly], axis=-1).reshape(-1, 2)).reshape(lh, lw, 2)
            local = field_at(pts[..., 0], pts[..., 1])
            patch_to_global = Homography.translation(ex[j], ey[i])
            maps[(i, j)] = local_to_global.inverse() @ patch_to_global
            locals_.append((local, (i, j)))
    return GridFixture(global_img, locals_, maps, vertices, rows, cols)

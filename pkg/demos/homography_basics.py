"""
Four-point homographies, warping and grid stitching
====================================================

Homographies are parameterised by the displacement of four corners and
recovered with the direct linear transform.  ``warp(I, H)`` samples ``I``
at ``H x`` for every output pixel ``x``.
"""
import numpy as np

from localtrans.homography import (
    CornerOffsets, Homography, base_corners, compose, corner_error, dlt, grid_stitch,
    make_synthetic_grid, psnr, warp,
)

base = base_corners(128, 128)
rng = np.random.default_rng(1)
offsets = rng.uniform(-32, 32, (4, 2))

# corners -> matrix -> corners
h = dlt(base, base + offsets)
print(h.m.round(4))
print("corner round trip error %.1e px" % np.abs(h.apply(base) - (base + offsets)).max())
print("offsets back:", np.allclose(CornerOffsets.from_homography(h, base).offsets, offsets))

# composition applies the right factor first: (A @ B)(x) = A(B(x))
a, b = Homography.translation(3, 0), Homography.scaling(2, 2)
print("A(B(1,1)) =", compose(a, b).apply([1.0, 1.0]))

# corner error is the mean Euclidean corner distance
print("corner error of a (3, 4) shift:", corner_error(Homography.translation(3, 4), Homography.identity(), base))

# warping by the ground truth undoes a synthetic perspective change
img = rng.random((3, 128, 128))
unaligned = warp(img, h.inverse())
restored, valid = warp(unaligned, h, return_mask=True)
print("interior PSNR after undoing the warp: %.1f dB" % psnr(restored, img, mask=valid))

# grid stitching: each cell's estimate places a sharper local image; shared corners are averaged
fx = make_synthetic_grid(seed=0)
mosaic, layout = grid_stitch(fx.global_img, fx.locals_, fx.oracle_estimator(), fx.rows, fx.cols)
print("mosaic PSNR vs global view: %.1f dB, failed cells: %s" % (psnr(mosaic, fx.global_img), layout.failed))

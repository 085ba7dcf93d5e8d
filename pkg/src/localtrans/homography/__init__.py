from .geometry import (
    CornerOffsets,
    DegenerateConfigurationError,
    DegenerateHomographyError,
    Homography,
    PointAtInfinityError,
    apply,
    base_corners,
    compose,
    dlt,
    invert,
    warp,
)
from .imageio import ImageFormatError, quantize, read_pnm, write_pnm
from .metrics import corner_error, psnr, ssim
from .stitch import GridLayout, grid_stitch, make_synthetic_grid

__all__ = [
    "CornerOffsets",
    "DegenerateConfigurationError",
    "DegenerateHomographyError",
    "GridLayout",
    "Homography",
    "ImageFormatError",
    "PointAtInfinityError",
    "apply",
    "base_corners",
    "compose",
    "corner_error",
    "dlt",
    "grid_stitch",
    "invert",
    "make_synthetic_grid",
    "psnr",
    "quantize",
    "read_pnm",
    "ssim",
    "warp",
    "write_pnm",
]

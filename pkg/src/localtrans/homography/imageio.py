"""Binary PPM (P6) / PGM (P5) with 8-bit samples.

Images live in memory as float ``[C, H, W]`` arrays in ``[0, 1]``; files
hold ``round(255 * x)``.  Reading then writing reproduces a file byte for
byte.
"""
from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, Path]


class ImageFormatError(ValueError):
    pass


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit lattice that a file round trip would produce."""
    return to_uint8(image).astype(np.float64) / 255.0


def write_pnm(path: PathLike, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ImageFormatError(f"expected [1|3, H, W], got {image.shape}")
    c, h, w = image.shape
    magic = b"P6" if c == 3 else b"P5"
    raster = to_uint8(image).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + raster)


def read_pnm(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: malformed header at byte {pos}")
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace before the raster
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    c = 3 if magic == b"P6" else 1
    need = w * h * c
    raster = buf[pos:pos + need]
    if len(raster) != need:
        raise ImageFormatError(f"{path}: raster truncated at byte {pos + len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0

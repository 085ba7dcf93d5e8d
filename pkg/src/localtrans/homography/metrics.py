"""Alignment quality measures."""
from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import Homography


def corner_error(h_est: Homography, h_gt: Homography, corners: np.ndarray) -> float:
    """Mean Euclidean distance between the corners mapped by each homography."""
    diff = h_est.apply(corners) - h_gt.apply(corners)
    return float(np.sqrt((diff ** 2).sum(axis=1)).mean())


def psnr(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Peak signal-to-noise ratio for signals in [0, 1]; ``inf`` when identical.

    ``mask`` (spatial, broadcast over channels) restricts the error to valid pixels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if mask is not None:
        sq = sq[..., mask] if sq.ndim == 3 else sq[mask]
    mse = float(sq.mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Only windows lying fully inside the image contribute.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    win = _gaussian_window()
    half = len(win) // 2
    if min(a.shape[1:]) < len(win):
        raise ValueError("ssim needs images of at least 11x11 pixels")
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2

    def blur(x):
        y = correlate1d(correlate1d(x, win, axis=-1, mode="nearest"), win, axis=-2, mode="nearest")
        return y[..., half:-half, half:-half]

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a ** 2
    sbb = blur(b * b) - mu_b ** 2
    sab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float((num / den).mean())

"""Full-reference image metrics."""

from __future__ import annotations

import math

import numpy as np

from flowsr._kernels import box_mean_valid
from flowsr.model import RejectedInput

SSIM_WINDOW = 7
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise RejectedInput(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    return x, y


def psnr(x, y) -> float:
    """PSNR in dB for unit dynamic range; ``math.inf`` when the images are identical."""
    x, y = _pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _ssim_channel(a, b, win):
    n = win * win
    cov_norm = n / (n - 1.0)  # sample covariance
    ux, uy = box_mean_valid(a, win), box_mean_valid(b, win)
    uxx, uyy, uxy = box_mean_valid(a * a, win), box_mean_valid(b * b, win), box_mean_valid(a * b, win)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return float(s.mean())


def ssim(x, y, win: int = SSIM_WINDOW) -> float:
    """Mean SSIM over valid 7x7 uniform windows, averaged over channels.

    Uses the sample covariance and K1=0.01, K2=0.03 with unit data range,
    matching ``skimage.metrics.structural_similarity`` defaults.
    """
    x, y = _pair(x, y)
    if x.shape[0] < win or x.shape[1] < win:
        raise RejectedInput(f"image {x.shape[:2]} smaller than the {win}x{win} SSIM window")
    vals = [_ssim_channel(x[..., c], y[..., c], win) for c in range(x.shape[2])]
    return float(np.mean(vals))

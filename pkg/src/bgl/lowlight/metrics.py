"""Full-reference quality metrics on float images in [0, 1], channel-first."""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(a, b):
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` in dB; identical images give ``inf``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_plane(a: np.ndarray, b: np.ndarray, win: np.ndarray) -> float:
    def filt(x):
        return convolve2d(x, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM over valid window positions, averaged over channels.

    Accepts (H, W), (C, H, W) or (N, C, H, W); batches are averaged.
    """
    a, b = _pair(a, b)
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {window}x{window} window")
    win = gaussian_window(window, sigma)
    planes_a = a.reshape(-1, *a.shape[-2:])
    planes_b = b.reshape(-1, *b.shape[-2:])
    return float(np.mean([_ssim_plane(pa, pb, win) for pa, pb in zip(planes_a, planes_b)]))


def batch_psnr(a, b) -> float:
    """Mean per-image PSNR over a (N, C, H, W) batch."""
    a, b = _pair(a, b)
    return float(np.mean([psnr(x, y) for x, y in zip(a, b)]))

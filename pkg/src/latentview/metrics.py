"""Image quality metrics: PSNR and SSIM on [0, 1] float images."""

from __future__ import annotations

import math

import numpy as np

PSNR_CAP = 99.0


class MetricError(ValueError):
    pass


def psnr(a, b) -> float:
    """10 * log10(1 / MSE) in dB; identical images cap at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    if img.ndim == 2:
        return img
    raise MetricError(f"to_gray: expected (H, W) or (H, W, 3), got {img.shape}")


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _windowed_mean(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    k = window.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.tensordot(view, window, axes=([2, 3], [0, 1]))


def ssim(a, b, window_size: int = 11, sigma: float = 1.5,
         c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """Gaussian-weighted SSIM over valid window positions, on grayscale.

    Color images are converted with 0.299 R + 0.587 G + 0.114 B; constants
    assume a [0, 1] data range. Symmetric in its arguments.
    """
    ga, gb = to_gray(a), to_gray(b)
    if ga.shape != gb.shape:
        raise MetricError(f"ssim: shape mismatch {ga.shape} vs {gb.shape}")
    if min(ga.shape) < window_size:
        raise MetricError(
            f"ssim: image {ga.shape} smaller than {window_size}x{window_size} window"
        )
    w = _gaussian_window(window_size, sigma)
    mu_a = _windowed_mean(ga, w)
    mu_b = _windowed_mean(gb, w)
    e_aa = _windowed_mean(ga * ga, w)
    e_bb = _windowed_mean(gb * gb, w)
    e_ab = _windowed_mean(ga * gb, w)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())

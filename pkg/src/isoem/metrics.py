"""Full-reference image quality metrics."""

from __future__ import annotations

import math

import numpy as np

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    if data_range <= 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / err)


def _box_mean(x: np.ndarray, win: int) -> np.ndarray:
    # mean over every win x win window fully inside the image (valid positions)
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    s = c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win]
    return s / (win * win)


def ssim_map(a, b, data_range=1.0, window=SSIM_WINDOW, k1=SSIM_K1, k2=SSIM_K2) -> np.ndarray:
    """Per-window SSIM over all valid ``window x window`` positions.

    Window statistics are unweighted population moments.
    """
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError(f"ssim expects 2D images, got shape {a.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} is smaller than the SSIM window {window}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = _box_mean(a, window), _box_mean(b, window)
    var_a = np.maximum(_box_mean(a * a, window) - mu_a**2, 0.0)
    var_b = np.maximum(_box_mean(b * b, window) - mu_b**2, 0.0)
    cov = _box_mean(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range=1.0, window=SSIM_WINDOW, k1=SSIM_K1, k2=SSIM_K2) -> float:
    a, b = _pair(a, b)
    if np.array_equal(a, b):
        return 1.0
    return float(ssim_map(a, b, data_range, window, k1, k2).mean())


def volume_ssim(a, b, data_range=1.0, window=SSIM_WINDOW, k1=SSIM_K1, k2=SSIM_K2) -> float:
    """Mean of 2D SSIM over the xz planes (fixed y) of two (z, y, x) volumes."""
    a, b = _pair(a, b)
    if a.ndim != 3:
        raise ValueError(f"expected 3D volumes, got shape {a.shape}")
    return float(np.mean([ssim(a[:, j, :], b[:, j, :], data_range, window, k1, k2) for j in range(a.shape[1])]))

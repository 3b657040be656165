"""Fidelity metrics, global and foreground-masked.

Images are float arrays of shape (H, W, 3) with values in [0, 1] and peak
1.0. Masked variants restrict the measurement to a binary foreground mask;
for SSIM a local window counts if its center pixel is masked, and windows
are evaluated only where they fit entirely inside the image.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) images, got {a.shape}")
    return a, b


def _check_mask(mask: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if mask.shape != dims:
        raise ValueError(f"mask shape {mask.shape} != image dims {dims}")
    if not mask.any():
        raise ValueError("mask has no positive pixels")
    return mask


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def masked_psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """PSNR over masked pixels only (all channels)."""
    a, b = _check_pair(a, b)
    mask = _check_mask(mask, a.shape[:2])
    diff = (a - b)[mask]
    mse = float(np.mean(diff ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return k / k.sum()


def _local_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Separable filter; borders use zero padding but are cropped away below.
    out = correlate1d(img, kernel, axis=0, mode="constant")
    return correlate1d(out, kernel, axis=1, mode="constant")


def _ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-center SSIM over the region where the 11x11 window fits, (H', W')."""
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    kernel = _gaussian_kernel()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    maps = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = _local_mean(x, kernel)
        mu_y = _local_mean(y, kernel)
        xx = _local_mean(x * x, kernel) - mu_x ** 2
        yy = _local_mean(y * y, kernel) - mu_y ** 2
        xy = _local_mean(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        maps.append(num / den)
    full = np.mean(maps, axis=0)
    half = SSIM_WINDOW // 2
    return full[half:h - half, half:w - half]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM (11x11 Gaussian window, K1=0.01, K2=0.03, peak 1.0)."""
    a, b = _check_pair(a, b)
    return float(np.mean(_ssim_map(a, b)))


def masked_ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Mean local SSIM over windows whose center pixel is masked."""
    a, b = _check_pair(a, b)
    mask = _check_mask(mask, a.shape[:2])
    half = SSIM_WINDOW // 2
    inner = mask[half:a.shape[0] - half, half:a.shape[1] - half]
    if not inner.any():
        raise ValueError("mask has no pixels where the SSIM window fits")
    return float(np.mean(_ssim_map(a, b)[inner]))

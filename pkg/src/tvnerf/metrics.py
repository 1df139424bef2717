"""PSNR and single-scale SSIM."""

import numpy as np
from scipy.signal import convolve2d

from .errors import ShapeError

PSNR_CAP = 99.0


def psnr(a, b, peak=1.0, mask=None):
    """10 log10(peak^2 / MSE), capped at 99 dB (identical images report the cap)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    diff = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        while m.ndim < diff.ndim:
            m = m[..., None]
        diff = diff[np.broadcast_to(m, diff.shape)]
        if diff.size == 0:
            raise ValueError("mask selects no pixels")
    mse = float(np.mean(diff))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak ** 2 / mse))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(a, b, win, c1, c2):
    def filt(img):
        return convolve2d(img, win, mode="valid")
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range=1.0, k1=0.01, k2=0.03, win_size=11, sigma=1.5):
    """Mean SSIM over all valid 11x11 Gaussian-window positions, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < win_size or a.shape[1] < win_size:
        raise ShapeError(f"image smaller than the {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    if a.ndim == 2:
        return _ssim_channel(a, b, win, c1, c2)
    return float(np.mean([_ssim_channel(a[..., k], b[..., k], win, c1, c2)
                          for k in range(a.shape[-1])]))

"""Image and depth quality metrics on [0, 1] data."""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import correlate2d

PSNR_CAP = 99.0


def psnr(pred, ref, mask=None) -> float:
    """10 log10(1 / MSE), capped at 99 dB when MSE < 1e-10."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    err = (pred - ref) ** 2
    if mask is not None:
        err = err[np.asarray(mask, bool)]
    mse = float(np.mean(err))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(pred, ref, k1: float = 0.01, k2: float = 0.03, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows, averaged over channels."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    if pred.ndim == 2:
        pred, ref = pred[:, :, None], ref[:, :, None]
    if min(pred.shape[:2]) < size:
        raise ValueError(f"SSIM needs images of at least {size}x{size}")
    win = gaussian_window(size, sigma)
    c1, c2 = k1**2, k2**2
    scores = []
    for c in range(pred.shape[2]):
        x, y = pred[:, :, c], ref[:, :, c]
        f = lambda a: correlate2d(a, win, mode="valid")  # noqa: E731
        mx, my = f(x), f(y)
        sxx = f(x * x) - mx * mx
        syy = f(y * y) - my * my
        sxy = f(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


def depth_mae(pred, ref, mask=None) -> float:
    err = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(ref, dtype=np.float64))
    if mask is not None:
        err = err[np.asarray(mask, bool)]
    return float(err.mean())

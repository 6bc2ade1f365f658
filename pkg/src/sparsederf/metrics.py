"""Image quality metrics on [0, 1] float images."""
from __future__ import annotations

from typing import Dict, Sequence

import numpy as np
from scipy.signal import convolve2d
from scipy.signal.windows import gaussian

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_STD = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(-10.0 * np.log10(mse))


def _window() -> np.ndarray:
    g = gaussian(SSIM_WINDOW, SSIM_STD)
    w = np.outer(g, g)
    return w / w.sum()


def _filter(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    return convolve2d(x, window, mode="valid")


def ssim(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows and color channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    window = _window()
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mu_x, mu_y = _filter(x, window), _filter(y, window)
        sxx = _filter(x * x, window) - mu_x ** 2
        syy = _filter(y * y, window) - mu_y ** 2
        sxy = _filter(x * y, window) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def summarize(per_view: Dict[str, Dict[str, float]], keys: Sequence[str] = ("psnr", "ssim")) -> Dict[str, float]:
    """Mean of each metric over views."""
    if not per_view:
        return {k: float("nan") for k in keys}
    return {k: float(np.mean([v[k] for v in per_view.values()])) for k in keys}

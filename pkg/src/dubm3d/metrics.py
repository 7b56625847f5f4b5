"""PSNR and SSIM (Gaussian-window SSIM of Wang et al., valid-region mean)."""

from __future__ import annotations

import math

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _arr(img) -> np.ndarray:
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def _pair(x, ref):
    a, b = _arr(x), _arr(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(x, ref, peak: float = 1.0) -> float:
    """PSNR in dB; ``math.inf`` when the images are identical."""
    if not peak > 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    a, b = _pair(x, ref)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window() -> np.ndarray:
    r = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2
    g = np.exp(-(r**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    rows = sum(g[i] * x[i : x.shape[0] - n + 1 + i, :] for i in range(n))
    return sum(g[j] * rows[:, j : rows.shape[1] - n + 1 + j] for j in range(n))


def ssim_map(x, ref, peak: float = 1.0) -> np.ndarray:
    a, b = _pair(x, ref)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    c1, c2 = (K1 * peak) ** 2, (K2 * peak) ** 2
    g = _gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(x, ref, peak: float = 1.0) -> float:
    return float(np.mean(ssim_map(x, ref, peak)))

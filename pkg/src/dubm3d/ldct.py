"""Low-dose CT noise: Beer-Lambert transmission, Poisson counting, log transform.

Two paths share the counting model:

* ``image``: each pixel is treated as one measurement with attenuation
  ``mu_max * x``.
* ``projection``: parallel-beam line integrals (normalised so a path across
  the full image width through value 1 has attenuation ``mu_max``) are
  counted, log-transformed and reconstructed by filtered back projection.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .imageio import Image
from .rng import SplitMix64

PHOTON_LEVELS = (10_000, 50_000, 100_000, 500_000)
OUTPUT_RANGE = (0.0, 1.5)


@dataclass(frozen=True)
class NoiseConfig:
    photons: float
    mu_max: float = 4.0
    mode: str = "image"
    seed: int = 0
    angles: int | None = None  # projection mode; default 1.5 x image size

    def __post_init__(self):
        if not self.photons > 0:
            raise ValueError(f"photon count must be > 0, got {self.photons}")
        if not self.mu_max > 0:
            raise ValueError(f"mu_max must be > 0, got {self.mu_max}")
        if self.mode not in ("image", "projection"):
            raise ValueError(f"unknown simulation mode {self.mode!r}")


@dataclass
class Sinogram:
    """Line integrals, row-major [angle, bin]; bins centred on the rotation axis."""

    angles: np.ndarray
    bin_spacing: float
    values: np.ndarray

    @property
    def num_bins(self) -> int:
        return self.values.shape[1]


def _count(line_integral: np.ndarray, cfg: NoiseConfig, rng: SplitMix64) -> np.ndarray:
    lam = cfg.photons * np.exp(-cfg.mu_max * line_integral)
    n = rng.poisson(lam)
    return -np.log(np.maximum(n, 1) / cfg.photons) / cfg.mu_max


def simulate_low_dose(clean, cfg: NoiseConfig) -> Image:
    x = np.asarray(getattr(clean, "pixels", clean), dtype=np.float64)
    if x.min() < 0 or x.max() > 1:
        raise ValueError(f"clean image must lie in [0, 1], got [{x.min():.4g}, {x.max():.4g}]")
    rng = SplitMix64(cfg.seed)
    if cfg.mode == "image":
        y = _count(x, cfg, rng)
    else:
        size = x.shape[0]
        n_angles = cfg.angles or int(math.ceil(1.5 * size))
        sino = radon(x, default_angles(n_angles))
        # normalise path length to the image width so mu_max keeps its meaning
        noisy = _count(sino.values / size, cfg, rng) * size
        y = fbp(Sinogram(sino.angles, sino.bin_spacing, noisy), size).pixels
    return Image(np.clip(y, *OUTPUT_RANGE).astype(np.float32), range=OUTPUT_RANGE)


def default_angles(n: int) -> np.ndarray:
    return np.arange(n) * (np.pi / n)


def default_bins(size: int) -> int:
    """Enough unit-spaced bins to cover the image diagonal (odd, so one is centred)."""
    b = int(math.ceil(size * math.sqrt(2))) + 1
    return b + (b % 2 == 0)


def radon(img, angles=None, bins: int | None = None, step: float = 0.5) -> Sinogram:
    """Parallel-beam line integrals by bilinear sampling along each ray; pixel size 1."""
    x = np.asarray(getattr(img, "pixels", img), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"radon needs a square image, got {x.shape}")
    n = x.shape[0]
    angles = default_angles(n) if angles is None else np.asarray(angles, dtype=np.float64)
    bins = default_bins(n) if bins is None else bins
    centre = (n - 1) / 2.0
    s = np.arange(bins) - (bins - 1) / 2.0
    half = math.sqrt(2) * n / 2 + 1
    t = np.arange(-half, half + step / 2, step)

    cos, sin = np.cos(angles)[:, None, None], np.sin(angles)[:, None, None]
    # column (x) along (cos, sin) for s, ray direction (-sin, cos)
    cols = centre + s[None, :, None] * cos - t[None, None, :] * sin
    rows = centre + s[None, :, None] * sin + t[None, None, :] * cos
    samples = map_coordinates(x, [rows.ravel(), cols.ravel()], order=1, mode="constant", cval=0.0)
    values = samples.reshape(len(angles), bins, len(t)).sum(axis=2) * step
    return Sinogram(angles=angles, bin_spacing=1.0, values=values)


def ramlak_filter(length: int) -> np.ndarray:
    """Frequency response of the discrete Ram-Lak kernel for an FFT of ``length``."""
    k = np.concatenate([np.arange(1, length // 2 + 1, 2), np.arange(length // 2 - 1, 0, -2)])
    h = np.zeros(length)
    h[0] = 0.25
    h[1::2] = -1.0 / (np.pi * k) ** 2
    return 2.0 * np.real(np.fft.fft(h))


def fbp(sino: Sinogram, size: int) -> Image:
    """Ram-Lak filtered back projection onto a ``size`` x ``size`` grid."""
    n_angles, bins = sino.values.shape
    if n_angles < size:
        warnings.warn(f"{n_angles} angles for a {size}-pixel image will streak", stacklevel=2)
    length = max(64, 1 << int(math.ceil(math.log2(2 * bins))))
    padded = np.zeros((n_angles, length))
    padded[:, :bins] = sino.values
    filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * ramlak_filter(length), axis=1))[:, :bins]
    filtered /= sino.bin_spacing

    centre = (size - 1) / 2.0
    coords = np.arange(size) - centre
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    out = np.zeros((size, size))
    for a, theta in enumerate(sino.angles):
        pos = (xx * math.cos(theta) + yy * math.sin(theta)) / sino.bin_spacing + (bins - 1) / 2.0
        out += np.interp(pos, np.arange(bins), filtered[a], left=0.0, right=0.0)
    out *= np.pi / (2 * n_angles)
    return Image(np.clip(out, *OUTPUT_RANGE).astype(np.float32), range=OUTPUT_RANGE)

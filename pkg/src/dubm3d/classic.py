"""Transform-domain collaborative filtering (the classic BM3D stages).

Stacks are [..., K, P, P]: a 2-D orthonormal DCT-II on every patch followed
by an orthonormal Haar transform along the group axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .aggregation import aggregate
from .matching import MatchConfig, gather_stacks, plan_matches

MAD_SCALE = 0.6745


@dataclass(frozen=True)
class ClassicConfig:
    sigma: float
    lambda_thr: float = 2.7

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not self.lambda_thr > 0:
            raise ValueError(f"lambda_thr must be > 0, got {self.lambda_thr}")


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix, rows are basis vectors."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


@lru_cache(maxsize=None)
def haar_matrix(n: int) -> np.ndarray:
    """Orthonormal multi-level Haar matrix for power-of-two ``n``."""
    if n < 1 or n & (n - 1):
        raise ValueError(f"Haar transform needs a power-of-two length, got {n}")
    h = np.array([[1.0]])
    while h.shape[0] < n:
        m = h.shape[0]
        top = np.kron(h, [1.0, 1.0])
        bottom = np.kron(np.eye(m), [1.0, -1.0])
        h = np.vstack([top, bottom]) / np.sqrt(2.0)
    return h


def dct2(patch) -> np.ndarray:
    """Orthonormal 2-D DCT-II of the last two axes."""
    x = np.asarray(patch, dtype=np.float64)
    d = dct_matrix(x.shape[-1])
    return d @ x @ d.T


def idct2(coef) -> np.ndarray:
    c = np.asarray(coef, dtype=np.float64)
    d = dct_matrix(c.shape[-1])
    return d.T @ c @ d


def haar_forward(stack) -> np.ndarray:
    """Haar along axis -3 (the group axis of [..., K, P, P])."""
    s = np.asarray(stack, dtype=np.float64)
    return np.einsum("jk,...kab->...jab", haar_matrix(s.shape[-3]), s)


def haar_inverse(coef) -> np.ndarray:
    c = np.asarray(coef, dtype=np.float64)
    return np.einsum("kj,...kab->...jab", haar_matrix(c.shape[-3]), c)


def transform3d(stack) -> np.ndarray:
    return haar_forward(dct2(stack))


def inverse3d(coef) -> np.ndarray:
    return idct2(haar_inverse(coef))


def hard_threshold_filter(stack, cfg: ClassicConfig):
    """Zero small 3-D coefficients, keeping the DC-of-DC term.

    Works on one stack [K, P, P] or a batch [G, K, P, P]; returns the filtered
    stack(s) and the aggregation weight 1 / (sigma^2 * max(1, n_retained)).
    """
    coef = transform3d(stack)
    keep = np.abs(coef) >= cfg.lambda_thr * cfg.sigma
    keep[..., 0, 0, 0] = True
    n_kept = keep.sum(axis=(-3, -2, -1))
    out = inverse3d(np.where(keep, coef, 0.0))
    weight = 1.0 / (cfg.sigma**2 * np.maximum(1, n_kept))
    return out, weight


def wiener_filter(noisy_stack, pilot_stack, cfg: ClassicConfig):
    """Empirical Wiener shrinkage S^2 / (S^2 + sigma^2) with S from the pilot."""
    noisy_stack = np.asarray(noisy_stack)
    pilot_stack = np.asarray(pilot_stack)
    if noisy_stack.shape != pilot_stack.shape:
        raise ValueError(f"noisy stack {noisy_stack.shape} and pilot stack {pilot_stack.shape} differ")
    s2 = transform3d(pilot_stack) ** 2
    gain = s2 / (s2 + cfg.sigma**2)
    out = inverse3d(gain * transform3d(noisy_stack))
    energy = (gain**2).sum(axis=(-3, -2, -1))
    # an all-zero pilot gives zero gain; floor keeps the weight finite
    weight = 1.0 / (cfg.sigma**2 * np.maximum(energy, 1e-12))
    return out, weight


def estimate_sigma(img) -> float:
    """Noise level from the median absolute finest diagonal Haar detail."""
    x = np.asarray(getattr(img, "pixels", img), dtype=np.float64)
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    hh = (x[0::2, 0::2] - x[0::2, 1::2] - x[1::2, 0::2] + x[1::2, 1::2]) / 2.0
    return float(np.median(np.abs(hh)) / MAD_SCALE)


def bm3d(img, sigma: float | None = None, lambda_thr: float = 2.7, match: MatchConfig = MatchConfig()) -> np.ndarray:
    """Two-stage classic BM3D with matching done on the noisy input, then the pilot.

    ``sigma`` defaults to the MAD estimate; a zero estimate (noise-free
    input) is floored so shrinkage stays defined.
    """
    x = np.asarray(getattr(img, "pixels", img), dtype=np.float32)
    if sigma is None:
        sigma = estimate_sigma(x)
    cfg = ClassicConfig(sigma=max(sigma, 1e-6), lambda_thr=lambda_thr)

    plan = plan_matches(x, match)
    basic, w1 = hard_threshold_filter(gather_stacks(x, plan), cfg)
    pilot = aggregate(basic, plan.with_weights(w1))

    plan2 = plan_matches(pilot, match)
    final, w2 = wiener_filter(gather_stacks(x, plan2), gather_stacks(pilot, plan2), cfg)
    return aggregate(final, plan2.with_weights(w2))

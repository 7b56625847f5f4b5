"""Block matching: reference grid, windowed search and 3-D stack gathering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imageio import Image


@dataclass(frozen=True)
class MatchConfig:
    patch: int = 8
    stride: int = 4
    window: int = 12
    group_size: int = 8
    tau: float = math.inf

    def __post_init__(self):
        if self.patch < 1:
            raise ValueError(f"patch must be >= 1, got {self.patch}")
        if not 1 <= self.stride <= self.patch:
            raise ValueError(f"stride must lie in [1, patch={self.patch}], got {self.stride}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.window < 0:
            raise ValueError(f"window must be >= 0, got {self.window}")
        if not self.tau >= 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")


@dataclass(eq=False)
class MatchPlan:
    """Geometry of every group: ``coords`` [G, K, 2] top-left (row, col),
    ``distances`` [G, K] mean squared distance to the reference, ``weights`` [G]."""

    config: MatchConfig
    image_shape: tuple[int, int]
    coords: np.ndarray
    distances: np.ndarray
    weights: np.ndarray
    _index: np.ndarray | None = field(default=None, repr=False)
    _denominator: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_groups(self) -> int:
        return self.coords.shape[0]

    def with_weights(self, weights) -> MatchPlan:
        weights = np.asarray(weights, dtype=np.float64).reshape(self.num_groups)
        # index map depends only on geometry and is shared
        return replace(self, weights=weights, _denominator=None)

    def pixel_index(self) -> np.ndarray:
        """Flat image index of every stack element, shape [G, K, P, P] (cached)."""
        if self._index is None:
            p = self.config.patch
            w = self.image_shape[1]
            offs = (np.arange(p)[:, None] * w + np.arange(p)[None, :]).astype(np.int64)
            base = self.coords[..., 0].astype(np.int64) * w + self.coords[..., 1]
            self._index = base[:, :, None, None] + offs
        return self._index

    def to_bytes(self) -> bytes:
        """Canonical serialization, used to compare plans bit-for-bit."""
        c = self.config
        head = np.array([c.patch, c.stride, c.window, c.group_size, *self.image_shape], dtype="<i8")
        return b"".join(
            [
                head.tobytes(),
                np.float64(c.tau).astype("<f8").tobytes(),
                self.coords.astype("<i8").tobytes(),
                self.distances.astype("<f8").tobytes(),
                self.weights.astype("<f8").tobytes(),
            ]
        )


def reference_grid(length: int, patch: int, stride: int) -> np.ndarray:
    """Positions 0, stride, 2*stride, ... plus a final one flush with the border."""
    last = length - patch
    pos = list(range(0, last + 1, stride))
    if pos[-1] != last:
        pos.append(last)
    return np.array(pos, dtype=np.int64)


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float32)


def plan_matches(img, cfg: MatchConfig = MatchConfig()) -> MatchPlan:
    x = _pixels(img).astype(np.float64)
    h, w = x.shape
    p, k, win = cfg.patch, cfg.group_size, cfg.window
    if h < p or w < p:
        raise ValueError(f"image {h}x{w} is smaller than the {p}x{p} patch")

    rows = reference_grid(h, p, cfg.stride)
    cols = reference_grid(w, p, cfg.stride)
    ref = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1).reshape(-1, 2)
    patches = sliding_window_view(x, (p, p))  # [H-P+1, W-P+1, P, P]
    ref_patches = patches[ref[:, 0], ref[:, 1]]

    # offsets in row-major order, so a stable sort breaks ties by candidate position
    d = np.arange(-win, win + 1)
    offsets = np.stack(np.meshgrid(d, d, indexing="ij"), axis=-1).reshape(-1, 2)
    n_ref, n_off = len(ref), len(offsets)
    dist = np.full((n_ref, n_off), np.inf)
    for j, (dy, dx) in enumerate(offsets):
        cy, cx = ref[:, 0] + dy, ref[:, 1] + dx
        ok = (cy >= 0) & (cy <= h - p) & (cx >= 0) & (cx <= w - p)
        if not ok.any():
            continue
        diff = patches[cy[ok], cx[ok]] - ref_patches[ok]
        dist[ok, j] = np.mean(diff * diff, axis=(1, 2))

    centre = n_off // 2  # offset (0, 0)
    dist[dist > cfg.tau] = np.inf
    dist[:, centre] = -1.0  # the reference always ranks first
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    if order.shape[1] < k:
        order = np.concatenate([order, np.full((n_ref, k - order.shape[1]), centre)], axis=1)
    chosen = np.take_along_axis(dist, order, axis=1)
    chosen[:, 0] = 0.0
    chosen[:, n_off:] = np.inf  # window smaller than the group

    # Too few candidates passed tau: repeat the reference right after itself,
    # which keeps distances exact (0) and non-decreasing.
    n_pad = (~np.isfinite(chosen)).sum(axis=1)
    for g in np.flatnonzero(n_pad):
        real = k - n_pad[g]
        order[g] = np.concatenate([[centre] * (n_pad[g] + 1), order[g, 1:real]])
        chosen[g] = np.concatenate([np.zeros(n_pad[g] + 1), chosen[g, 1:real]])

    return MatchPlan(
        config=cfg,
        image_shape=(h, w),
        coords=(ref[:, None, :] + offsets[order]).astype(np.int64),
        distances=chosen,
        weights=np.ones(n_ref),
    )


def gather_stacks(img, plan: MatchPlan) -> np.ndarray:
    """Copy every planned patch into a [G, K, P, P] float32 array."""
    x = _pixels(img)
    if x.shape != tuple(plan.image_shape):
        raise ValueError(f"image shape {x.shape} does not match plan shape {tuple(plan.image_shape)}")
    return x.reshape(-1)[plan.pixel_index()].astype(np.float32)

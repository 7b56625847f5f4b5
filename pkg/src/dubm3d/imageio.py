"""Grayscale image container, PGM / DUB1 file formats and synthetic phantoms.

DUB1 layout (all little-endian)::

    b"DUB1" | u32 rank | rank x u32 extent | prod(extents) x f32, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import SplitMix64

DUB1_MAGIC = b"DUB1"


class ImageFormatError(ValueError):
    """Raised for unreadable image/tensor files."""


class MalformedHeaderError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class UnsupportedFormatError(ImageFormatError):
    pass


@dataclass
class Image:
    pixels: np.ndarray
    range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise ValueError(f"image must be 2-d and non-empty, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("image contains non-finite pixels")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


# ---------------------------------------------------------------- DUB1


def write_tensor(path, array) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = DUB1_MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedPayloadError(f"{path}: file too short for a DUB1 header")
    if raw[:4] != DUB1_MAGIC:
        raise UnsupportedFormatError(f"{path}: bad magic {raw[:4]!r}, expected {DUB1_MAGIC!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank > 16:
        raise MalformedHeaderError(f"{path}: implausible rank {rank}")
    if len(raw) < 8 + 4 * rank:
        raise TruncatedPayloadError(f"{path}: header truncated")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) - offset < 4 * count:
        raise TruncatedPayloadError(f"{path}: expected {count} floats, payload holds {(len(raw) - offset) // 4}")
    if len(raw) - offset > 4 * count:
        raise MalformedHeaderError(f"{path}: {len(raw) - offset - 4 * count} trailing bytes")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)


# ---------------------------------------------------------------- PGM


def _pgm_tokens(raw: bytes, count: int, path) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated integers after the magic, skipping comments."""
    vals, pos, n = [], 2, len(raw)
    while len(vals) < count:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            if pos >= n:
                raise MalformedHeaderError(f"{path}: header ended early")
            raise MalformedHeaderError(f"{path}: unexpected byte {raw[pos:pos + 1]!r} in header")
        vals.append(int(raw[start:pos]))
    return vals, pos


def _read_pgm(raw: bytes, path) -> Image:
    magic = raw[:2]
    (width, height, maxval), pos = _pgm_tokens(raw, 3, path)
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"{path}: bad dimensions {width}x{height}")
    if maxval not in (255, 65535):
        raise UnsupportedFormatError(f"{path}: maxval {maxval} not supported (255 or 65535)")
    n = width * height
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        dtype = ">u2" if maxval > 255 else "u1"
        need = n * np.dtype(dtype).itemsize
        if len(raw) - pos < need:
            raise TruncatedPayloadError(f"{path}: payload has {len(raw) - pos} bytes, need {need}")
        values = np.frombuffer(raw, dtype=dtype, count=n, offset=pos)
    else:
        body = raw[pos:].split()
        if len(body) < n:
            raise TruncatedPayloadError(f"{path}: {len(body)} samples, need {n}")
        try:
            values = np.array([int(t) for t in body[:n]], dtype=np.int64)
        except ValueError as exc:
            raise MalformedHeaderError(f"{path}: non-integer sample in P2 body") from exc
    if values.max(initial=0) > maxval:
        raise MalformedHeaderError(f"{path}: sample exceeds maxval {maxval}")
    pixels = values.astype(np.float64).reshape(height, width) / maxval
    return Image(pixels.astype(np.float32))


def read_image(path) -> Image:
    """Load PGM (P2/P5, scaled into [0, 1]) or a rank-2 DUB1 file (verbatim)."""
    raw = Path(path).read_bytes()
    magic = raw[:4]
    if magic == DUB1_MAGIC:
        arr = read_tensor(path)
        if arr.ndim != 2:
            raise MalformedHeaderError(f"{path}: DUB1 rank {arr.ndim}, images need rank 2")
        return Image(arr)
    if raw[:2] in (b"P2", b"P5"):
        return _read_pgm(raw, path)
    raise UnsupportedFormatError(f"{path}: unknown magic {raw[:4]!r}")


def write_image(img: Image, path, format: str = "f32raw") -> None:
    if format == "f32raw":
        write_tensor(path, img.pixels)
        return
    if format not in ("pgm8", "pgm16"):
        raise ValueError(f"unknown image format {format!r}")
    maxval = 255 if format == "pgm8" else 65535
    lo, hi = img.range
    x = (np.clip(img.pixels.astype(np.float64), lo, hi) - lo) / (hi - lo)
    q = np.floor(x * maxval + 0.5).astype(np.int64)  # round half up
    header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode()
    payload = q.astype("u1" if maxval == 255 else ">u2").tobytes()
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------- phantoms

PHANTOM_KINDS = ("disks", "shepp-like", "piecewise")


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def make_phantom(kind: str, height: int, width: int, seed: int) -> Image:
    """Piecewise-constant/smooth test object with sharp edges, values in [0, 1].

    Coordinates are normalised to [-1, 1] so the same seed gives the same
    structure at any resolution.
    """
    if kind not in PHANTOM_KINDS:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
    rng = SplitMix64(seed)
    yy, xx = np.meshgrid(
        (np.arange(height) + 0.5) / height * 2 - 1,
        (np.arange(width) + 0.5) / width * 2 - 1,
        indexing="ij",
    )
    img = np.zeros((height, width))

    if kind == "disks":
        body = _ellipse(yy, xx, 0, 0, 0.85, 0.9)
        img[body] = 0.2 + 0.1 * rng.uniform()
        for _ in range(3 + int(rng.integers(5))):
            cy, cx = rng.uniform_range(-0.55, 0.55, 2)
            r = rng.uniform_range(0.08, 0.25)
            img[_ellipse(yy, xx, cy, cx, r, r) & body] = rng.uniform_range(0.35, 0.95)
    elif kind == "shepp-like":
        # outer skull + soft tissue + randomised inner ellipses
        img[_ellipse(yy, xx, 0, 0, 0.92, 0.69)] = 0.8
        img[_ellipse(yy, xx, -0.02, 0, 0.87, 0.62)] = 0.25
        for _ in range(4 + int(rng.integers(4))):
            cy, cx = rng.uniform_range(-0.5, 0.5, 2)
            ry, rx = rng.uniform_range(0.05, 0.3, 2)
            ang = rng.uniform_range(0, np.pi)
            mask = _ellipse(yy, xx, cy, cx, ry, rx, ang) & (img > 0)
            img[mask] = np.clip(img[mask] + rng.uniform_range(-0.15, 0.35), 0.0, 1.0)
    else:
        a, b, c = rng.uniform_range(-0.15, 0.15, 3)
        img[:] = 0.35 + a * yy + b * xx + c * yy * xx
        for _ in range(3 + int(rng.integers(4))):
            y0, x0 = rng.uniform_range(-0.9, 0.5, 2)
            hy, hx = rng.uniform_range(0.15, 0.5, 2)
            mask = (yy >= y0) & (yy < y0 + hy) & (xx >= x0) & (xx < x0 + hx)
            img[mask] = rng.uniform_range(0.05, 0.95)
    return Image(np.clip(img, 0.0, 1.0).astype(np.float32))

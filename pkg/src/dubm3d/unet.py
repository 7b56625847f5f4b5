"""Compact two-level U-Net used as the learnable collaborative filter.

Layout (C = channels, w1/w2 = widths, default 16/32)::

    enc1: conv3x3(C -> w1) relu      enc2: conv3x3(w1 -> w1) relu   ----skip----+
    pool -> mid: conv3x3(w1 -> w2) relu -> upsample                             |
    concat(up, skip) -> dec1: conv3x3(w2 + w1 -> w1) relu -> out: conv3x3(w1 -> C)

On stacks the group axis is the channel axis (C = K); on whole images C = 1.
The output is the denoised signal itself, not a residual.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .imageio import Image
from .rng import SplitMix64

KERNEL = 3


@dataclass(frozen=True)
class Descriptor:
    channels: int = 8
    patch: int = 8
    width1: int = 16
    width2: int = 32

    def layers(self) -> list[tuple[str, int, int]]:
        """(name, in_channels, out_channels) in forward order."""
        c, w1, w2 = self.channels, self.width1, self.width2
        return [
            ("enc1", c, w1),
            ("enc2", w1, w1),
            ("mid", w1, w2),
            ("dec1", w2 + w1, w1),
            ("out", w1, c),
        ]

    def param_count(self) -> int:
        return sum(cout * cin * KERNEL * KERNEL + cout for _, cin, cout in self.layers())

    def for_images(self) -> Descriptor:
        """Same widths, single channel, any (even) spatial size."""
        return Descriptor(channels=1, patch=0, width1=self.width1, width2=self.width2)


# name -> Tensor, in forward order
ModelParams = OrderedDict


def init_params(desc: Descriptor, seed: int) -> ModelParams:
    """Glorot-uniform kernels, zero biases."""
    rng = SplitMix64(seed)
    params = OrderedDict()
    for name, cin, cout in desc.layers():
        bound = np.sqrt(6.0 / ((cin + cout) * KERNEL * KERNEL))
        w = rng.uniform_range(-bound, bound, (cout, cin, KERNEL, KERNEL))
        params[f"{name}.weight"] = T.Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = T.Tensor(np.zeros(cout), requires_grad=True)
    return params


def init_identity(desc: Descriptor) -> ModelParams:
    """Parameters that reproduce any non-negative input exactly.

    Channels travel unchanged through enc1/enc2 and the skip branch; the
    bottleneck is zeroed.
    """
    if desc.width1 < desc.channels:
        raise ValueError("identity init needs width1 >= channels")
    c, w2 = desc.channels, desc.width2
    mid = KERNEL // 2
    params = OrderedDict()
    for name, cin, cout in desc.layers():
        w = np.zeros((cout, cin, KERNEL, KERNEL), dtype=np.float32)
        if name in ("enc1", "enc2", "out"):
            for i in range(c):
                w[i, i, mid, mid] = 1.0
        elif name == "dec1":
            for i in range(c):
                w[i, w2 + i, mid, mid] = 1.0
        params[f"{name}.weight"] = T.Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = T.Tensor(np.zeros(cout), requires_grad=True)
    return params


def check_params(params, desc: Descriptor) -> None:
    for name, cin, cout in desc.layers():
        for suffix, shape in ((".weight", (cout, cin, KERNEL, KERNEL)), (".bias", (cout,))):
            key = name + suffix
            if key not in params:
                raise ValueError(f"missing parameter {key}")
            if params[key].shape != shape:
                raise ValueError(f"{key}: shape {params[key].shape}, descriptor expects {shape}")


def forward(params, x: T.Tensor) -> T.Tensor:
    """Network on an [N, C, H, W] tensor with even H, W."""
    def conv(name, t):
        return T.conv2d(t, params[f"{name}.weight"], params[f"{name}.bias"], padding=KERNEL // 2)

    e1 = T.relu(conv("enc1", x))
    skip = T.relu(conv("enc2", e1))
    m = T.relu(conv("mid", T.maxpool2(skip)))
    d = T.relu(conv("dec1", T.concat_channels(T.upsample2_nearest(m), skip)))
    return conv("out", d)


def forward_stack(params, stacks, desc: Descriptor) -> T.Tensor:
    """Denoise [G, K, P, P] stacks (array or Tensor); returns a Tensor of the same shape."""
    x = stacks if isinstance(stacks, T.Tensor) else T.Tensor(stacks)
    if x.data.ndim != 4 or x.shape[1] != desc.channels or x.shape[2:] != (desc.patch, desc.patch):
        raise ValueError(
            f"stack shape {list(x.shape)} does not match descriptor K={desc.channels}, P={desc.patch}"
        )
    return forward(params, x)


def forward_image_tensor(params, img: np.ndarray) -> T.Tensor:
    """Whole-image network with reflect padding to even extents; output cropped back."""
    h, w = img.shape
    padded = np.pad(img, ((0, h % 2), (0, w % 2)), mode="reflect") if (h % 2 or w % 2) else img
    out = forward(params, T.Tensor(padded[None, None]))
    if h % 2 or w % 2:
        out = _crop(out, h, w)
    return out


def _crop(t: T.Tensor, h: int, w: int) -> T.Tensor:
    full = t.shape

    def grad(g):
        gg = np.zeros(full, dtype=np.float32)
        gg[..., :h, :w] = g
        return (gg,)

    return T.record("crop", (t,), t.data[..., :h, :w].copy(), grad)


def forward_image(params, img) -> Image:
    pixels = np.asarray(getattr(img, "pixels", img), dtype=np.float32)
    if params["enc1.weight"].shape[1] != 1:
        raise ValueError("image mode needs a single-channel descriptor")
    return Image(forward_image_tensor(params, pixels).data[0, 0])

"""Adam training of the denoiser through the frozen matching/aggregation operators,
dataset splitting and checkpoint files.

Checkpoint layout (little-endian)::

    b"DUBM" | u32 version (=1)
    descriptor block:
        u8 mode (0 du-bm3d, 1 unet-image)
        u32 channels | u32 patch | u32 width1 | u32 width2
        u32 match.patch | u32 match.stride | u32 match.window | u32 match.group_size | f64 match.tau
        u64 train steps
    u32 tensor count
    per tensor: u16 name length | name (utf-8) | u32 rank | rank x u32 extents | f32 data
    u8 adam flag; if 1: u64 t, then per tensor (same order) f32 m, f32 v
"""

from __future__ import annotations

import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .matching import MatchConfig, MatchPlan, plan_matches
from .pipeline import Model
from .rng import SplitMix64, derive_seed
from .unet import Descriptor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DUBM"
CKPT_VERSION = 1
MODE_CODES = {"du-bm3d": 0, "unet-image": 1}
DEFAULT_SPLIT = (0.69, 0.14, 0.17)


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mode: str = "du-bm3d"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.mode not in MODE_CODES:
            raise ValueError(f"unknown training mode {self.mode!r}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> AdamState:
        return cls(
            m={k: np.zeros(p.shape, np.float32) for k, p in params.items()},
            v={k: np.zeros(p.shape, np.float32) for k, p in params.items()},
        )


@dataclass
class Checkpoint:
    model: Model
    adam: AdamState | None = None
    steps: int = 0


@dataclass(eq=False)
class Sample:
    """One (low-dose, normal-dose) pair; the matching plan is built once, on ``noisy``."""

    noisy: np.ndarray
    clean: np.ndarray
    _plans: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.noisy = np.asarray(getattr(self.noisy, "pixels", self.noisy), dtype=np.float32)
        self.clean = np.asarray(getattr(self.clean, "pixels", self.clean), dtype=np.float32)
        if self.noisy.shape != self.clean.shape:
            raise ValueError(f"pair shapes differ: {self.noisy.shape} vs {self.clean.shape}")

    def plan(self, cfg: MatchConfig) -> MatchPlan:
        if cfg not in self._plans:
            self._plans[cfg] = plan_matches(self.noisy, cfg)
        return self._plans[cfg]


def mse_loss(pred, target) -> float:
    a = np.asarray(getattr(pred, "pixels", pred), dtype=np.float64)
    b = np.asarray(getattr(target, "pixels", target), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One Adam update.  Returns new parameter tensors; ``state`` is advanced in place.

    Missing gradients count as zero.
    """
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    new = OrderedDict()
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        m = b1 * state.m[name].astype(np.float64) + (1 - b1) * g
        v = b2 * state.v[name].astype(np.float64) + (1 - b2) * g * g
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)
        step = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new[name] = T.Tensor(p.data.astype(np.float64) - step, requires_grad=True)
    return new, state


def sample_loss(model: Model, sample: Sample) -> tuple[T.Tensor, T.Tape]:
    """Forward one pair on a fresh tape; the loss is the per-pixel image MSE."""
    with T.Tape() as tape:
        plan = sample.plan(model.match) if model.mode == "du-bm3d" else None
        pred = model.forward_tensor(sample.noisy, plan)
        loss = T.mse(pred, T.Tensor(sample.clean))
    return loss, tape


def batch_gradients(model: Model, batch: Sequence[Sample]) -> tuple[dict[str, np.ndarray], float]:
    """Mean loss over the batch and its gradient, accumulated in batch order."""
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for sample in batch:
        for p in model.params.values():
            p.zero_grad()
        loss, tape = sample_loss(model, sample)
        T.backward(loss, tape)
        total += loss.item()
        for name, p in model.params.items():
            if p.grad is not None:
                grads[name] = grads[name] + p.grad if name in grads else p.grad.astype(np.float64)
    n = len(batch)
    return {k: g / n for k, g in grads.items()}, total / n


def train_epoch(dataset: Sequence[Sample], model: Model, state: AdamState, cfg: TrainConfig, epoch: int = 0):
    """Shuffle (seeded by ``cfg.seed`` and ``epoch``), step once per batch.

    Returns the updated state and the mean training loss over the epoch.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    order = SplitMix64(derive_seed(cfg.seed, epoch)).permutation(len(dataset))
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
        grads, loss = batch_gradients(model, batch)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
        model.params, state = adam_step(model.params, grads, state, cfg)
        losses.extend([loss] * len(batch))
    return state, float(np.mean(losses))


def evaluate_loss(dataset: Sequence[Sample], model: Model) -> float:
    losses = []
    for s in dataset:
        plan = s.plan(model.match) if model.mode == "du-bm3d" else None
        losses.append(mse_loss(model.forward_tensor(s.noisy, plan).data, s.clean))
    return float(np.mean(losses))


def fit(train: Sequence[Sample], model: Model, cfg: TrainConfig, val: Sequence[Sample] = (), state=None):
    """Run ``cfg.epochs`` epochs; returns (state, history of per-epoch dicts)."""
    state = state or AdamState.zeros(model.params)
    history = []
    for epoch in range(cfg.epochs):
        state, train_loss = train_epoch(train, model, state, cfg, epoch)
        row = {"epoch": epoch + 1, "train_loss": train_loss}
        if val:
            row["val_loss"] = evaluate_loss(val, model)
        log.info("epoch %d %s", epoch + 1, " ".join(f"{k}={v:.6g}" for k, v in row.items() if k != "epoch"))
        history.append(row)
    return state, history


def split_dataset(items: Sequence, fractions=DEFAULT_SPLIT, seed: int = 0):
    """Seeded shuffle then contiguous train/val/test split.

    Sizes are the rounded fractions; whatever rounding leaves over goes to train.
    """
    if len(items) == 0:
        raise ValueError("cannot split an empty collection")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-6 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(items)
    n_val = int(math.floor(fractions[1] * n + 0.5))
    n_test = int(math.floor(fractions[2] * n + 0.5))
    n_val = min(n_val, n)
    n_test = min(n_test, n - n_val)
    n_train = n - n_val - n_test
    order = SplitMix64(seed).permutation(n)
    shuffled = [items[i] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    m, d = ckpt.model, ckpt.model.descriptor
    c = m.match
    out = [
        CKPT_MAGIC,
        struct.pack("<I", CKPT_VERSION),
        struct.pack("<B4I", MODE_CODES[m.mode], d.channels, d.patch, d.width1, d.width2),
        struct.pack("<4Id", c.patch, c.stride, c.window, c.group_size, c.tau),
        struct.pack("<Q", ckpt.steps),
        struct.pack("<I", len(m.params)),
    ]
    for name, p in m.params.items():
        key = name.encode()
        out.append(struct.pack(f"<H{len(key)}sI{p.data.ndim}I", len(key), key, p.data.ndim, *p.shape))
        out.append(p.data.astype("<f4").tobytes())
    if ckpt.adam is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01" + struct.pack("<Q", ckpt.adam.t))
        for name in m.params:
            out.append(ckpt.adam.m[name].astype("<f4").tobytes())
            out.append(ckpt.adam.v[name].astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        if self.pos + 4 * n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        arr = np.frombuffer(self.raw, "<f4", count=n, offset=self.pos).astype(np.float32).reshape(shape)
        self.pos += 4 * n
        return arr


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    r.pos = 4
    (version,) = r.take("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    mode_code, channels, patch, w1, w2 = r.take("<B4I")
    modes = {v: k for k, v in MODE_CODES.items()}
    if mode_code not in modes:
        raise CheckpointError(f"{path}: unknown mode code {mode_code}")
    mp, ms, mw, mk, tau = r.take("<4Id")
    (steps,) = r.take("<Q")
    (count,) = r.take("<I")
    params = OrderedDict()
    for _ in range(count):
        (n,) = r.take("<H")
        (key,) = r.take(f"<{n}s")
        (rank,) = r.take("<I")
        shape = r.take(f"<{rank}I")
        params[key.decode()] = T.Tensor(r.floats(shape), requires_grad=True)
    (flag,) = r.take("<B")
    adam = None
    if flag == 1:
        (t,) = r.take("<Q")
        m, v = {}, {}
        for name, p in params.items():
            m[name] = r.floats(p.shape)
            v[name] = r.floats(p.shape)
        adam = AdamState(m, v, t)
    elif flag != 0:
        raise CheckpointError(f"{path}: bad optimizer flag {flag}")
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    try:
        model = Model(
            modes[mode_code],
            Descriptor(channels, patch, w1, w2),
            params,
            MatchConfig(patch=mp, stride=ms, window=mw, group_size=mk, tau=tau),
        )
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return Checkpoint(model=model, adam=adam, steps=steps)

"""Dense float32 tensors with define-by-run reverse-mode differentiation.

Usage::

    with Tape() as tape:
        y = conv2d(x, w, b, padding=1)
        loss = mean(y)
    backward(loss, tape)
    w.grad  # filled in

Operations record a node on the active tape only when at least one input
requires a gradient.  Outside a ``Tape`` block everything still computes,
nothing is recorded.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the output gradient to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, grad_fn) -> Tensor:
    """Wrap ``out_data`` and record ``grad_fn`` if any input needs a gradient.

    This is also the hook for operators defined outside this module (the
    aggregation step registers its adjoint through it).
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, grad_fn)
        out.tape_node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf needing it."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if loss.tape_node is None:
        if loss.requires_grad:
            # the loss is itself a leaf
            _accumulate(loss, np.ones_like(loss.data))
        return
    if loss.tape_node not in tape.nodes:
        raise ValueError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not inp.requires_grad:
                continue
            g = np.asarray(g, dtype=DTYPE)
            if inp.tape_node is None:
                _accumulate(inp, g)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + g
            else:
                grads[id(inp)] = g


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = g.astype(DTYPE, copy=True)
    else:
        leaf.grad += g


# ---------------------------------------------------------------- elementwise


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, DTYPE(0)), lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    if out.size != x.size:
        raise ShapeError(f"reshape: cannot view {list(old)} as {list(shape)}")
    return record("reshape", (x,), out, lambda g: (g.reshape(old),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = np.array(x.data.sum(dtype=np.float64), dtype=DTYPE)
    return record("sum", (x,), out, lambda g: (np.full(shape, g, dtype=DTYPE),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    out = np.array(x.data.mean(dtype=np.float64), dtype=DTYPE)
    return record("mean", (x,), out, lambda g: (np.full(shape, g / n, dtype=DTYPE),))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    _same_shape("mse", pred, target)
    diff = pred.data.astype(np.float64) - target.data
    n = diff.size
    out = np.array(np.mean(diff * diff), dtype=DTYPE)

    def grad(g):
        d = (2.0 * float(np.reshape(g, -1)[0]) / n) * diff
        return d.astype(DTYPE), (-d).astype(DTYPE)

    return record("mse", (pred, target), out, grad)


# ---------------------------------------------------------------- conv stack


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """2-D cross-correlation, stride 1, zero padding.

    ``x`` is [N, C, H, W], ``kernel`` is [F, C, k, k] with odd k, ``bias`` is [F].
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4-d input and kernel, got {list(x.shape)} and {list(kernel.shape)}"
        )
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c or kh != kw:
        raise ShapeError(f"conv2d: input {list(x.shape)} incompatible with kernel {list(kernel.shape)}")
    if kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel extent must be odd, input {list(x.shape)} kernel {list(kernel.shape)}")
    if padding < 0:
        raise ShapeError(f"conv2d: negative padding {padding} for input {list(x.shape)} kernel {list(kernel.shape)}")
    k = kh
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {list(x.shape)} too small for kernel {list(kernel.shape)}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias {list(bias.shape)} does not match kernel {list(kernel.shape)}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # cols: [N*Ho*Wo, C*k*k]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, Ho, Wo, k, k
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wmat = kernel.data.reshape(f, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def grad(g):
        go = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gk = (go.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = go.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (go @ wmat).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + ho, j : j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d", inputs, out, grad)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; ties go to the first cell in row-major order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2: expected [N,C,H,W], got {list(x.shape)}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extents must be even, got {list(x.shape)}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def grad(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return record("maxpool2", (x,), out, grad)


def upsample2_nearest(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2_nearest: expected [N,C,H,W], got {list(x.shape)}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def grad(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record("upsample2", (x,), out, grad)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels: expected 4-d tensors, got {list(a.shape)} and {list(b.shape)}")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: mismatch {list(a.shape)} vs {list(b.shape)}")
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def split_channels(x: Tensor, c1: int) -> tuple[Tensor, Tensor]:
    """Inverse of ``concat_channels``: the first ``c1`` channels and the rest."""
    c = x.shape[1]
    if not 0 <= c1 <= c:
        raise ShapeError(f"split_channels: cannot split {c} channels at {c1}")

    def part(lo, hi):
        def grad(g):
            full = np.zeros(x.shape, dtype=DTYPE)
            full[:, lo:hi] = g
            return (full,)

        return record("split", (x,), x.data[:, lo:hi].copy(), grad)

    return part(0, c1), part(c1, c)

"""N-dimensional float64 tensors with tape-based reverse-mode differentiation.

Operations are plain functions over :class:`Tensor`. When a :class:`Tape` is
active and at least one input is tracked (``requires_grad`` or already on the
tape), the operation appends a record holding its backward rule. Records are
appended in execution order, so the tape is topologically sorted by
construction and :func:`backward` is a single reverse sweep.

Example:
    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape():
    ...     loss = (x * x).sum()
    >>> backward(loss)[x].data
    array([[2., 4.]])
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from gcvit.errors import ContractError, DimensionError, NonFiniteError

DTYPE = np.float64

_state = threading.local()


def _tapes() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _counters() -> list:
    if not hasattr(_state, "counters"):
        _state.counters = []
    return _state.counters


# --------------------------------------------------------------------------- #
# Core types
# --------------------------------------------------------------------------- #


class Tensor:
    """Dense row-major float64 array with an optional handle into a tape."""

    __slots__ = ("data", "requires_grad", "node", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True, order="C")
        if any(n < 1 for n in arr.shape):
            raise DimensionError(f"every extent must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no-copy constructor for op outputs
        t = cls.__new__(cls)
        a = np.asarray(arr, dtype=DTYPE)
        t.data = a if a.flags.c_contiguous else a.copy(order="C")  # keeps 0-d scalars 0-d
        t.requires_grad = False
        t.node = None
        t.tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return permute(self, axes)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=DTYPE))


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Append-only log of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded when any of their inputs is tracked.
    """

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes().pop()

    def __len__(self) -> int:
        return len(self.records)

    def _append(self, rec: Record) -> int:
        self.records.append(rec)
        return len(self.records) - 1


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, bw) -> Tensor:
    result = Tensor._wrap(out)
    tapes = _tapes()
    if tapes and any(t.tracked for t in inputs):
        tape = tapes[-1]
        result.node = tape._append(Record(op, tuple(inputs), result, bw))
        result.tape = tape
    return result


# --------------------------------------------------------------------------- #
# MAC instrumentation
# --------------------------------------------------------------------------- #


@dataclass
class MacCounter:
    """Tally of multiply-accumulates executed by matmul and conv2d."""

    total: int = 0
    by_op: dict[str, int] = field(default_factory=dict)

    def add(self, op: str, macs: int) -> None:
        self.total += macs
        self.by_op[op] = self.by_op.get(op, 0) + macs


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    _counters().append(counter)
    try:
        yield counter
    finally:
        _counters().pop()


def _tally(op: str, macs: int) -> None:
    for c in _counters():
        c.add(op, int(macs))


# --------------------------------------------------------------------------- #
# Backward
# --------------------------------------------------------------------------- #


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Reverse sweep over the tape that produced ``loss``.

    Args:
        loss: Scalar tensor recorded on an active or exited tape.
        wrt: Tensors whose gradients are wanted. May include intermediate
            results. Defaults to every ``requires_grad`` leaf on the tape.

    Returns:
        Mapping from tensor to its gradient. Requested tensors that the loss
        does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.tape is None:
        raise ContractError("loss was not produced on a tape")
    tape = loss.tape

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records[: loss.node + 1]):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.tracked:
                continue
            if t.node is None:
                leaves[id(t)] = t
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi

    targets = list(leaves.values()) if wrt is None else list(wrt)
    out: dict[Tensor, Tensor] = {}
    for t in targets:
        g = grads.get(id(t))
        out[t] = Tensor._wrap(np.zeros_like(t.data) if g is None else g.reshape(t.shape))
    return out


# --------------------------------------------------------------------------- #
# Elementwise and reductions
# --------------------------------------------------------------------------- #


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("log", (x,), np.log(xd), lambda g: (g / xd,))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), np.asarray(out), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return _emit("gelu", (x,), xd * cdf, lambda g: (g * (cdf + xd * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), y, bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _emit("log_softmax", (x,), out,
                 lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 0 or labels.max() >= K:
        raise ContractError(f"labels must lie in [0, {K}), got {labels.tolist()}")
    onehot = np.zeros((B, K))
    onehot[np.arange(B), labels] = 1.0
    return mul(sum_(mul(log_softmax(logits), Tensor._wrap(onehot))), -1.0 / B)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {C}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = np.sum(g * xhat, axis=lead)
        dbeta = np.sum(g, axis=lead)
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _emit("layer_norm", (x, gamma, beta), out, bw)


def check_finite(x: Tensor, where: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"non-finite values in {where}")
    return x


# --------------------------------------------------------------------------- #
# Linear algebra
# --------------------------------------------------------------------------- #


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes with broadcast leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    _tally("matmul", out.size * a.shape[-1])

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` laid out as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear expects last dim {weight.shape[0]}, got shape {x.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (axis 0) at integer ``index``; gradients scatter-add."""
    index = np.asarray(index, dtype=np.int64)
    shape = table.shape
    out = table.data[index]

    def bw(g):
        gt = np.zeros(shape)
        np.add.at(gt, index, g)
        return (gt,)

    return _emit("take", (table,), out, bw)


# --------------------------------------------------------------------------- #
# Layout
# --------------------------------------------------------------------------- #


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} ({x.size} elements) into {shape}")
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) % max(x.ndim, 1) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permutation {axes} is invalid for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _emit("permute", (x,), np.transpose(x.data, axes),
                 lambda g: (np.transpose(g, inv),))


def repeat(x: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat each slice along ``axis`` ``repeats`` times (``np.repeat`` order)."""
    axis = axis % x.ndim
    n = x.shape[axis]
    out = np.repeat(x.data, repeats, axis=axis)

    def bw(g):
        split = g.shape[:axis] + (n, repeats) + g.shape[axis + 1:]
        return (g.reshape(split).sum(axis=axis + 1),)

    return _emit("repeat", (x,), out, bw)


def slice_(x: Tensor, key) -> Tensor:
    shape = x.shape
    out = x.data[key]
    if any(n == 0 for n in out.shape):
        raise DimensionError(f"slice {key!r} of shape {shape} is empty")

    def bw(g):
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)

    return _emit("slice", (x,), np.array(out), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    nd = xs[0].ndim
    axis = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or any(t.shape[i] != xs[0].shape[i] for i in range(nd) if i != axis):
            raise DimensionError(
                f"concat shapes disagree off axis {axis}: {[u.shape for u in xs]}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(xs), out, bw)


# --------------------------------------------------------------------------- #
# Convolution and pooling
# --------------------------------------------------------------------------- #


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _scatter_windows(d: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    # d: (B, C, kh, kw, Ho, Wo) -> padded-input gradient, fixed (i, j) order
    B, C, kh, kw, ho, wo = d.shape
    out = np.zeros((B, C, hp, wp))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding and channel groups.

    Args:
        x: Input of shape (B, Cin, H, W).
        w: Kernel of shape (Cout, Cin // groups, kh, kw).
        bias: Optional per-output-channel offset of shape (Cout,).
        stride: Step between window origins along both axes.
        padding: Zero rows/columns added on every border.
        groups: Number of channel groups; ``groups == Cin`` is depth-wise.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D input and kernel, got {x.shape} and {w.shape}")
    B, cin, H, W = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin % groups or cout % groups:
        raise DimensionError(f"channels {cin}->{cout} not divisible by groups={groups}")
    if cin // groups != cin_g:
        raise DimensionError(f"kernel {w.shape} expects {cin_g * groups} input channels, got {cin}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise DimensionError(f"kernel {kh}x{kw} does not fit padded input {H}x{W} (pad {padding})")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match {cout} output channels")
    ho, wo = _out_extent(H, kh, stride, padding), _out_extent(W, kw, stride, padding)
    g, cout_g = groups, cout // groups
    K = cin_g * kh * kw

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, kh, kw, stride, ho, wo)
    cols = (win.reshape(B, g, cin_g, ho, wo, kh, kw)
            .transpose(0, 1, 3, 4, 2, 5, 6).reshape(B, g, ho * wo, K))
    wm = w.data.reshape(g, cout_g, K)
    out = np.matmul(cols, wm.transpose(0, 2, 1))  # (B, g, HoWo, cout_g)
    out = out.transpose(0, 1, 3, 2).reshape(B, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    _tally("conv2d", cout * cin_g * kh * kw * ho * wo * B)

    hp, wp = xp.shape[2], xp.shape[3]

    def bw(gout):
        go = gout.reshape(B, g, cout_g, ho * wo)
        dcols = np.matmul(go.transpose(0, 1, 3, 2), wm)  # (B, g, HoWo, K)
        dw = np.matmul(cols.transpose(0, 1, 3, 2), go.transpose(0, 1, 3, 2)).sum(axis=0)
        dw = dw.transpose(0, 2, 1).reshape(w.shape)
        d = (dcols.reshape(B, g, ho, wo, cin_g, kh, kw)
             .transpose(0, 1, 4, 5, 6, 2, 3).reshape(B, cin, kh, kw, ho, wo))
        dxp = _scatter_windows(d, hp, wp, stride)
        dx = dxp[:, :, padding:padding + H, padding:padding + W]
        db = gout.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, dw, db

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit("conv2d", inputs, out, bw)


def maxpool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling with ``-inf`` padding; ties resolve to the first row-major cell."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d needs 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if H + 2 * padding < k or W + 2 * padding < k or padding > k // 2:
        raise DimensionError(f"pool window {k} does not fit input {H}x{W} with pad {padding}")
    ho, wo = _out_extent(H, k, stride, padding), _out_extent(W, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    flat = _windows(xp, k, k, stride, ho, wo).reshape(B, C, ho, wo, k * k)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    hp, wp = xp.shape[2], xp.shape[3]

    def bw(g):
        d = np.zeros((B, C, k, k, ho, wo))
        for i in range(k):
            for j in range(k):
                d[:, :, i, j] = g * (arg == i * k + j)
        dxp = _scatter_windows(d, hp, wp, stride)
        return (dxp[:, :, padding:padding + H, padding:padding + W],)

    return _emit("maxpool2d", (x,), out, bw)


# --------------------------------------------------------------------------- #
# Binary tensor blobs
# --------------------------------------------------------------------------- #

from gcvit.blob import read_blob, write_blob  # noqa: E402  (re-export)

__all__ = [
    "Tensor", "Tape", "Record", "MacCounter", "backward", "count_macs",
    "tensor", "zeros", "ones", "add", "sub", "mul", "div", "exp", "log",
    "sum_", "mean", "gelu", "sigmoid", "softmax", "log_softmax",
    "cross_entropy", "layer_norm", "check_finite", "matmul", "linear", "take",
    "reshape", "permute", "repeat", "slice_", "concat", "conv2d", "maxpool2d",
    "read_blob", "write_blob",
]

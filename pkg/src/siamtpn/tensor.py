"""Dense float64 tensors with a tape for reverse-mode differentiation.

Every op returns a new :class:`Tensor`; data is never mutated in place by
the ops themselves. When gradients are enabled and any input requires a
gradient, the op appends a node to the current thread's tape, and
:func:`backward` walks that tape in reverse.

Multiply-accumulate work in ``matmul``, ``conv2d``, pooling and
correlation is reported to every active :class:`OpCounter`, bucketed by
the tag set with :func:`op_tag`.
"""
from __future__ import annotations

import contextlib
import threading
from collections import defaultdict
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor", "OpCounter", "op_tag", "no_grad", "grad_enabled", "backward", "clear_tape",
    "tape_length", "record", "count_mul_adds",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "transpose", "reshape", "flatten",
    "concat", "index", "relu", "sigmoid", "exp", "log", "absolute", "minimum", "maximum",
    "sum", "mean", "softmax", "log_softmax", "layer_norm", "linear", "avg_pool2d",
    "max_pool2d", "conv2d", "upsample_nearest",
]

_local = threading.local()


def _state():
    st = _local.__dict__
    if "tape" not in st:
        st["tape"] = []
        st["grad_enabled"] = True
        st["counters"] = []
        st["tag"] = "other"
    return _local


class Tensor:
    """n-d array of float64 values with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- tape


@contextlib.contextmanager
def no_grad():
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def grad_enabled() -> bool:
    return _state().grad_enabled


def tape_length() -> int:
    return len(_state().tape)


def clear_tape() -> None:
    st = _state()
    for out, _, _ in st.tape:
        out.tape_id = None
    st.tape.clear()


def record(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str = "op") -> Tensor:
    """Wrap ``data`` as the output of an op and put it on the tape when needed.

    ``grad_fn(g)`` receives the gradient w.r.t. the output and returns one
    gradient array (or None) per parent, in order.
    """
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.tape_id = None
    out.name = None
    st = _state()
    if st.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.tape_id = len(st.tape)
        st.tape.append((out, tuple(parents), grad_fn))
    return out


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` on every tape ancestor of the scalar ``loss``; clears the tape.

    Gradients accumulate into leaves that already hold one.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape_id is None:
        raise ValueError("loss is not on the tape (computed under no_grad or without parameters)")
    st = _state()
    tape = st.tape
    loss.grad = np.ones_like(loss.data)
    try:
        for out, parents, fn in reversed(tape[: loss.tape_id + 1]):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if g.shape != p.data.shape:
                    g = np.broadcast_to(g, p.data.shape)
                p.grad = np.array(g, dtype=np.float64) if p.grad is None else p.grad + g
    finally:
        clear_tape()


# ---------------------------------------------------------------- counting


class OpCounter:
    """Counts scalar multiply-accumulates while active (``with OpCounter() as c``)."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.mul_adds = 0
        self.by_tag: dict[str, int] = defaultdict(int)

    def add(self, n: int, tag: str) -> None:
        if self.enabled:
            self.mul_adds += int(n)
            self.by_tag[tag] += int(n)

    def reset(self) -> None:
        self.mul_adds = 0
        self.by_tag = defaultdict(int)

    def tagged(self, *tags: str) -> int:
        return int(np.sum([self.by_tag.get(t, 0) for t in tags], dtype=np.int64))

    def __enter__(self) -> "OpCounter":
        _state().counters.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().counters.remove(self)


@contextlib.contextmanager
def op_tag(tag: str):
    st = _state()
    prev = st.tag
    st.tag = tag
    try:
        yield
    finally:
        st.tag = prev


def count_mul_adds(n: int) -> None:
    st = _state()
    for c in st.counters:
        c.add(n, st.tag)


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product (numpy broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return record(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return record(
        out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)), "div",
    )


def neg(x: Tensor) -> Tensor:
    return record(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return record(x.data * s, (x,), lambda g: (g * s,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    d = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(d)
    return record(out, (x,), lambda g: (g / d,), "log")


def absolute(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return record(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return record(
        out, (a, b),
        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)), "minimum",
    )


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return record(
        out, (a, b),
        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)), "maximum",
    )


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    if out.size != x.size:
        raise ShapeError(f"cannot reshape {src} to {shape}")
    return record(out, (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse all leading axes: (h, w, c) -> (h*w, c)."""
    return reshape(x, (-1, x.shape[-1]))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return record(
        np.concatenate([t.data for t in xs], axis=axis), xs,
        lambda g: tuple(np.split(g, cuts, axis=axis)), "concat",
    )


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    src = x.shape

    def grad_fn(g):
        gx = np.zeros(src)
        np.add.at(gx, key, g)
        return (gx,)

    return record(np.array(x.data[key], dtype=np.float64), (x,), grad_fn, "index")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64), (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d product (m,k)@(k,n), or batched (B,m,k)@(B,k,n). Counts B*m*n*k."""
    if a.ndim not in (2, 3) or a.ndim != b.ndim:
        raise ShapeError(f"matmul expects two 2-d or two 3-d tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    batch = a.shape[0] if a.ndim == 3 else 1
    m, k = a.shape[-2:]
    n = b.shape[-1]
    count_mul_adds(batch * m * n * k)
    ad, bd = a.data, b.data
    return record(
        ad @ bd, (a, b),
        lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g), "matmul",
    )


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (n, in) @ w (in, out) [+ b (out,)]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalization


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return record(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return record(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine pair."""
    d = x.data
    n = d.shape[-1]
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = None if gamma is None else gamma.data
    out = xhat if gd is None else xhat * gd
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]
    lead = tuple(range(d.ndim - 1))

    def grad_fn(g):
        dxhat = g if gd is None else g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return record(out, parents, grad_fn, "layer_norm")


# ---------------------------------------------------------------- spatial ops (h, w, c layout)


def _pool_geometry(h: int, w: int, r: int):
    oh, ow = -(-h // r), -(-w // r)
    rows = np.minimum(r, h - np.arange(oh) * r)
    cols = np.minimum(r, w - np.arange(ow) * r)
    return oh, ow, np.outer(rows, cols).astype(np.float64)[:, :, None]


def avg_pool2d(x: Tensor, r: int) -> Tensor:
    """Ceil-mode average pooling with kernel = stride = r; ragged windows average valid cells only."""
    r = int(r)
    if r < 1:
        raise ValueError(f"pooling ratio must be >= 1, got {r}")
    h, w, c = x.shape
    count_mul_adds(h * w * c)
    if r == 1:
        return record(x.data.copy(), (x,), lambda g: (g,), "avg_pool2d")
    oh, ow, counts = _pool_geometry(h, w, r)
    padded = np.zeros((oh * r, ow * r, c))
    padded[:h, :w] = x.data
    out = padded.reshape(oh, r, ow, r, c).sum(axis=(1, 3)) / counts

    def grad_fn(g):
        gs = (g / counts)
        full = np.repeat(np.repeat(gs, r, axis=0), r, axis=1)
        return (full[:h, :w],)

    return record(out, (x,), grad_fn, "avg_pool2d")


def max_pool2d(x: Tensor, r: int) -> Tensor:
    """Ceil-mode max pooling with kernel = stride = r."""
    r = int(r)
    if r < 1:
        raise ValueError(f"pooling ratio must be >= 1, got {r}")
    h, w, c = x.shape
    count_mul_adds(h * w * c)
    if r == 1:
        return record(x.data.copy(), (x,), lambda g: (g,), "max_pool2d")
    oh, ow = -(-h // r), -(-w // r)
    padded = np.full((oh * r, ow * r, c), -np.inf)
    padded[:h, :w] = x.data
    blocks = padded.reshape(oh, r, ow, r, c).transpose(0, 2, 4, 1, 3).reshape(oh, ow, c, r * r)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gb = np.zeros((oh, ow, c, r * r))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        full = gb.reshape(oh, ow, c, r, r).transpose(0, 3, 1, 4, 2).reshape(oh * r, ow * r, c)
        return (full[:h, :w],)

    return record(out, (x,), grad_fn, "max_pool2d")


def _pad_index(n: int, p: int, mode: str) -> np.ndarray:
    idx = np.arange(-p, n + p)
    if mode == "edge":
        return np.clip(idx, 0, n - 1)
    return idx


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    padding_mode: str = "zeros",
) -> Tensor:
    """Cross-correlation of an (h, w, c_in) map with a (k_h, k_w, c_in, c_out) kernel.

    ``padding_mode`` is ``"zeros"`` or ``"edge"`` (replicate border values).
    """
    if x.ndim != 3 or weight.ndim != 4 or x.shape[2] != weight.shape[2]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {weight.shape}")
    if padding_mode not in ("zeros", "edge"):
        raise ValueError(f"unknown padding mode {padding_mode!r}")
    h, w, cin = x.shape
    kh, kw, _, cout = weight.shape
    p, s = int(padding), int(stride)
    if h + 2 * p < kh or w + 2 * p < kw:
        raise ShapeError(f"kernel {kh}x{kw} does not fit padded input {h + 2 * p}x{w + 2 * p}")
    oh = (h + 2 * p - kh) // s + 1
    ow = (w + 2 * p - kw) // s + 1
    count_mul_adds(oh * ow * cout * kh * kw * cin)

    if p:
        xp = np.pad(x.data, ((p, p), (p, p), (0, 0)), mode="constant" if padding_mode == "zeros" else "edge")
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[: (oh - 1) * s + 1: s, : (ow - 1) * s + 1: s]
    # win: (oh, ow, cin, kh, kw) -> cols: (oh*ow, kh*kw*cin) in kernel memory order
    cols = win.transpose(0, 1, 3, 4, 2).reshape(oh * ow, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(oh, ow, cout)
    if bias is not None:
        out = out + bias.data
    parents = [x, weight] + ([bias] if bias is not None else [])

    def grad_fn(g):
        g2 = g.reshape(oh * ow, cout)
        gw = (cols.T @ g2).reshape(kh, kw, cin, cout)
        gcols = (g2 @ wmat.T).reshape(oh, ow, kh, kw, cin)
        gxp = np.zeros(xp.shape)
        for a in range(kh):
            for b in range(kw):
                gxp[a: a + (oh - 1) * s + 1: s, b: b + (ow - 1) * s + 1: s] += gcols[:, :, a, b]
        if p == 0:
            gx = gxp
        elif padding_mode == "zeros":
            gx = gxp[p: p + h, p: p + w]
        else:
            gx = np.zeros((h, xp.shape[1], cin))
            np.add.at(gx, _pad_index(h, p, "edge"), gxp)
            gx2 = np.zeros((h, w, cin))
            np.add.at(gx2, (slice(None), _pad_index(w, p, "edge")), gx)
            gx = gx2
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return record(out, parents, grad_fn, "conv2d")


def upsample_nearest(x: Tensor, factor: int, out_hw: tuple[int, int] | None = None) -> Tensor:
    """Nearest-neighbour upsampling of an (h, w, c) map, optionally cropped to ``out_hw``."""
    h, w, _ = x.shape
    f = int(factor)
    th, tw = out_hw if out_hw is not None else (h * f, w * f)
    rows = np.minimum(np.arange(th) // f, h - 1)
    cols = np.minimum(np.arange(tw) // f, w - 1)
    out = x.data[rows][:, cols]

    def grad_fn(g):
        gr = np.zeros((h, tw, g.shape[2]))
        np.add.at(gr, rows, g)
        gx = np.zeros(x.shape)
        np.add.at(gx, (slice(None), cols), gr)
        return (gx,)

    return record(out, (x,), grad_fn, "upsample_nearest")

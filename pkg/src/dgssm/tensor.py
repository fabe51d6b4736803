"""Dense tensors with tape-based reverse-mode differentiation.

Every op materializes its output as a fresh numpy array. Gradients are only
recorded while a :class:`Tape` is active on the current thread, so inference
code pays nothing for the bookkeeping::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).sum()
        tape.backward(loss)
    w.grad  # dloss/dw

Convolution is cross-correlation (the kernel is not flipped).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "TapeError",
    "tensor", "make_op", "active_tape", "no_tape",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt", "absolute",
    "tanh", "sigmoid", "relu", "clamp", "matmul", "conv2d", "reduce", "sum_", "mean",
    "amax", "reshape", "transpose", "concat", "flip", "pad", "avg_pool2d",
    "upsample_nearest", "resize_nearest", "getitem", "detach", "l2_normalize",
    "save_tensor", "load_tensor", "write_tensor", "read_tensor",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


class no_tape:
    """Temporarily suspend recording on this thread."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


@dataclass
class _Op:
    parents: tuple
    out: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    A tape is confined to the thread that entered it. ``backward`` may be
    called once; afterwards the tape is cleared and cannot be reused.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self.executed = 0
        self._consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        st = _stack()
        if st and st[-1] is self:
            st.pop()
        return False

    def __len__(self):
        return len(self.ops)

    def record(self, op: _Op) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by backward()")
        self.ops.append(op)

    def backward(self, loss: "Tensor", sink: "dict[int, np.ndarray] | None" = None) -> int:
        """Propagate d(loss)/d(.) to every requires_grad leaf; return #rules run.

        Leaf gradients accumulate into ``.grad`` unless ``sink`` is given, in
        which case they are stored there keyed by ``id(leaf)`` and the leaves
        are left untouched (needed when several threads share parameters).
        """
        if self._consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(op.out) for op in self.ops}
        executed = 0
        for op in reversed(self.ops):
            g = grads.pop(id(op.out), None)
            if g is None:
                continue
            executed += 1
            pgrads = op.backward(g)
            for parent, pg in zip(op.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeError(
                        f"gradient shape {pg.shape} != parent shape {parent.data.shape}"
                    )
                key = id(parent)
                if key in produced:
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
                elif sink is not None:
                    prev = sink.get(key)
                    sink[key] = pg.copy() if prev is None else prev + pg
                else:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        self.executed = executed
        self.ops = []
        self._consumed = True
        return executed


class Tensor:
    """N-d real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> int:
        if self._tape is None:
            raise TapeError("tensor was not produced on an active tape")
        return self._tape.backward(self)

    # -- operators -------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return absolute(self)

    def detach(self):
        return detach(self)


def tensor(data, requires_grad: bool = False, dtype=np.float64, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(out: np.ndarray, parents: Iterable[Tensor],
            backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out`` as a Tensor and record ``backward`` when a tape is active.

    ``backward`` receives dL/d(out) and returns one gradient (or None) per parent.
    """
    out = np.asarray(out)
    # one reduction is much cheaper than an elementwise mask; only a sum that
    # overflows needs the exact check
    if not np.isfinite(np.add.reduce(out, axis=None)) and not np.isfinite(out).all():
        raise NonFiniteError("non-finite values produced by tensor op")
    parents = tuple(parents)
    t = Tensor(out)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._tape = tape
        tape.record(_Op(parents, t, backward))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _bshape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from e


# -- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _bshape(a, b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _bshape(a, b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _bshape(a, b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _bshape(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), bw)


# -- elementwise unary -----------------------------------------------------

def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return make_op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a: Tensor) -> Tensor:
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient is passed only where the input was inside."""
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return make_op(out, (a,), lambda g: (g * inside,))


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_op(out, (a, b), bw)


def _mm(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(O, C) @ (N, C, L); outer products go through broadcasting, which is far faster."""
    if m.shape[1] == 1:
        return m[None] * x
    return np.matmul(m, x)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlate ``x`` (C,H,W) or (N,C,H,W) with ``kernel`` (O,C,kh,kw)."""
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects (N,C,H,W) input and 4-d kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"kernel expects {ck} input channels, input has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("kernel sizes must be odd")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    s = int(stride)
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kd = kernel.data

    if kh == 1 and kw == 1:
        xs = xd[:, :, ::s, ::s][:, :, :ho, :wo]
        out = np.matmul(kd[:, :, 0, 0], xs.reshape(n, c, ho * wo)).reshape(n, o, ho, wo)
    elif s == 1:
        # shifted matmuls over the row-flattened padded image; output is
        # computed on an (ho, wp) grid whose last wp - wo columns are dropped
        ext = ho * wp
        xf = np.zeros((n, c, hp * wp + kw - 1), dtype=xd.dtype)
        xf[:, :, :hp * wp] = xd.reshape(n, c, hp * wp)
        offsets = [(i, j, i * wp + j) for i in range(kh) for j in range(kw)]
        kt = np.ascontiguousarray(kd.transpose(2, 3, 0, 1))
        acc = np.zeros((n, o, ext), dtype=np.result_type(xd, kd))
        for i, j, off in offsets:
            acc += _mm(kt[i, j], xf[:, :, off:off + ext])
        out = acc.reshape(n, o, ho, wp)[:, :, :, :wo]
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    parents = (x, kernel)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents = parents + (bias,)

    def bw(g):
        gx = gk = gb = None
        if kh == 1 and kw == 1:
            g2 = g.reshape(n, o, ho * wo)
            if kernel.requires_grad:
                xs2 = xs.reshape(n, c, ho * wo)
                gk = np.matmul(g2, xs2.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
            if x.requires_grad:
                gxs = np.matmul(kd[:, :, 0, 0].T, g2).reshape(n, c, ho, wo)
                if s == 1 and not padding:
                    gx = gxs
                else:
                    gxp = np.zeros(xd.shape, dtype=g.dtype)
                    gxp[:, :, ::s, ::s][:, :, :ho, :wo] = gxs
                    gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        elif s == 1:
            ge = np.zeros((n, o, ho, wp), dtype=g.dtype)
            ge[:, :, :, :wo] = g
            ge = ge.reshape(n, o, ext)
            if kernel.requires_grad:
                gk = np.zeros(kd.shape, dtype=g.dtype)
                for i, j, off in offsets:
                    xs_t = xf[:, :, off:off + ext].transpose(0, 2, 1)
                    gk[:, :, i, j] = np.matmul(ge, xs_t).sum(axis=0)
            if x.requires_grad:
                gxf = np.zeros(xf.shape, dtype=g.dtype)
                ktt = np.ascontiguousarray(kd.transpose(2, 3, 1, 0))
                for i, j, off in offsets:
                    gxf[:, :, off:off + ext] += _mm(ktt[i, j], ge)
                gxp = gxf[:, :, :hp * wp].reshape(n, c, hp, wp)
                gx = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w])
        else:
            if kernel.requires_grad:
                gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                gxp = np.zeros(xd.shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        contrib = np.einsum("nohw,oc->nchw", g, kd[:, :, i, j], optimize=True)
                        gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    y = make_op(out, parents, bw)
    return reshape(y, y.shape[1:]) if squeeze else y


# -- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    if x.size == 0 or any(x.shape[a] == 0 for a in axes):
        raise ShapeError("empty reduction")
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=True)
        bw = lambda g: (np.broadcast_to(g, x.shape).copy(),)
    elif kind == "mean":
        out = x.data.mean(axis=axes, keepdims=True)
        bw = lambda g: (np.broadcast_to(g / count, x.shape).copy(),)
    elif kind == "max":
        out = x.data.max(axis=axes, keepdims=True)
        mask = x.data == out
        ties = mask.sum(axis=axes, keepdims=True)
        bw = lambda g: (g * mask / ties,)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    y = make_op(out, (x,), bw)
    if keepdims:
        return y
    return reshape(y, tuple(d for i, d in enumerate(x.shape) if i not in axes))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("sum", x, axis, keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", x, axis, keepdims)


def amax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("max", x, axis, keepdims)


# -- shape manipulation ----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape).copy()
    return make_op(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = np.argsort(axes) if axes is not None else None
    return make_op(out, (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat of empty list")
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat shape mismatch {t.shape} vs {ref} on axis {ax}")
    out = np.concatenate([t.data for t in xs], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def bw(g):
        res = []
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            res.append(np.ascontiguousarray(g[tuple(sl)]) if t.requires_grad else None)
        return res

    return make_op(out, xs, bw)


def flip(x: Tensor, axis: int) -> Tensor:
    out = np.ascontiguousarray(np.flip(x.data, axis))
    return make_op(out, (x,), lambda g: (np.ascontiguousarray(np.flip(g, axis)),))


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx])

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        if _is_advanced(idx):
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        return (gx,)

    return make_op(out, (x,), bw)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def pad(x: Tensor, width: int, mode: str = "constant") -> Tensor:
    """Pad the last two axes by ``width`` with zeros or edge replication."""
    p = int(width)
    if p == 0:
        return x
    spec = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    if mode == "constant":
        out = np.pad(x.data, spec)

        def bw(g):
            return (np.ascontiguousarray(g[..., p:-p, p:-p]),)
    elif mode == "replicate":
        h, w = x.shape[-2:]
        ih = np.clip(np.arange(-p, h + p), 0, h - 1)
        iw = np.clip(np.arange(-p, w + p), 0, w - 1)
        out = x.data[..., ih, :][..., iw]

        def bw(g):
            gh = np.zeros(g.shape[:-2] + (h, g.shape[-1]), dtype=g.dtype)
            np.add.at(gh, (Ellipsis, ih, slice(None)), g)
            gx = np.zeros(x.shape, dtype=g.dtype)
            np.add.at(gx, (Ellipsis, iw), gh)
            return (gx,)
    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    return make_op(out, (x,), bw)


def _repeat2d(a: np.ndarray, f: int) -> np.ndarray:
    lead, (h, w) = a.shape[:-2], a.shape[-2:]
    tiled = np.broadcast_to(a[..., :, None, :, None], lead + (h, f, w, f))
    return tiled.reshape(lead + (h * f, w * f))


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    f = int(factor)
    if f == 1:
        return x
    h, w = x.shape[-2:]
    if h % f or w % f:
        raise ShapeError(f"spatial dims {(h, w)} not divisible by pool factor {f}")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (h // f, f, w // f, f)).mean(axis=(-3, -1))

    def bw(g):
        return (_repeat2d(g * (1.0 / (f * f)), f),)

    return make_op(out, (x,), bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    f = int(factor)
    if f == 1:
        return x
    out = _repeat2d(x.data, f)
    h, w = x.shape[-2:]
    lead = x.shape[:-2]

    def bw(g):
        return (g.reshape(lead + (h, f, w, f)).sum(axis=(-3, -1)),)

    return make_op(out, (x,), bw)


def resize_nearest(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of the last two axes to ``size``."""
    h, w = x.shape[-2:]
    ho, wo = size
    if (ho, wo) == (h, w):
        return x
    if ho % h == 0 and wo % w == 0 and ho // h == wo // w:
        return upsample_nearest(x, ho // h)
    ih = (np.arange(ho) * h) // ho
    iw = (np.arange(wo) * w) // wo
    out = x.data[..., ih, :][..., iw]

    def bw(g):
        gh = np.zeros(g.shape[:-2] + (h, wo), dtype=g.dtype)
        np.add.at(gh, (Ellipsis, ih, slice(None)), g)
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (Ellipsis, iw), gh)
        return (gx,)

    return make_op(out, (x,), bw)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(sum_(x * x, axis=axis, keepdims=True) + eps)
    return x / norm


# -- serialization ---------------------------------------------------------
# TNSR v1 <ndim> <d0> <d1> ...\n followed by little-endian float32 payload.

def write_tensor(fh, x) -> None:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    header = "TNSR v1 " + " ".join(str(d) for d in (arr.ndim,) + arr.shape) + "\n"
    fh.write(header.encode("ascii"))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fh, dtype=np.float64) -> Tensor:
    line = fh.readline().decode("ascii").split()
    if len(line) < 3 or line[0] != "TNSR" or line[1] != "v1":
        raise ValueError(f"bad tensor header: {' '.join(line)!r}")
    ndim = int(line[2])
    shape = tuple(int(d) for d in line[3:3 + ndim])
    if len(shape) != ndim:
        raise ValueError("tensor header shape does not match ndim")
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(dtype)
    return Tensor(arr)


def save_tensor(path, x) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, x)


def load_tensor(path, dtype=np.float64) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh, dtype)

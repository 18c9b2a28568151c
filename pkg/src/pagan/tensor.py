"""Minimal define-by-run reverse-mode autodiff over dense numpy arrays.

Operations executed inside an active :class:`Tape` whose inputs require
gradients append a record to that tape.  Outside any tape, operations are
plain numpy computations and their results are detached.

    with Tape() as tape:
        y = (x * x).sum()
    grads = tape.backward(y)
    grads.array(x)
"""

from __future__ import annotations

import itertools
import threading
from collections.abc import Mapping
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DomainError",
    "NoGradientError",
    "Tensor",
    "Tape",
    "Gradients",
    "as_tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "conv2d",
    "conv_transpose2d",
    "leaky_relu",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softplus",
    "log_sigmoid",
    "softmax",
    "log_softmax",
    "clip",
    "sum",
    "mean",
    "reshape",
    "crop",
    "concat",
    "reflect_pad",
    "reflect_indices",
    "row_norm",
    "forward_op",
]

DEFAULT_DTYPE = np.float32

_node_ids = itertools.count(1)
_state = threading.local()


class DomainError(ArithmeticError):
    """An operation was evaluated outside the domain of its function."""


class NoGradientError(RuntimeError):
    """backward() was asked for a root that is not on any tape."""


class Record(NamedTuple):
    kind: str
    input_ids: tuple
    output_id: int
    vjp: Callable


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "node_id", "tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids) if requires_grad else None
        self.tape = None

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)
    dtype = property(lambda self: self.data.dtype)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return crop(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Gradients(Mapping):
    """Result of a backward pass: node id -> gradient Tensor."""

    def __init__(self, arrays):
        self._arrays = arrays

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return Tensor(self._arrays[key])

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return key in self._arrays

    def array(self, tensor):
        """Gradient of ``tensor`` as an ndarray; zeros when unreachable."""
        g = self._arrays.get(tensor.node_id)
        if g is None:
            return np.zeros_like(tensor.data)
        return g


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.records = []
        self._outputs = set()

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def _append(self, kind, inputs, out, vjp):
        out.node_id = next(_node_ids)
        out.requires_grad = True
        out.tape = self
        ids = tuple(t.node_id if t.requires_grad else None for t in inputs)
        self.records.append(Record(kind, ids, out.node_id, vjp))
        self._outputs.add(out.node_id)

    def backward(self, root):
        if root.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        if root.node_id is None:
            raise NoGradientError("root does not require grad (detached)")
        if root.tape is not None and root.tape is not self:
            raise NoGradientError("root was recorded on a different tape")
        grads = {root.node_id: np.ones_like(root.data)}
        if root.node_id not in self._outputs:
            return Gradients(grads)
        for rec in reversed(self.records):
            g = grads.get(rec.output_id)
            if g is None:
                continue
            for node, gi in zip(rec.input_ids, rec.vjp(g)):
                if node is None or gi is None:
                    continue
                prev = grads.get(node)
                grads[node] = gi if prev is None else prev + gi
        return Gradients(grads)


def backward(root):
    """Gradients of the scalar ``root`` with respect to every tracked ancestor."""
    if root.node_id is None:
        raise NoGradientError("root does not require grad (detached)")
    if root.tape is None:
        if root.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        return Gradients({root.node_id: np.ones_like(root.data)})
    return root.tape.backward(root)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _emit(kind, data, inputs, vjp):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._append(kind, inputs, out, vjp)
    return out


def _broadcast_ok(a, b):
    if a == b or len(a) == 0 or len(b) == 0:
        return True
    if int(np.prod(a)) == 1 or int(np.prod(b)) == 1:
        return True
    short, full = (a, b) if len(a) <= len(b) else (b, a)
    return full[len(full) - len(short):] == short


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_inputs(a, b, kind):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    if not _broadcast_ok(a.shape, b.shape):
        raise ValueError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def add(a, b):
    a, b = _binary_inputs(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _binary_inputs(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _binary_inputs(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _binary_inputs(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError(f"div (node {_peek_id()}): division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a):
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def _peek_id():
    # id the next recorded op would receive; used only in error messages
    return f"~{next(_node_ids)}"


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


# --- convolution -----------------------------------------------------------

def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _windows(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_forward(x, w, stride, pad):
    # x: N,C,H,W  w: O,C,kh,kw -> N,O,Ho,Wo
    win = _windows(x, w.shape[2], w.shape[3], stride, pad)
    out = np.einsum("nchwij,ocij->nohw", win, w, optimize=True)
    return np.ascontiguousarray(out)


def _conv_grad_weight(x, g, wshape, stride, pad):
    win = _windows(x, wshape[2], wshape[3], stride, pad)
    return np.einsum("nchwij,nohw->ocij", win, g, optimize=True)


def _conv_grad_input(g, w, xshape, stride, pad):
    n, c, h, wd = xshape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = g.shape[2], g.shape[3]
    cols = np.einsum("nohw,ocij->ncijhw", g, w, optimize=True)
    hp, wp = h + 2 * pad, wd + 2 * pad
    # transposed-conv output may need a margin when (h + 2p - k) % stride != 0
    dx = np.zeros((n, c, max(hp, (ho - 1) * stride + kh), max(wp, (wo - 1) * stride + kw)),
                  dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return dx[:, :, pad:pad + h, pad:pad + wd]


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation, NCHW input, OIHW weights, zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if _conv_out(x.shape[2], w.shape[2], stride, padding) < 1 or \
            _conv_out(x.shape[3], w.shape[3], stride, padding) < 1:
        raise ValueError(f"conv2d: kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    xd, wd = x.data, w.data
    out = _conv_forward(xd, wd, stride, padding)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data[None, :, None, None]
        inputs = (x, w, b)
    need_x, need_w = x.requires_grad, w.requires_grad

    def vjp(g):
        gx = _conv_grad_input(g, wd, xd.shape, stride, padding) if need_x else None
        gw = _conv_grad_weight(xd, g, wd.shape, stride, padding) if need_w else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit("conv2d", out, inputs, vjp)


def conv_transpose2d(x, w, b=None, stride=1, padding=0, output_padding=0):
    """Adjoint of :func:`conv2d` w.r.t. its input; weights are (C_in, C_out, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    oph, opw = (output_padding, output_padding) if np.isscalar(output_padding) else output_padding
    if stride < 1 or padding < 0 or not (0 <= oph < stride and 0 <= opw < stride):
        raise ValueError("conv_transpose2d: invalid stride/padding/output_padding")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose2d: incompatible shapes {x.shape} and {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    h = (x.shape[2] - 1) * stride - 2 * padding + kh + oph
    wd_ = (x.shape[3] - 1) * stride - 2 * padding + kw + opw
    if h < 1 or wd_ < 1:
        raise ValueError("conv_transpose2d: empty output")
    oshape = (x.shape[0], w.shape[1], h, wd_)
    xd, wdat = x.data, w.data
    out = _conv_grad_input(xd, wdat, oshape, stride, padding)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ValueError(f"conv_transpose2d: bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b.data[None, :, None, None]
        inputs = (x, w, b)
    need_x, need_w = x.requires_grad, w.requires_grad

    def vjp(g):
        gx = gw = None
        if need_x:
            gx = _conv_forward(g, wdat, stride, padding)[:, :, :xd.shape[2], :xd.shape[3]]
        if need_w:
            win = _windows(g, kh, kw, stride, padding)[:, :, :xd.shape[2], :xd.shape[3]]
            gw = np.einsum("nohwij,nchw->coij", win, xd, optimize=True)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit("conv_transpose2d", out, inputs, vjp)


# --- elementwise ------------------------------------------------------------

def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _emit("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def relu(x):
    return leaky_relu(x, 0.0)


def _stable_sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _emit("tanh", t, (x,), lambda g: (g * (1 - t * t),))


def exp(x):
    x = as_tensor(x)
    e = np.exp(x.data)
    return _emit("exp", e, (x,), lambda g: (g * e,))


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError(f"log (node {_peek_id()}): non-positive input, min={x.data.min()}")
    xd = x.data
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def softplus(x):
    """log(1 + exp(x)), computed without overflow."""
    x = as_tensor(x)
    xd = x.data
    out = np.logaddexp(0, xd).astype(xd.dtype)
    return _emit("softplus", out, (x,), lambda g: (g * _stable_sigmoid(xd),))


def log_sigmoid(x):
    return neg(softplus(neg(x)))


def softmax(x):
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", s, (x,),
                 lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(x):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    s = np.exp(out)
    return _emit("log_softmax", out, (x,),
                 lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def clip(x, lo, hi):
    x = as_tensor(x)
    inside = ((x.data >= lo) & (x.data <= hi)).astype(x.dtype)
    return _emit("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# --- reductions and shape ops ----------------------------------------------

def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if x.size == 0:
        raise ValueError("mean of an empty tensor")
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis, keepdims), np.asarray(1.0 / count, dtype=x.dtype))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def crop(x, key):
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return _emit("crop", np.array(x.data[key]), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors,
                 lambda g: tuple(np.split(g, bounds, axis=ax)))


def reflect_indices(n, pad):
    """Source index for each output position of a reflect-padded axis of length n."""
    if pad < 0 or (pad > 0 and pad >= n):
        raise ValueError(f"reflect pad {pad} must satisfy 0 <= pad < {n}")
    idx = np.arange(-pad, n + pad)
    idx = np.abs(idx)
    return np.where(idx > n - 1, 2 * (n - 1) - idx, idx)


def reflect_pad(image, pad):
    """Mirror-pad the last two axes by ``pad`` without repeating the edge."""
    image = as_tensor(image)
    if image.ndim < 2:
        raise ValueError("reflect_pad needs at least two axes")
    h, w = image.shape[-2:]
    if pad >= min(h, w) or pad < 0:
        raise ValueError(f"reflect_pad: pad {pad} must be in [0, {min(h, w)})")
    if pad == 0:
        return _emit("reflect_pad", image.data.copy(), (image,), lambda g: (g,))
    ih, iw = reflect_indices(h, pad), reflect_indices(w, pad)
    shape = image.shape

    def vjp(g):
        acc = np.zeros(shape[:-2] + (h, g.shape[-1]), dtype=g.dtype)
        np.add.at(acc, (Ellipsis, ih, slice(None)), g)
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (Ellipsis, iw), acc)
        return (out,)

    return _emit("reflect_pad", image.data[..., ih[:, None], iw[None, :]], (image,), vjp)


def row_norm(x):
    """Euclidean norm of each leading-axis slice; gradient 0 at the origin."""
    x = as_tensor(x)
    flat = x.data.reshape(x.shape[0], -1)
    n = np.sqrt((flat * flat).sum(axis=1))
    safe = np.where(n > 0, n, 1).astype(x.dtype)

    def vjp(g):
        scale = np.where(n > 0, g / safe, 0).astype(x.dtype)
        return ((flat * scale[:, None]).reshape(x.shape),)

    return _emit("row_norm", n.astype(x.dtype), (x,), vjp)


_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "matmul": matmul,
    "transpose": transpose, "conv2d": conv2d, "conv_transpose2d": conv_transpose2d,
    "leaky_relu": leaky_relu, "relu": relu, "sigmoid": sigmoid, "tanh": tanh,
    "exp": exp, "log": log, "softplus": softplus, "log_sigmoid": log_sigmoid,
    "softmax": softmax, "log_softmax": log_softmax, "clip": clip, "sum": sum,
    "mean": mean, "reshape": reshape, "crop": crop, "reflect_pad": reflect_pad,
    "row_norm": row_norm,
}


def forward_op(kind, inputs, **attrs):
    """Dispatch an operation by name; ``concat`` takes the whole input list."""
    if kind == "concat":
        return concat(inputs, **attrs)
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}") from None
    return fn(*inputs, **attrs)

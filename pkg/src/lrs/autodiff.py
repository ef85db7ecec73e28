"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations are recorded on an explicit :class:`Tape`.  Every backward rule is
itself written in terms of the differentiable primitives below, so gradients
returned with ``create_graph=True`` can be differentiated again (double
backprop).

Typical use::

    with Tape():
        x = Tensor(batch, requires_grad=True)
        loss = mean(softmax_cross_entropy(model(x), labels))
        (gx,) = grad(loss, [x])
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError", "ShapeError", "NonFiniteError", "Tape", "Tensor", "Parameter",
    "as_tensor", "no_record", "ensure_tape", "grad",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "transpose", "reshape",
    "flatten", "sum", "mean", "broadcast_to", "sum_to", "relu", "square", "sqrt",
    "softmax", "softmax_cross_entropy", "im2col", "col2im", "conv2d", "maxpool2",
    "sign",
]


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def _current_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class _Entry:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind, inputs, output, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive operations.

    Entries are appended in execution order, so the list is already a
    topological order.  A tape is single-threaded; concurrent experiments
    each need their own.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self.freed = False

    def __enter__(self) -> "Tape":
        if self.freed:
            raise AutodiffError("cannot re-enter a freed tape")
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, entry: _Entry) -> int:
        self.entries.append(entry)
        return len(self.entries) - 1

    def free(self) -> None:
        self.entries = []
        self.freed = True


@contextmanager
def no_record():
    """Run ops without recording them on any tape."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


@contextmanager
def ensure_tape():
    """Yield the active tape, opening a fresh one if none is active."""
    tape = _current_tape()
    if tape is not None:
        yield tape
        return
    with Tape() as tape:
        yield tape


@contextmanager
def _recording_on(tape: Tape):
    _stack().append(tape)
    try:
        yield
    finally:
        _stack().pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "_index", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None
        self._index: int | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        """Position of the producing entry on its tape, or None for leaves."""
        return self._index

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

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


class Parameter(Tensor):
    """A named trainable tensor; always requires grad."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)


def _emit(kind: str, data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) else np.asarray(data)
    out.requires_grad = False
    out._tape = None
    out._index = None
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        out._index = tape.record(_Entry(kind, inputs, out, backward))
    return out


# ---------------------------------------------------------------------------
# gradient driver


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    create_graph: bool = False,
    retain_graph: bool | None = None,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Return d(output)/d(input) for every input.

    With ``create_graph`` the returned gradients are recorded on the same tape
    and may be differentiated again.  Unless ``retain_graph`` (default: the
    value of ``create_graph``) the tape is freed afterwards.
    """
    if output.size != 1:
        raise ShapeError(f"grad: output must be a scalar, got shape {output.shape}")
    if retain_graph is None:
        retain_graph = create_graph
    inputs = list(inputs)
    tape = output._tape
    if tape is None:
        for t in inputs:
            if t is output:
                continue
            raise AutodiffError("grad: output was not recorded on a tape")
        return [Tensor(np.ones_like(output.data)) for _ in inputs]
    if tape.freed:
        raise AutodiffError("grad: the tape was already freed; pass retain_graph=True to the earlier call")

    stop = output._index
    entries = tape.entries[: stop + 1]

    wanted = {id(t) for t in inputs}
    relevant = set(wanted)
    for e in entries:
        if any(id(t) in relevant for t in e.inputs):
            relevant.add(id(e.output))
    if id(output) not in relevant:
        if not allow_unused:
            raise AutodiffError("grad: none of the inputs is on the tape path to the output")
        return [Tensor(np.zeros_like(t.data)) for t in inputs]

    ctx = _recording_on(tape) if create_graph else no_record()
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    with ctx:
        for e in reversed(entries):
            key = id(e.output)
            if key not in relevant or key not in grads:
                continue
            g = grads[key] if key in wanted else grads.pop(key)
            needs = tuple(id(t) in relevant for t in e.inputs)
            parts = e.backward(g, needs)
            for t, part, need in zip(e.inputs, parts, needs):
                if not need or part is None:
                    continue
                k = id(t)
                grads[k] = add(grads[k], part) if k in grads else part

    result = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            if not allow_unused:
                raise AutodiffError(f"grad: input {t!r} is not on the tape path to the output")
            g = Tensor(np.zeros_like(t.data))
        if not np.all(np.isfinite(g.data)):
            raise NonFiniteError("grad: non-finite gradient")
        result.append(g)
    if not retain_graph:
        tape.free()
    return result


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def backward(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return _emit("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def backward(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                neg(sum_to(g, b.shape)) if needs[1] else None)

    return _emit("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def backward(g, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return _emit("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)

    def backward(g, needs):
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if needs[1] else None
        return ga, gb

    return _emit("div", a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g, needs: (neg(g),))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a non-differentiable constant."""
    c = a.data.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g, needs: (scale(g, c),))


def square(a: Tensor) -> Tensor:
    return _emit("square", a.data * a.data, (a,), lambda g, needs: (mul(g, scale(a, 2.0)),))


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    holder = []

    def backward(g, needs):
        return (div(g, scale(holder[0], 2.0)),)

    out = _emit("sqrt", out_data, (a,), backward)
    holder.append(out)
    return out


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(x.dtype)
    return _emit("relu", np.maximum(x.data, 0), (x,), lambda g, needs: (mul(g, Tensor(mask)),))


def sign(x: Tensor | np.ndarray) -> np.ndarray:
    """Elementwise sign as a constant array; sign(0) == 0."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.sign(data)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, needs):
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            shape = [1 if i in axes else n for i, n in enumerate(a.shape)]
            g = reshape(g, tuple(shape))
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)

    return _emit("sum", out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _emit("broadcast_to", out, (a,), lambda g, needs: (sum_to(g, a.shape),))


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    """Sum a broadcast result back down to ``shape``."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: cannot reduce {a.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1
    )
    out = a.data.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    if out.shape != shape:
        raise ShapeError(f"sum_to: cannot reduce {a.shape} to {shape}")
    return _emit("sum_to", out, (a,), lambda g, needs: (broadcast_to(g, a.shape),))


# ---------------------------------------------------------------------------
# shape primitives


def reshape(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _emit("reshape", out, (a,), lambda g, needs: (reshape(g, a.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def transpose(a: Tensor, axes: tuple | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,),
                 lambda g, needs: (transpose(g, inverse),))


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return _emit("matmul", a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# softmax / loss


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s_data = e / e.sum(axis=axis, keepdims=True)
    holder = []

    def backward(g, needs):
        s = holder[0]
        gs = mul(g, s)
        return (sub(gs, mul(s, sum(gs, axis=axis, keepdims=True))),)

    out = _emit("softmax", s_data, (logits,), backward)
    holder.append(out)
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample cross-entropy of ``logits`` (N, C) against integer labels.

    A single logits vector of shape (C,) with an integer label yields a scalar.
    """
    single = logits.ndim == 1
    if single:
        logits = reshape(logits, (1, -1))
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (N, C), got {logits.shape}")
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ShapeError(f"softmax_cross_entropy: label out of range for {c} classes")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    losses = lse - z[np.arange(n), labels]
    if not np.all(np.isfinite(losses)):
        raise NonFiniteError("softmax_cross_entropy: non-finite loss")
    onehot = np.zeros_like(z)
    onehot[np.arange(n), labels] = 1

    def backward(g, needs):
        p = softmax(logits, axis=1)
        return (mul(sub(p, Tensor(onehot)), reshape(g, (n, 1))),)

    out = _emit("softmax_cross_entropy", losses.astype(z.dtype, copy=False), (logits,), backward)
    return reshape(out, ()) if single else out


# ---------------------------------------------------------------------------
# convolution and pooling


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col_data(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (N, C, OH, OW, KH, KW) -> (N, OH, OW, C, KH, KW)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def _col2im_data(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = shape
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


def im2col(x: Tensor, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"im2col: expected NCHW input, got {x.shape}")
    shape = x.shape
    return _emit("im2col", _im2col_data(x.data, kh, kw, stride, pad), (x,),
                 lambda g, needs: (col2im(g, shape, kh, kw, stride, pad),))


def col2im(cols: Tensor, shape: tuple, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    return _emit("col2im", _col2im_data(cols.data, shape, kh, kw, stride, pad), (cols,),
                 lambda g, needs: (im2col(g, kh, kw, stride, pad),))


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation via im2col + matmul.  x: (N,C,H,W), k: (F,C,KH,KW)."""
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {k.shape}")
    n, _, h, w = x.shape
    f, c, kh, kw = k.shape
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {k.shape} too large for input {x.shape}")
    cols = im2col(x, kh, kw, stride, pad)
    out = matmul(cols, transpose(reshape(k, (f, c * kh * kw))))
    out = transpose(reshape(out, (n, oh, ow, f)), (0, 3, 1, 2))
    if bias is not None:
        out = add(out, reshape(bias, (1, f, 1, 1)))
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first element in the window."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2: expected NCHW input with even H and W, got {x.shape}")
    n, c, h, w = x.shape
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    pick = windows.argmax(axis=-1)
    mask = np.zeros_like(windows)
    np.put_along_axis(mask, pick[..., None], 1, axis=-1)
    mask = mask.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return sum(mul(blocks, Tensor(mask)), axis=(3, 5))

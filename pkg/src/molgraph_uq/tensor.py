"""Dense float64 tensors with a reverse-mode tape.

Tensors are matrices of shape ``(rows, cols)``, optionally stacked along one
leading batch axis ``(batch, rows, cols)`` so a mini-batch of padded graphs runs
through a single operation. A 2-D operand of ``matmul`` is shared across the
batch. Elementwise operations accept equal shapes or a ``(1, 1)`` scalar
operand; anything else must be expanded explicitly with ``expand_rows``.

Operations are recorded only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = sum_all(hadamard(w, w))
    grads = backward(loss, tape)
"""

import threading

import numpy as np

from . import kernels
from .errors import DetachedError, NotScalarError, ShapeError

_local = threading.local()


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        elif value.ndim > 3:
            raise ShapeError(f"tensors are 2-D or batched 2-D, got shape {value.shape}")
        self.value = value
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def rows(self):
        return self.value.shape[-2]

    @property
    def cols(self):
        return self.value.shape[-1]

    def item(self):
        if self.value.size != 1:
            raise NotScalarError(f"item() needs a single element, shape is {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self):
        return self.value

    def detach(self):
        return Tensor(self.value, requires_grad=False, name=self.name)

    def copy(self):
        return Tensor(self.value.copy(), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def tensor(value, requires_grad=False, name=None):
    return value if isinstance(value, Tensor) else Tensor(value, requires_grad, name)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations; creation order is a topological order."""

    def __init__(self):
        self.nodes = []
        self._outputs = set()
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward):
        self.nodes.append(_Node(out, inputs, backward))
        self._outputs.add(id(out))

    def produced(self, t):
        return id(t) in self._outputs


def active_tape():
    return getattr(_local, "tape", None)


class no_grad:
    """Temporarily disable recording, e.g. for Monte-Carlo inference."""

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = None

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False


def _emit(value, inputs, backward):
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


# --------------------------------------------------------------------------
# shape helpers
# --------------------------------------------------------------------------


def _is_scalar(t):
    return t.value.shape[-2:] == (1, 1) and t.value.size == 1


def _check_elementwise(kind, a, b):
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(grad, shape):
    """Sum ``grad`` down to ``shape`` (undo a scalar or batch broadcast)."""
    if grad.shape == shape:
        return grad
    if len(shape) == 2 and shape == (1, 1):
        return np.array([[grad.sum()]])
    if len(shape) == 3 and shape[1:] == (1, 1) and shape[0] == 1:
        return np.array([[[grad.sum()]]])
    if grad.ndim == 3 and len(shape) == 2 and grad.shape[1:] == shape:
        return grad.sum(axis=0)
    raise ShapeError(f"cannot reduce gradient {grad.shape} to {shape}")


def _swap(x):
    return np.swapaxes(x, -1, -2)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def matmul(a, b):
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} do not conform")
    if av.ndim == 3 and bv.ndim == 3 and av.shape[0] != bv.shape[0]:
        raise ShapeError(f"matmul: batch sizes differ in {av.shape} and {bv.shape}")
    if av.ndim == 2 and bv.ndim == 3:
        raise ShapeError(f"matmul: a 2-D left operand {av.shape} cannot multiply batched {bv.shape}")
    if av.ndim == 3 and bv.ndim == 2:
        # one large GEMM instead of a stack of small ones
        bsz, m, k = av.shape
        out = (av.reshape(bsz * m, k) @ bv).reshape(bsz, m, bv.shape[1])
    else:
        out = av @ bv

    def backward(g):
        ga = g @ _swap(bv) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if av.ndim == 3 and bv.ndim == 2:
                bsz, m, k = av.shape
                gb = av.reshape(bsz * m, k).T @ g.reshape(bsz * m, -1)
            else:
                gb = _swap(av) @ g
        return ga, gb

    return _emit(out, (a, b), backward)


def add(a, b):
    _check_elementwise("add", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _emit(a.value + b.value, (a, b), backward)


def sub(a, b):
    _check_elementwise("sub", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _emit(a.value - b.value, (a, b), backward)


def hadamard(a, b):
    _check_elementwise("hadamard", a, b)
    av, bv = a.value, b.value

    def backward(g):
        ga = _reduce_to(g * bv, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * av, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(av * bv, (a, b), backward)


def scale(a, c):
    c = float(c)

    def backward(g):
        return (g * c,)

    return _emit(a.value * c, (a,), backward)


def concat_cols(tensors):
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat_cols: nothing to concatenate")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_cols: shapes {tensors[0].shape} and {t.shape} do not conform")
    widths = [t.cols for t in tensors]
    edges = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[..., edges[i] : edges[i + 1]] for i in range(len(tensors)))

    return _emit(np.concatenate([t.value for t in tensors], axis=-1), tensors, backward)


def cols(a, start, stop):
    """Column slice ``a[..., start:stop]``."""
    if not 0 <= start < stop <= a.cols:
        raise ShapeError(f"cols: slice {start}:{stop} outside shape {a.shape}")

    def backward(g):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        return (full,)

    return _emit(a.value[..., start:stop], (a,), backward)


def transpose(a):
    def backward(g):
        return (_swap(g),)

    return _emit(_swap(a.value), (a,), backward)


def relu(a):
    pos = a.value > 0.0

    def backward(g):
        return (g * pos,)

    return _emit(np.where(pos, a.value, 0.0), (a,), backward)


def tanh(a):
    out = np.tanh(a.value)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _emit(out, (a,), backward)


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(a.value)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _emit(out, (a,), backward)


def softmax_rows(a):
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (a,), backward)


def log_softmax_rows(a):
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (a,), backward)


def exp(a):
    out = np.exp(a.value)

    def backward(g):
        return (g * out,)

    return _emit(out, (a,), backward)


def log(a):
    av = a.value

    def backward(g):
        return (g / av,)

    return _emit(np.log(av), (a,), backward)


def sum_all(a):
    shape = a.shape

    def backward(g):
        return (np.full(shape, g.reshape(-1)[0]),)

    return _emit(np.array([[a.value.sum()]]), (a,), backward)


def sum_rows_masked(a, mask):
    """Column sums over rows whose mask entry is 1: ``(..., n, c) -> (..., 1, c)``."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape[:-1]:
        raise ShapeError(f"sum_rows_masked: mask {mask.shape} does not match rows of {a.shape}")
    m = mask[..., :, None]

    def backward(g):
        return (g * m,)

    return _emit((a.value * m).sum(axis=-2, keepdims=True), (a,), backward)


def expand_rows(a, n, batch=None):
    """Repeat a single-row tensor ``(..., 1, c)`` into ``(..., n, c)``.

    With ``batch`` set, a 2-D row ``(1, c)`` becomes ``(batch, n, c)``.
    """
    if a.rows != 1:
        raise ShapeError(f"expand_rows: expected a single row, got shape {a.shape}")
    n = int(n)
    if batch is not None and a.value.ndim == 2:
        out = np.broadcast_to(a.value, (int(batch), n, a.cols)).copy()

        def backward(g):
            return (g.sum(axis=(0, 1)).reshape(1, -1),)

        return _emit(out, (a,), backward)

    reps = (1,) * (a.value.ndim - 2) + (n, 1)

    def backward(g):
        return (g.sum(axis=-2, keepdims=True),)

    return _emit(np.tile(a.value, reps), (a,), backward)


def masked_tanh(scores, adj):
    """``tanh`` on the nonzero pattern of the constant ``adj``; zero elsewhere."""
    adj = np.asarray(adj, dtype=np.float64)
    if adj.shape[-2:] != scores.shape[-2:]:
        raise ShapeError(f"masked_tanh: adjacency {adj.shape} vs scores {scores.shape}")
    out = kernels.masked_tanh(scores.value, adj)

    def backward(g):
        return (kernels.masked_tanh_backward(g, out, np.broadcast_to(adj, g.shape)),)

    return _emit(out, (scores,), backward)


_UNARY = {
    "transpose": transpose,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax_rows": softmax_rows,
    "log_softmax_rows": log_softmax_rows,
    "exp": exp,
    "log": log,
    "sum_all": sum_all,
}
_BINARY = {"matmul": matmul, "add": add, "sub": sub, "hadamard": hadamard}


def apply(kind, *inputs, **kwargs):
    """Dispatch a primitive by name, e.g. ``apply("matmul", a, b)``."""
    inputs = tuple(tensor(x) for x in inputs)
    if kind in _UNARY:
        if len(inputs) != 1:
            raise ShapeError(f"{kind} takes one input, got {len(inputs)}")
        return _UNARY[kind](inputs[0])
    if kind in _BINARY:
        if len(inputs) != 2:
            raise ShapeError(f"{kind} takes two inputs, got {len(inputs)}")
        return _BINARY[kind](*inputs)
    if kind == "concat_cols":
        return concat_cols(inputs)
    if kind == "scale":
        return scale(inputs[0], kwargs["c"])
    if kind == "sum_rows_masked":
        return sum_rows_masked(inputs[0], kwargs["mask"])
    if kind == "expand_rows":
        return expand_rows(inputs[0], kwargs["n"], kwargs.get("batch"))
    if kind == "cols":
        return cols(inputs[0], kwargs["start"], kwargs["stop"])
    if kind == "masked_tanh":
        return masked_tanh(inputs[0], kwargs["adj"])
    raise ValueError(f"unknown operation {kind!r}")


# --------------------------------------------------------------------------
# reverse accumulation
# --------------------------------------------------------------------------


def backward(loss, tape, params=()):
    """Reverse-accumulate d(loss)/d(t) for every tensor on ``tape``.

    Sets ``.grad`` on every grad-requiring input seen on the tape and on each of
    ``params`` (zeros when ``loss`` does not depend on it). Returns a dict
    mapping those tensors to their gradients.
    """
    if loss.value.size != 1:
        raise NotScalarError(f"backward needs a (1, 1) loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise DetachedError("loss was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.value)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not tape.produced(t):
                leaves[key] = t

    result = {}
    for key, t in leaves.items():
        t.grad = grads.get(key, np.zeros(t.shape))
        result[t] = t.grad
    for t in params:
        if t not in result:
            t.grad = np.zeros(t.shape)
            result[t] = t.grad
    return result


def finite_diff_report(f, theta, h=1e-5, indices=None):
    """Tape gradient and central difference for selected flat entries of ``theta``.

    ``f`` maps ``theta`` (mutated in place between calls, restored afterwards)
    to a ``(1, 1)`` tensor. Returns ``(entries, analytic, numeric)`` arrays.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    with Tape() as tape:
        loss = f(theta)
    if tape.produced(loss):
        backward(loss, tape, params=(theta,))
        grad = theta.grad.reshape(-1).copy()
    else:
        grad = np.zeros(theta.value.size)

    flat = theta.value.flat
    entries = np.arange(theta.value.size) if indices is None else np.asarray(indices, dtype=np.int64)
    numeric = np.empty(len(entries))
    with no_grad():
        for k, i in enumerate(entries):
            orig = flat[i]
            flat[i] = orig + h
            up = f(theta).item()
            flat[i] = orig - h
            down = f(theta).item()
            flat[i] = orig
            numeric[k] = (up - down) / (2.0 * h)
    return entries, grad[entries], numeric


def relative_errors(analytic, numeric):
    return np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)


def finite_diff_check(f, theta, h=1e-5, indices=None):
    """Max over entries of |analytic - numeric| / (|analytic| + 1e-8)."""
    _, analytic, numeric = finite_diff_report(f, theta, h, indices)
    return float(relative_errors(analytic, numeric).max()) if len(numeric) else 0.0

"""Dense float64 tensors with a reverse-mode autodiff tape.

Everything downstream (state-space blocks, diffusion training, graph filters)
runs on these tensors. Scope is deliberately small: dense row-major float64,
a single global tape, and a limited broadcasting rule (equal shapes, or one
shape a trailing suffix of the other). Anything fancier goes through explicit
``reshape`` / ``broadcast_to`` so every gradient rule stays auditable.

Backward on an already-consumed tape raises; gradients are reset explicitly
between steps (``zero_grad`` on the caller side, ``reset_tape`` for the graph).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeMismatch", "tensor", "parameter", "no_grad",
    "backward", "reset_tape", "tape",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "expm1", "log",
    "sqrt", "power", "sigmoid", "silu", "softplus", "softmax", "tensor_sum",
    "mean", "transpose", "reshape", "broadcast_to", "concatenate", "stack",
    "unstack", "slice_", "flip", "layer_norm",
]


class ShapeMismatch(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: shapes do not conform: "
                         + " vs ".join(str(s) for s in self.shapes))


class Node:
    """One recorded primitive: inputs, outputs, and the local vjp."""

    __slots__ = ("inputs", "outputs", "backward_fn")

    def __init__(self, inputs, outputs, backward_fn):
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive ops; parents always precede children."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes = []
        self.consumed = False


_TAPE = Tape()
_GRAD_ENABLED = True


def tape() -> Tape:
    """The global tape (parents precede children by construction)."""
    return _TAPE


def reset_tape():
    """Drop all recorded nodes and re-arm the tape for the next backward."""
    _TAPE.nodes.clear()
    _TAPE.consumed = False


class no_grad:
    """Context manager that disables recording (inference / data paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """n-d float64 array, optionally participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self) -> "Tensor":
        """A tape-free view of the same values."""
        return Tensor(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; non-Tensor operands are lifted without grad
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return slice_(self, key)


def tensor(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    """A leaf tensor that accumulates gradient."""
    return Tensor(data, requires_grad=True)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(inputs, out_data, backward_fn):
    """Wrap forward results; record a node when any input participates."""
    single = not isinstance(out_data, (tuple, list))
    datas = (out_data,) if single else tuple(out_data)
    outs = tuple(Tensor(d) for d in datas)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        node = Node(tuple(inputs), outs, backward_fn)
        for o in outs:
            o.requires_grad = True
            o.node = node
        _TAPE.nodes.append(node)
    return outs[0] if single else list(outs)


def _accum(t, g):
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def backward(loss: Tensor):
    """Reverse pass: every participating leaf receives d(loss)/d(leaf).

    The loss must be a recorded scalar. Backward marks the tape consumed;
    calling it again without ``reset_tape`` is an error (documented choice:
    double-backward is unsupported, re-running would double gradients).
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.node is None:
        raise ValueError("backward: loss is not recorded on the tape")
    if _TAPE.consumed:
        raise RuntimeError("backward: tape already consumed; call reset_tape() first")
    _TAPE.consumed = True
    loss.grad = np.ones(())
    for node in reversed(_TAPE.nodes):
        out_grads = tuple(o.grad for o in node.outputs)
        if all(g is None for g in out_grads):
            continue
        in_grads = node.backward_fn(out_grads)
        for t, g in zip(node.inputs, in_grads):
            if g is not None and t.requires_grad:
                _accum(t, g)


# ---------------------------------------------------------------------------
# broadcasting helpers (trailing-suffix rule)

def _suffix_of(small, big):
    n = len(small)
    return n <= len(big) and (n == 0 or tuple(big[-n:]) == tuple(small))


def _binary_shapes(op, a, b):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return sa
    if _suffix_of(sa, sb):
        return sb
    if _suffix_of(sb, sa):
        return sa
    raise ShapeMismatch(op, sa, sb)


def _unbroadcast(g, shape):
    """Reduce a gradient from the broadcast result shape back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes("add", a, b)
    sa, sb = a.data.shape, b.data.shape

    def bw(gs):
        g = gs[0]
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record((a, b), a.data + b.data, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.data.shape, b.data.shape

    def bw(gs):
        g = gs[0]
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record((a, b), a.data - b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes("mul", a, b)
    sa, sb = a.data.shape, b.data.shape
    da, db = a.data, b.data

    def bw(gs):
        g = gs[0]
        return _unbroadcast(g * db, sa), _unbroadcast(g * da, sb)

    return _record((a, b), da * db, bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes("div", a, b)
    sa, sb = a.data.shape, b.data.shape
    da, db = a.data, b.data

    def bw(gs):
        g = gs[0]
        return _unbroadcast(g / db, sa), _unbroadcast(-g * da / (db * db), sb)

    return _record((a, b), da / db, bw)


def neg(a: Tensor) -> Tensor:
    return _record((a,), -a.data, lambda gs: (-gs[0],))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-d matrix product; batch dims go through reshape."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul", a.data.shape, b.data.shape)
    da, db = a.data, b.data

    def bw(gs):
        g = gs[0]
        return g @ db.T, da.T @ g

    return _record((a, b), da @ db, bw)


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _record((a,), out, lambda gs: (gs[0] * out,))


def expm1(a: Tensor) -> Tensor:
    """exp(a) - 1 without cancellation near zero."""
    a = _lift(a)
    out = np.expm1(a.data)
    return _record((a,), out, lambda gs: (gs[0] * (out + 1.0),))


def log(a: Tensor) -> Tensor:
    a = _lift(a)
    da = a.data
    return _record((a,), np.log(da), lambda gs: (gs[0] / da,))


def sqrt(a: Tensor) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return _record((a,), out, lambda gs: (gs[0] * 0.5 / out,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    a = _lift(a)
    p = float(p)
    da = a.data
    return _record((a,), da ** p, lambda gs: (gs[0] * p * da ** (p - 1.0),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _lift(a)
    out = _sigmoid(a.data)
    return _record((a,), out, lambda gs: (gs[0] * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); the gate nonlinearity in the sequence blocks."""
    a = _lift(a)
    s = _sigmoid(a.data)
    out = a.data * s

    def bw(gs):
        return (gs[0] * (s + out * (1.0 - s)),)

    return _record((a,), out, bw)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    a = _lift(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)
    return _record((a,), out, lambda gs: (gs[0] * s,))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; rows are nonnegative and sum to one."""
    a = _lift(a)
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(gs):
        g = gs[0]
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record((a,), out, bw)


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g, in_shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, in_shape)


def tensor_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.data.ndim)
    shape = a.data.shape

    def bw(gs):
        return (_expand_reduced(gs[0], shape, axes, keepdims),)

    return _record((a,), a.data.sum(axis=axes, keepdims=keepdims), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.data.ndim)
    shape = a.data.shape
    count = 1
    for ax in axes:
        count *= shape[ax]

    def bw(gs):
        return (_expand_reduced(gs[0], shape, axes, keepdims) / count,)

    return _record((a,), a.data.mean(axis=axes, keepdims=keepdims), bw)


# ---------------------------------------------------------------------------
# shape manipulation

def transpose(a: Tensor, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record((a,), np.transpose(a.data, axes),
                   lambda gs: (np.transpose(gs[0], inv),))


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    old = a.data.shape
    return _record((a,), a.data.reshape(shape),
                   lambda gs: (gs[0].reshape(old),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; gradient sums over expanded axes."""
    a = _lift(a)
    shape = tuple(shape)
    old = a.data.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeMismatch("broadcast_to", old, shape)
    extra = len(shape) - len(old)
    ones_axes = tuple(i + extra for i, s in enumerate(old)
                      if s == 1 and shape[i + extra] != 1)

    def bw(gs):
        g = gs[0]
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        if ones_axes_rel:
            g = g.sum(axis=ones_axes_rel, keepdims=True)
        return (g.reshape(old),)

    ones_axes_rel = tuple(ax - extra for ax in ones_axes)
    return _record((a,), np.ascontiguousarray(out), bw)


def concatenate(tensors, axis=0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    axis = axis % ts[0].data.ndim
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes[:-1])

    def bw(gs):
        return tuple(np.split(gs[0], splits, axis=axis))

    return _record(tuple(ts), np.concatenate([t.data for t in ts], axis=axis), bw)


def stack(tensors, axis=0) -> Tensor:
    ts = [_lift(t) for t in tensors]

    def bw(gs):
        return tuple(np.moveaxis(gs[0], axis, 0))

    return _record(tuple(ts), np.stack([t.data for t in ts], axis=axis), bw)


def unstack(a: Tensor, axis=0):
    """Split along an axis into a list of tensors (one multi-output node)."""
    a = _lift(a)
    moved = np.moveaxis(a.data, axis, 0)
    pages = tuple(moved[i] for i in range(moved.shape[0]))
    page_shape = moved.shape[1:]

    def bw(gs):
        full = np.stack([g if g is not None else np.zeros(page_shape)
                         for g in gs])
        return (np.moveaxis(full, 0, axis),)

    return _record((a,), pages, bw)


def slice_(a: Tensor, key) -> Tensor:
    a = _lift(a)
    shape = a.data.shape

    def bw(gs):
        z = np.zeros(shape)
        z[key] += gs[0]
        return (z,)

    return _record((a,), a.data[key], bw)


def flip(a: Tensor, axis=0) -> Tensor:
    a = _lift(a)
    return _record((a,), np.ascontiguousarray(np.flip(a.data, axis)),
                   lambda gs: (np.flip(gs[0], axis),))


# ---------------------------------------------------------------------------
# fused layer normalization (last axis)

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.data.ndim - 1))

    def bw(gs):
        g = gs[0]
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        dgamma = (g * xhat).sum(axis=red) if red else g * xhat
        dbeta = g.sum(axis=red) if red else g
        return gx, dgamma, dbeta

    return _record((x, gamma, beta), out, bw)

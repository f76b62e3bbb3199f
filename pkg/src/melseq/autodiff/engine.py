"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable quantity is a :class:`Tensor`. Operations executed while
a :class:`Tape` is active are recorded in execution order together with a
closure that maps the output gradient to parent gradients; ``Tape.backward``
replays that record in reverse. Outside a tape nothing is recorded, which is
how inference runs without paying for gradient bookkeeping.

Broadcasting is deliberately restricted to tensor-scalar arithmetic. The only
other shape-changing rules live inside named primitives (``affine`` adds its
bias to every row, ``matmul`` accepts a shared leading batch axis).
"""

from __future__ import annotations

import builtins
import threading
from numbers import Number

import numpy as np

from melseq.errors import AttentionError, DimensionError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape():
    """Return the innermost active tape on this thread, or ``None``."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense real array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations inside the ``with`` block whose
    inputs require gradients are appended to :attr:`nodes`.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()
        return False

    def record(self, out, parents, backward):
        self.nodes.append((out, parents, backward))

    def backward(self, loss, grad=None):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf.

        The tape is consumed: nodes are released afterwards so a second call
        raises instead of silently double counting.
        """
        if self.nodes is None:
            raise RuntimeError("tape has already been consumed by backward()")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        if grad is None:
            if loss.size != 1:
                raise DimensionError(f"backward() without grad needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
        self.nodes = None


def _make(data, parents, backward):
    tape = current_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    out.is_leaf = False
    if needs:
        tape.record(out, parents, backward)
    return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x):
    return isinstance(x, Number) and not isinstance(x, bool)


# -- elementwise ---------------------------------------------------------------


def add(a, b):
    if _is_scalar(b):
        b = float(b)
        return _make(a.data + b, (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    _check_same("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if _is_scalar(b):
        b = float(b)
        return _make(a.data - b, (a,), lambda g: (g,))
    _check_same("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    if _is_scalar(b):
        b = float(b)
        return _make(a.data * b, (a,), lambda g: (g * b,))
    if _is_scalar(a):
        return mul(b, a)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def tanh(x):
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x):
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def relu(x):
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * pos,))


# -- linear algebra ------------------------------------------------------------


def matmul(a, b):
    """Matrix product of 2-D operands, or batched over a shared leading axis for 3-D."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        ad, bd = a.data, b.data
        return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    if a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise DimensionError(f"matmul: incompatible batched shapes {a.shape} @ {b.shape}")
        ad, bd = a.data, b.data
        return _make(
            ad @ bd,
            (a, b),
            lambda g: (g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g),
        )
    raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")


def affine(x, W, b=None):
    """``x @ W.T + b`` for ``x`` of shape (..., d_in), ``W`` (d_out, d_in), ``b`` (d_out,)."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: input {x.shape} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"affine: bias {b.shape} does not match weight {W.shape}")
    xd, Wd = x.data, W.data
    y = xd @ Wd.T
    if b is not None:
        y = y + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wd
        gW = g2.T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return _make(y, parents, backward)


def softmax_rows(x, scale=1.0, mask=None):
    """Row-wise ``softmax(x / scale)`` over the last axis.

    ``mask`` is a boolean array of ``x``'s shape; False entries get exactly
    zero weight. A row with no admissible entry raises :class:`AttentionError`.
    """
    if scale <= 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    z = x.data / scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax mask {mask.shape} does not match scores {x.shape}")
        if not mask.any(axis=-1).all():
            raise AttentionError("every position of some row is masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype, copy=False)

    def backward(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y / scale,)

    return _make(y, (x,), backward)


# -- structural ----------------------------------------------------------------


def concat(tensors, axis=-1):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"concat: axis {axis} out of range for rank {ndim}")
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(
                f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(y, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("stack: nothing to stack")
    for t in tensors[1:]:
        _check_same("stack", tensors[0], t)
    y = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(y, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def split(x, sizes, axis=-1):
    """Inverse of :func:`concat`: cut ``x`` into consecutive pieces of the given sizes."""
    ax = axis % x.ndim
    if builtins.sum(sizes) != x.shape[ax]:
        raise DimensionError(f"split: sizes {sizes} do not sum to {x.shape[ax]}")
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + s)
        out.append(take(x, tuple(idx)))
        start += s
    return out


def take(x, index):
    """Basic (slice/int) or integer-array indexing with scatter-add backward."""
    y = x.data[index]
    shape, dtype = x.shape, x.dtype

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(y, copy=True), (x,), backward)


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def embedding(W, ids):
    """Rows of ``W`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= W.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {W.shape[0]})")
    Wd_shape, dtype = W.shape, W.dtype

    def backward(g):
        full = np.zeros(Wd_shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, Wd_shape[1]))
        return (full,)

    return _make(W.data[ids], (W,), backward)


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


# -- reductions and losses -----------------------------------------------------


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    y = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _make(np.asarray(y), (x,), backward)


def mean(x):
    return mul(sum(x), 1.0 / x.size)


def masked_mse(pred, target, mask):
    """Mean of squared error over entries where ``mask`` is true.

    ``target`` and ``mask`` are constants (numpy arrays or non-grad tensors).
    """
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    mask = np.asarray(mask, dtype=bool)
    if target.shape != pred.shape or mask.shape != pred.shape:
        raise DimensionError(f"masked_mse: shapes {pred.shape}, {target.shape}, {mask.shape}")
    count = max(int(mask.sum()), 1)
    diff = np.where(mask, pred.data - target, 0.0).astype(pred.dtype, copy=False)
    y = np.asarray((diff * diff).sum() / count, dtype=pred.dtype)
    return _make(y, (pred,), lambda g: (g * 2.0 * diff / count,))


def bce_with_logits(logits, targets, mask=None, pos_weight=1.0):
    """Masked mean binary cross-entropy on raw logits.

    Positive-class terms are multiplied by ``pos_weight``.
    """
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise DimensionError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    m = np.ones(z.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = max(int(m.sum()), 1)
    # log(1 + exp(-|z|)) keeps both softplus branches finite
    soft = np.log1p(np.exp(-np.abs(z)))
    sp_pos = soft + np.maximum(z, 0.0)  # softplus(z)
    sp_neg = soft + np.maximum(-z, 0.0)  # softplus(-z)
    per = np.where(m, pos_weight * y * sp_neg + (1.0 - y) * sp_pos, 0.0)
    loss = np.asarray(per.sum() / count, dtype=z.dtype)
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    dz = np.where(m, pos_weight * y * (sig - 1.0) + (1.0 - y) * sig, 0.0) / count
    return _make(loss, (logits,), lambda g: ((g * dz).astype(z.dtype, copy=False),))

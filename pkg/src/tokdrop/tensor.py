"""Dense numpy tensors with tape-based reverse-mode differentiation.

Operations are plain functions. While a :class:`Tape` is active (``with Tape()
as tape:``), every operation whose inputs require gradients appends one node to
the tape; ``tape.backward(loss)`` then replays the nodes in reverse order and
routes gradients into the inputs. Nothing is recorded outside a tape, so
inference code pays no bookkeeping cost.

Leading axes are treated as batch axes throughout: an operation documented on
``[T x d]`` also accepts ``[B x T x d]``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "FLOPS",
    "add",
    "mul",
    "scale",
    "matmul",
    "relu",
    "gelu",
    "softmax_rows",
    "layernorm",
    "gather_rows",
    "merge_rows",
    "pool_pairs",
    "repeat_pairs",
    "embedding",
    "reshape",
    "transpose",
    "sum_all",
    "cross_entropy",
]

LN_EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class FlopCounter:
    """Counts multiply-accumulate FLOPs (2 per MAC) of every matmul executed."""

    def __init__(self):
        self.total = 0

    def reset(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


FLOPS = FlopCounter()


class Tensor:
    """Row-major array plus a lazily allocated gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
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

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


_ACTIVE = []


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the list is topologically
    ordered by construction. ``backward`` walks it once in reverse.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, backward):
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss, grad=None):
        if grad is None:
            grad = np.ones_like(loss.data)
        loss.grad = grad if loss.grad is None else loss.grad + grad
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.dtype != parent.data.dtype:
                    pg = pg.astype(parent.data.dtype)
                parent.grad = pg if parent.grad is None else parent.grad + pg


def _tape():
    return _ACTIVE[-1] if _ACTIVE else None


def _result(data, parents, backward):
    tape = _tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, dtype=data.dtype)
    if track:
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b):
    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def scale(a, c):
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    """``[.. x m x k] @ [k x n]`` or batched ``[.. x m x k] @ [.. x k x n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)
    macs = out.size * a.shape[-1]
    FLOPS.add(2 * macs)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            FLOPS.add(2 * macs)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            FLOPS.add(2 * macs)
        return ga, gb

    return _result(out, (a, b), backward)


def relu(x):
    out = np.maximum(x.data, 0)
    return _result(out, (x,), lambda g: (g * (x.data > 0),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    """Tanh approximation of GELU."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1 + t)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * d**2)
        return (g * (0.5 * (1 + t) + 0.5 * d * (1 - t * t) * dinner),)

    return _result(out.astype(d.dtype, copy=False), (x,), backward)


def softmax_rows(x):
    """Softmax over the last axis, stabilised by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), backward)


def layernorm(x, gain, bias, eps=LN_EPS):
    """Normalise each row to zero mean / unit variance, then ``gain * . + bias``."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, d)
        ggain = (lead * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gbias = lead.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), backward)


def _flat_rows(shape, idx):
    """Flatten ``[.. x M]`` row indices into offsets of a ``[-1 x d]`` view."""
    t = shape[-2]
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != len(shape) - 1 or idx.shape[:-1] != tuple(shape[:-2]):
        raise DimensionError(f"row index of shape {idx.shape} does not fit tensor {tuple(shape)}")
    if idx.size and (idx.min() < 0 or idx.max() >= t):
        raise IndexError(f"row index out of range [0, {t})")
    batch = int(np.prod(shape[:-2], dtype=np.int64))
    offsets = (np.arange(batch, dtype=np.int64) * t).reshape(idx.shape[:-1] + (1,))
    return (idx + offsets).reshape(-1)


def gather_rows(x, idx):
    """Select rows: ``out[.., j, :] = x[.., idx[.., j], :]``."""
    flat = _flat_rows(x.shape, idx)
    d = x.shape[-1]
    out_shape = tuple(x.shape[:-2]) + (np.shape(idx)[-1], d)
    out = x.data.reshape(-1, d)[flat].reshape(out_shape)

    def backward(g):
        gx = np.zeros((x.size // d, d), dtype=g.dtype)
        np.add.at(gx, flat, g.reshape(-1, d))
        return (gx.reshape(x.shape),)

    return _result(out, (x,), backward)


def merge_rows(first, second, first_idx, second_idx):
    """Interleave two row sets back into one tensor.

    ``first`` rows land at ``first_idx`` and ``second`` rows at ``second_idx``;
    the two index sets must partition ``0..T-1`` with ``T`` the summed row count.
    """
    if first.shape[:-2] != second.shape[:-2] or first.shape[-1] != second.shape[-1]:
        raise DimensionError(f"merge_rows: incompatible {first.shape} and {second.shape}")
    t = first.shape[-2] + second.shape[-2]
    d = first.shape[-1]
    full_shape = tuple(first.shape[:-2]) + (t, d)
    f1 = _flat_rows(full_shape, first_idx)
    f2 = _flat_rows(full_shape, second_idx)
    out = np.empty((f1.size + f2.size, d), dtype=np.result_type(first.data, second.data))
    out[f1] = first.data.reshape(-1, d)
    out[f2] = second.data.reshape(-1, d)

    def backward(g):
        g2 = g.reshape(-1, d)
        return g2[f1].reshape(first.shape), g2[f2].reshape(second.shape)

    return _result(out.reshape(full_shape), (first, second), backward)


def pool_pairs(x):
    """Window-2 stride-2 mean over rows: ``[.. x T x d] -> [.. x T/2 x d]``."""
    t, d = x.shape[-2], x.shape[-1]
    if t % 2:
        raise DimensionError(f"pool_pairs needs an even row count, got {t}")
    pairs = x.data.reshape(x.shape[:-2] + (t // 2, 2, d))
    out = pairs.mean(axis=-2)

    def backward(g):
        half = (0.5 * g)[..., None, :]
        return (np.broadcast_to(half, pairs.shape).reshape(x.shape).copy(),)

    return _result(out, (x,), backward)


def repeat_pairs(x):
    """Copy every row to two consecutive rows: ``[.. x T x d] -> [.. x 2T x d]``."""
    out = np.repeat(x.data, 2, axis=-2)

    def backward(g):
        t2, d = g.shape[-2], g.shape[-1]
        return (g.reshape(g.shape[:-2] + (t2 // 2, 2, d)).sum(axis=-2),)

    return _result(out, (x,), backward)


def embedding(table, ids):
    """Look up rows of ``table`` for an integer array ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    v, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding id out of range [0, {v})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _result(out, (table,), backward)


def reshape(x, shape):
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,),
                   lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def sum_all(x):
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def cross_entropy(logits, labels):
    """Mean NLL over rows of ``logits [n x V]``.

    Returns ``(loss, per_position)``: ``loss`` is a scalar tensor on the tape,
    ``per_position`` a plain array of the ``n`` row losses.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n == 0:
        raise ValueError("cross_entropy needs at least one label")
    if logits.ndim != 2 or logits.shape[0] != n:
        raise DimensionError(f"logits {logits.shape} do not match {n} labels")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise IndexError("label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    per = lse - z[rows, labels]
    per = np.maximum(per, 0)
    loss = np.asarray(per.mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _result(loss, (logits,), backward), per

"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array and, when any operand requires gradients,
records a backward closure referencing its parents. Calling backward() on a
scalar root runs the tape in reverse topological order and accumulates
d(root)/d(leaf) into every requires_grad tensor.

Kink conventions: relu'(0) = 0; max over ties routes the gradient to the
lowest index.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    tracked = tuple(p for p in parents if p.requires_grad or p._parents)
    if tracked:
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tracked
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting semantics, incl. row broadcast)

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _make(data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))
    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _make(data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make(data, (a, b), backward)


def scale(a, s: float):
    a = as_tensor(a)
    s = float(s)

    def backward(g):
        _accumulate(a, g * s)
    return _make(a.data * s, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)
    return _make(data, (a, b), backward)


def norm(a):
    """L2 norm of all entries, as a scalar tensor."""
    a = as_tensor(a)
    n = float(np.sqrt((a.data * a.data).sum()))

    def backward(g):
        if n > 0:
            _accumulate(a, g * a.data / n)
    return _make(n, (a,), backward)


def edge_matvec(mats, vecs):
    """Batched matrix-vector product: (E, o, i) x (E, i) -> (E, o)."""
    mats, vecs = as_tensor(mats), as_tensor(vecs)
    if mats.data.ndim != 3 or vecs.data.ndim != 2 or mats.shape[2] != vecs.shape[1] \
            or mats.shape[0] != vecs.shape[0]:
        raise ShapeError(f"edge_matvec: incompatible shapes {mats.shape} and {vecs.shape}")
    data = np.einsum("eoi,ei->eo", mats.data, vecs.data)

    def backward(g):
        _accumulate(mats, np.einsum("eo,ei->eoi", g, vecs.data))
        _accumulate(vecs, np.einsum("eoi,eo->ei", mats.data, g))
    return _make(data, (mats, vecs), backward)


# ---------------------------------------------------------------------------
# nonlinearities

def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)
    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - t * t))
    return _make(t, (a,), backward)


def exp(a):
    a = as_tensor(a)
    e = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * e)
    return _make(e, (a,), backward)


def log(a):
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g / a.data)
    return _make(np.log(a.data), (a,), backward)


def softmax(a):
    """Numerically stable softmax along the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accumulate(a, s * (g - dot))
    return _make(s, (a,), backward)


# ---------------------------------------------------------------------------
# structure: concat, gather, scatter, reshape

def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])
    return _make(data, tuple(tensors), backward)


def gather_rows(a, idx):
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        _accumulate(a, acc)
    return _make(a.data[idx], (a,), backward)


def gather_pairs(a, rows, cols):
    """Pick a[rows[t], cols[t]] for each t, returning a 1-D tensor."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (rows, cols), g)
        _accumulate(a, acc)
    return _make(a.data[rows, cols], (a,), backward)


def scatter_add(rows, idx, n: int):
    """Sum rows (E, d) into an (n, d) output at positions idx."""
    rows = as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n,) + rows.shape[1:])
    np.add.at(out, idx, rows.data)

    def backward(g):
        _accumulate(rows, g[idx])
    return _make(out, (rows,), backward)


def reshape(a, shape):
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))
    return _make(a.data.reshape(shape), (a,), backward)


# ---------------------------------------------------------------------------
# reductions

def reduce_sum(a, axis=None):
    a = as_tensor(a)
    data = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())
    return _make(data, (a,), backward)


def reduce_mean(a, axis=None):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    data = a.data.mean(axis=axis)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, a.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).copy())
    return _make(data, (a,), backward)


def reduce_max(a, axis=None):
    """Max reduction; on ties the gradient goes to the lowest index."""
    a = as_tensor(a)
    data = a.data.max(axis=axis)
    if axis is None:
        flat_arg = int(a.data.argmax())
    else:
        arg = a.data.argmax(axis=axis)

    def backward(g):
        acc = np.zeros_like(a.data)
        if axis is None:
            acc.flat[flat_arg] = g
        else:
            np.put_along_axis(acc, np.expand_dims(arg, axis),
                              np.expand_dims(g, axis), axis)
        _accumulate(a, acc)
    return _make(data, (a,), backward)


def segment_mean(a, seg, n_segments: int):
    """Row-wise mean per contiguous segment; seg must be sorted ascending."""
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ShapeError("segment_mean: empty segment")
    sums = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(sums, seg, a.data)
    data = sums / counts[:, None]

    def backward(g):
        _accumulate(a, (g / counts[:, None])[seg])
    return _make(data, (a,), backward)


def segment_max(a, seg, n_segments: int):
    """Row-wise max per contiguous segment; ties route to the lowest row."""
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_segments)
    if np.any(counts == 0):
        raise ShapeError("segment_max: empty segment")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    data = np.maximum.reduceat(a.data, starts, axis=0)
    # first row attaining the max, per segment and column
    row_idx = np.arange(a.shape[0])[:, None]
    cand = np.where(a.data == data[seg], row_idx, a.shape[0])
    first = np.minimum.reduceat(cand, starts, axis=0)

    def backward(g):
        acc = np.zeros_like(a.data)
        cols = np.broadcast_to(np.arange(a.shape[1]), first.shape)
        np.add.at(acc, (first.ravel(), cols.ravel()), g.ravel())
        _accumulate(a, acc)
    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# finite-difference verification

def finite_difference_check(f, x: Tensor, h: float = 1e-5) -> dict:
    """Compare tape gradients of scalar f(x) against central differences.

    Relative error per coordinate is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    Coordinates sitting on a kink (large second difference) are flagged
    nondifferentiable and excluded from the max/mean; non-finite evaluations
    are reported per coordinate.
    """
    x.zero_grad()
    out = f(x)
    out.backward()
    g_ad = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    f0 = float(out.data)

    g_fd = np.zeros_like(x.data)
    kink = np.zeros(x.data.shape, dtype=bool)
    nonfinite = np.zeros(x.data.shape, dtype=bool)
    flat = x.data.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            nonfinite.ravel()[i] = True
            continue
        g_fd.ravel()[i] = (fp - fm) / (2 * h)
        # second difference blows up at kinks (O(h) instead of O(h^2))
        if abs(fp - 2 * f0 + fm) / h > 0.1:
            kink.ravel()[i] = True

    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    rel = np.abs(g_ad - g_fd) / denom
    ok = ~(kink | nonfinite)
    return {
        "max_rel_error": float(rel[ok].max()) if ok.any() else 0.0,
        "mean_rel_error": float(rel[ok].mean()) if ok.any() else 0.0,
        "rel_errors": rel,
        "kink_mask": kink,
        "nonfinite_mask": nonfinite,
        "grad_ad": g_ad,
        "grad_fd": g_fd,
    }

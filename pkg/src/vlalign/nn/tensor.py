"""Reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray (up to 4 axes in practice) plus an optional
gradient buffer.  Operators build a dynamic graph; ``backward()`` on a
scalar runs the tape in reverse topological order, accumulating exact
gradients into every reachable tensor.  Hot elementwise/row kernels are
delegated to :mod:`vlalign.kernels` (compiled when available).
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import kernels


class ShapeMismatch(ValueError):
    """Raised when operator inputs have incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, shapes))}")


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar.

        The graph is single-use: closures and parent links are released
        afterwards (they form reference cycles that would otherwise pile
        up on the cyclic collector)."""
        if self.data.ndim != 0:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        for node in topo:
            node._backward = None
            node._parents = ()

    # ---- operator sugar ----
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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[], None] | None) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- elementwise arithmetic ----

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, like=a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape) from None
    out = _make(data, (a, b), None)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad, b.shape)

    out._backward = backward if out.requires_grad else None
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, like=a)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatch("sub", a.shape, b.shape) from None
    out = _make(data, (a, b), None)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(out.grad, b.shape)

    out._backward = backward if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch("mul", a.shape, b.shape) from None
    out = _make(data, (a, b), None)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad * a.data, b.shape)

    out._backward = backward if out.requires_grad else None
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, like=a)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeMismatch("div", a.shape, b.shape) from None
    out = _make(data, (a, b), None)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad / b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape)

    out._backward = backward if out.requires_grad else None
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = _make(a.data * s, (a,), None)

    def backward():
        if a.requires_grad:
            a.grad += out.grad * s

    out._backward = backward if out.requires_grad else None
    return out


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    out = _make(data, (a,), None)

    def backward():
        if a.requires_grad:
            a.grad += out.grad * data

    out._backward = backward if out.requires_grad else None
    return out


def log(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), (a,), None)

    def backward():
        if a.requires_grad:
            a.grad += out.grad / a.data

    out._backward = backward if out.requires_grad else None
    return out


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient flows only where a > floor."""
    out = _make(np.maximum(a.data, floor), (a,), None)
    mask = a.data > floor

    def backward():
        if a.requires_grad:
            a.grad += out.grad * mask

    out._backward = backward if out.requires_grad else None
    return out


def gelu(a: Tensor) -> Tensor:
    out = _make(kernels.gelu_fwd(a.data), (a,), None)

    def backward():
        if a.requires_grad:
            a.grad += kernels.gelu_bwd(a.data, np.ascontiguousarray(out.grad))

    out._backward = backward if out.requires_grad else None
    return out


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    out = _make(a.data * keep, (a,), None)

    def backward():
        if a.requires_grad:
            a.grad += out.grad * keep

    out._backward = backward if out.requires_grad else None
    return out


# ---- linear algebra ----

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    data = a.data @ b.data
    out = _make(data, (a, b), None)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad @ b.data.swapaxes(-1, -2), a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(a.data.swapaxes(-1, -2) @ out.grad, b.shape)

    out._backward = backward if out.requires_grad else None
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range [0, {table.shape[0]})")
    out = _make(table.data[ids], (table,), None)

    def backward():
        if table.requires_grad:
            np.add.at(table.grad, ids, out.grad)

    out._backward = backward if out.requires_grad else None
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch("layer_norm", x.shape, gamma.shape, beta.shape)
    rows = np.ascontiguousarray(x.data.reshape(-1, d))
    xhat, _, rstd = kernels.layernorm_fwd(rows, eps)
    data = (xhat * gamma.data + beta.data).reshape(x.shape)
    out = _make(data, (x, gamma, beta), None)

    def backward():
        gy = out.grad.reshape(-1, d)
        if gamma.requires_grad:
            gamma.grad += (gy * xhat).sum(axis=0)
        if beta.requires_grad:
            beta.grad += gy.sum(axis=0)
        if x.requires_grad:
            dxhat = np.ascontiguousarray(gy * gamma.data)
            x.grad += kernels.layernorm_bwd(dxhat, xhat, rstd).reshape(x.shape)

    out._backward = backward if out.requires_grad else None
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    moved = axis not in (-1, x.ndim - 1)
    xv = np.moveaxis(x.data, axis, -1) if moved else x.data
    d = xv.shape[-1]
    p = kernels.softmax_fwd(np.ascontiguousarray(xv.reshape(-1, d))).reshape(xv.shape)
    data = np.moveaxis(p, -1, axis) if moved else p
    out = _make(data, (x,), None)

    def backward():
        if x.requires_grad:
            gy = np.moveaxis(out.grad, axis, -1) if moved else out.grad
            gx = kernels.softmax_bwd(
                np.ascontiguousarray(p.reshape(-1, d)),
                np.ascontiguousarray(gy.reshape(-1, d)),
            ).reshape(p.shape)
            if moved:
                gx = np.moveaxis(gx, -1, axis)
            x.grad += gx

    out._backward = backward if out.requires_grad else None
    return out


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit norm; zero vectors stay zero."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.where(norm == 0.0, 1.0, norm)
    data = x.data / safe
    out = _make(data, (x,), None)

    def backward():
        if x.requires_grad:
            dot = (out.grad * data).sum(axis=axis, keepdims=True)
            g = (out.grad - data * dot) / safe
            x.grad += np.where(norm == 0.0, 0.0, g)

    out._backward = backward if out.requires_grad else None
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross entropy over rows of ``logits``.

    ``targets`` is either an int array of class ids or a float array of
    one-hot/probability rows with the same shape as ``logits``.
    """
    if logits.ndim != 2:
        raise ShapeMismatch("cross_entropy", logits.shape)
    targets = np.asarray(targets)
    n, v = logits.shape
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))).reshape(-1)
    if targets.ndim == 1:
        if targets.shape[0] != n:
            raise ShapeMismatch("cross_entropy", logits.shape, targets.shape)
        picked = z[np.arange(n), targets]
        onehot = None
    else:
        if targets.shape != logits.shape:
            raise ShapeMismatch("cross_entropy", logits.shape, targets.shape)
        picked = (z * targets).sum(axis=1)
        onehot = targets
    data = np.asarray((lse - picked).mean(), dtype=z.dtype)
    out = _make(data, (logits,), None)

    def backward():
        if logits.requires_grad:
            p = np.exp(z - lse[:, None])
            if onehot is None:
                p[np.arange(n), targets] -= 1.0
            else:
                p = p - onehot
            logits.grad += p * (out.grad / n)

    out._backward = backward if out.requires_grad else None
    return out


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d_head) + mask) v over the last two axes.

    ``mask`` is additive (large negative on disallowed key positions) and
    must broadcast against the score shape.
    """
    dh = q.shape[-1]
    scores = scale(matmul(q, swap_last2(k)), 1.0 / float(np.sqrt(dh)))
    if mask is not None:
        scores = add(scores, Tensor(np.asarray(mask, dtype=q.dtype)))
    return matmul(softmax(scores, axis=-1), v)


# ---- reductions ----

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    out = _make(data, (x,), None)

    def backward():
        if x.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x.grad += np.broadcast_to(g, x.shape)

    out._backward = backward if out.requires_grad else None
    return out


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties route the gradient to the first maximum."""
    data = x.data.max(axis=axis, keepdims=keepdims)
    if axis is None:
        hot = np.zeros(x.data.size, dtype=x.dtype)
        hot[int(x.data.argmax())] = 1.0
        hot = hot.reshape(x.shape)
    else:
        idx = np.expand_dims(x.data.argmax(axis=axis), axis)
        hot = np.zeros_like(x.data)
        np.put_along_axis(hot, idx, 1.0, axis=axis)
    out = _make(data, (x,), None)

    def backward():
        if x.requires_grad:
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axis) if axis is not None else g
            x.grad += hot * g

    out._backward = backward if out.requires_grad else None
    return out


# ---- shape manipulation ----

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _make(x.data.reshape(shape), (x,), None)

    def backward():
        if x.requires_grad:
            x.grad += out.grad.reshape(x.shape)

    out._backward = backward if out.requires_grad else None
    return out


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = _make(x.data.transpose(axes), (x,), None)
    inv = np.argsort(axes)

    def backward():
        if x.requires_grad:
            x.grad += out.grad.transpose(inv)

    out._backward = backward if out.requires_grad else None
    return out


def swap_last2(x: Tensor) -> Tensor:
    out = _make(x.data.swapaxes(-1, -2), (x,), None)

    def backward():
        if x.requires_grad:
            x.grad += out.grad.swapaxes(-1, -2)

    out._backward = backward if out.requires_grad else None
    return out


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = _make(np.concatenate([t.data for t in ts], axis=axis), ts, None)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for t, start, stop in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(int(start), int(stop))
                t.grad += out.grad[tuple(sl)]

    out._backward = backward if out.requires_grad else None
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = _make(x.data[sl], (x,), None)

    def backward():
        if x.requires_grad:
            x.grad[sl] += out.grad

    out._backward = backward if out.requires_grad else None
    return out


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along axis 0 (duplicate indices allowed)."""
    idx = np.asarray(idx)
    out = _make(x.data[idx], (x,), None)

    def backward():
        if x.requires_grad:
            np.add.at(x.grad, idx, out.grad)

    out._backward = backward if out.requires_grad else None
    return out


def gather_positions(x: Tensor, batch_idx: np.ndarray, pos_idx: np.ndarray) -> Tensor:
    """Gather rows (batch_idx[i], pos_idx[i], :) of a (B, L, D) tensor."""
    batch_idx = np.asarray(batch_idx)
    pos_idx = np.asarray(pos_idx)
    out = _make(x.data[batch_idx, pos_idx], (x,), None)

    def backward():
        if x.requires_grad:
            np.add.at(x.grad, (batch_idx, pos_idx), out.grad)

    out._backward = backward if out.requires_grad else None
    return out

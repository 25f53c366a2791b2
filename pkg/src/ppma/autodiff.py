"""Reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray plus tape bookkeeping; each op records its parents
and a closure producing parent gradients. The op set is the closed ViT
vocabulary: matmul, add, mul/scale, GELU, layer norm, softmax (+ fused
cross-entropy), reshape/transpose, gather/concat/broadcast, sum/mean, dropout.

Every forward op checks its output for NaN/Inf (raises NumericsError) unless
finite checks are suspended. Reductions use numpy's fixed evaluation order, so
identical seeds give bit-identical training trajectories.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from ppma.backend import kernels

__all__ = [
    "Tensor",
    "NumericsError",
    "tensor",
    "no_grad",
    "finite_checks",
    "add",
    "mul",
    "scale",
    "matmul",
    "linear",
    "gelu",
    "layer_norm",
    "softmax",
    "softmax_cross_entropy",
    "reshape",
    "transpose",
    "gather_rows",
    "concat",
    "broadcast_to",
    "tsum",
    "tmean",
    "tmax",
    "dropout",
    "backward",
]


class NumericsError(ArithmeticError):
    """A forward op produced NaN or Inf."""


_grad_enabled = True
_finite_checks = True


@contextlib.contextmanager
def no_grad():
    """Suspend tape recording (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

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

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # Operator sugar; constants are treated as non-differentiable leaves.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), scale(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), grad_fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), grad_fn, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)  # a numpy float64 scalar would silently promote float32 data
    data = a.data * s

    def grad_fn(g):
        return (g * s,)

    return _make(data, (a,), grad_fn, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.shape[-1]} vs {b.shape[-2]}"
        )
    data = a.data @ b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), grad_fn, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w + b over the last axis, computed as one flattened matmul.

    Equivalent to matmul+add but collapses leading axes into a single GEMM,
    which is much faster than numpy's per-slice batched matmul.
    """
    d_in, d_out = w.shape
    if x.shape[-1] != d_in:
        raise ValueError(f"linear input dim {x.shape[-1]} does not match weight {d_in}")
    lead = x.shape[:-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, d_in))
    out2 = x2 @ w.data
    if b is not None:
        out2 += b.data
    parents = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d_out))
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out2.reshape(*lead, d_out), parents, grad_fn, "linear")


def gelu(x: Tensor) -> Tensor:
    flat = np.ascontiguousarray(x.data.reshape(-1))
    data, cdf = kernels.gelu_forward(flat)

    def grad_fn(g):
        gflat = np.ascontiguousarray(g.reshape(-1))
        return (kernels.gelu_backward(gflat, flat, cdf).reshape(x.shape),)

    return _make(data.reshape(x.shape), (x,), grad_fn, "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d <= 0:
        raise ValueError("layer_norm needs a non-empty last axis")
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    out2, xhat, inv_std = kernels.layer_norm_forward(
        x2, np.ascontiguousarray(gain.data), np.ascontiguousarray(bias.data), eps
    )

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        dx, dgain, dbias = kernels.layer_norm_backward(
            g2, xhat, inv_std, np.ascontiguousarray(gain.data)
        )
        return dx.reshape(x.shape), dgain, dbias

    return _make(out2.reshape(x.shape), (x, gain, bias), grad_fn, "layer_norm")


def softmax(x: Tensor) -> Tensor:
    d = x.shape[-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y2 = kernels.softmax_forward(x2)

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        return (kernels.softmax_backward(g2, y2).reshape(x.shape),)

    return _make(y2.reshape(x.shape), (x,), grad_fn, "softmax")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -sum(label * log softmax(logit)).

    `labels` are soft targets (one-hot or blended); each row must sum to 1.
    """
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if logits.ndim != 2 or lab.shape != logits.shape:
        raise ValueError("expected matching 2-D logits and labels")
    row_sums = lab.sum(axis=1)
    if np.max(np.abs(row_sums - 1.0)) > 1e-6:
        raise ValueError("label rows must sum to 1 (one-hot or blended)")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprob = shifted - lse
    n = z.shape[0]
    loss = -float(np.sum(lab * logprob)) / n
    data = np.asarray(loss, dtype=z.dtype)

    def grad_fn(g):
        p = np.exp(logprob)
        return (((p - lab) * (g / n)).astype(z.dtype, copy=False),)

    return _make(data, (logits,), grad_fn, "softmax_cross_entropy")


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _make(data, (x,), grad_fn, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = np.argsort(axes)

    def grad_fn(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make(data, (x,), grad_fn, "transpose")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Row selection along the token axis.

    1-D x with 1-D idx, 2-D x with 1-D idx (shared rows), or 3-D x (B, N, D)
    with 2-D idx (B, K) for per-batch-element selection. Duplicate indices
    accumulate gradients.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim == 3 and idx.ndim == 2:
        data = np.take_along_axis(x.data, idx[:, :, None], axis=1)

        def grad_fn(g):
            gx = np.zeros_like(x.data)
            kernels.scatter_add_rows(
                gx, np.ascontiguousarray(idx), np.ascontiguousarray(g)
            )
            return (gx,)

    elif x.ndim in (1, 2) and idx.ndim == 1:
        data = x.data[idx]

        def grad_fn(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            return (gx,)

    else:
        raise ValueError(f"unsupported gather arity: x ndim {x.ndim}, idx ndim {idx.ndim}")
    return _make(data, (x,), grad_fn, "gather_rows")


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.ascontiguousarray(
                np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            )
            for i in range(len(parts))
        )

    return _make(data, tuple(parts), grad_fn, "concat")


def broadcast_to(x: Tensor, shape) -> Tensor:
    data = np.broadcast_to(x.data, shape).copy()

    def grad_fn(g):
        return (_unbroadcast(g, x.shape),)

    return _make(data, (x,), grad_fn, "broadcast_to")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _make(np.asarray(data), (x,), grad_fn, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.shape[a] for a in axis]))
    else:
        count = x.shape[axis]
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, x.shape).copy(),)

    return _make(np.asarray(data), (x,), grad_fn, "mean")


def tmax(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient routes to the first argmax on ties."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    data = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(np.asarray(data), (x,), grad_fn, "max")


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    if not train or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    factor = 1.0 / (1.0 - p)
    data = x.data * keep * factor

    def grad_fn(g):
        return (g * keep * factor,)

    return _make(data, (x,), grad_fn, "dropout")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from `loss`.

    Repeated calls without zero_grad accumulate; a leaf consumed by two ops
    receives the sum of both path gradients. Intermediate nodes do not retain
    .grad (their gradients exist only transiently during the sweep).

    Gradient buffers are copy-on-write: a parent's slot holds the producing
    op's array until a second contribution forces a private sum, so the
    common single-consumer chain allocates nothing extra.
    """
    if loss.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to backpropagate")
    order = _topo_order(loss)
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = {id(loss)}
    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            if node.grad is None:
                node.grad = g.copy() if id(node) not in owned else g
            else:
                node.grad = node.grad + g
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            slot = local.get(pid)
            if slot is None:
                local[pid] = pg
            elif pid in owned:
                slot += pg
            else:
                local[pid] = slot + pg
                owned.add(pid)

"""A small reverse-mode autodiff layer over numpy arrays.

Operations executed while a :class:`Tape` is active (``with Tape() as tape``)
and touching a tensor with ``requires_grad`` are recorded in execution
order; ``tape.backward(loss)`` replays them in reverse and accumulates
``.grad`` on every tensor that requires one. Outside a tape the same
functions only compute forward values, which is what inference uses.

Arrays keep their dtype: training runs in float32, gradient checks in
float64.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

DEBUG_NANS = bool(os.environ.get("SHAPEGRAPH_DEBUG_NANS"))


class ShapeMismatch(ValueError):
    pass


class NonFinite(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of the differentiable operations run inside it."""

    _local = threading.local()

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self):
        stack = self._stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        self._stack().pop()
        return False

    @classmethod
    def _stack(cls) -> list:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    @classmethod
    def active(cls) -> "Tape | None":
        stack = cls._stack()
        return stack[-1] if stack else None

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor, grad=None) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded input."""
        if grad is None:
            if loss.data.size != 1:
                raise ShapeMismatch(f"backward needs a scalar loss or an explicit grad, got {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        for out, inputs, backward in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # leaves (parameters/inputs) are whatever was not produced by a record
        produced = {id(out) for out, _, _ in self.records}
        seen = set()
        for _, inputs, _ in self.records:
            for inp in inputs:
                if not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced or key in seen or key not in grads:
                    continue
                seen.add(key)
                g = grads[key]
                inp.grad = g if inp.grad is None else inp.grad + g
        self.records.clear()


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out_data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    if DEBUG_NANS and not np.all(np.isfinite(out_data)):
        raise NonFinite(f"non-finite value produced by {backward.__qualname__}")
    tape = Tape.active()
    needs = tape is not None and any(isinstance(i, Tensor) and i.requires_grad for i in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.records.append((out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    slope = x.dtype.type(slope)

    def backward(g):
        return (np.where(pos, g, g * slope),)

    return _record(np.where(pos, x.data, x.data * slope), (x,), backward)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


# --------------------------------------------------------------------------
# linear algebra / shape

def matmul(a, b) -> Tensor:
    """Matrix product with numpy's batching rules; 1-D operands are not supported."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: shapes {[x.shape for x in xs]} along axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, xs, backward)


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Index the second-to-last axis of ``x``.

    For ``x`` of shape (N, D) the result is ``x[indices]`` with shape
    ``indices.shape + (D,)``. For batched ``x`` of shape (B, N, D),
    ``indices`` has shape (B, ...) and rows are taken within each batch
    element.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim == 2:
        n, d = x.shape
        flat_idx = idx.ravel()
        out = x.data[idx]
        out_shape = idx.shape + (d,)
    elif x.ndim == 3:
        b, n, d = x.shape
        if idx.shape[0] != b:
            raise ShapeMismatch(f"gather_rows: batch {b} vs indices {idx.shape}")
        offsets = (np.arange(b) * n).reshape((b,) + (1,) * (idx.ndim - 1))
        flat_idx = (idx + offsets).ravel()
        out = x.data.reshape(b * n, d)[flat_idx].reshape(idx.shape + (d,))
        out_shape = idx.shape + (d,)
    else:
        raise ShapeMismatch(f"gather_rows expects 2-D or 3-D input, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    rows = x.data.size // d

    def backward(g):
        g2 = g.reshape(-1, d)
        scatter = sparse.csr_matrix(
            (np.ones(len(flat_idx), dtype=g.dtype), (flat_idx, np.arange(len(flat_idx)))),
            shape=(rows, len(flat_idx)),
        )
        return (np.asarray(scatter @ g2).reshape(x.shape),)

    return _record(out.reshape(out_shape), (x,), backward)


# --------------------------------------------------------------------------
# reductions

def sum_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), backward)


def mean_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = x.shape[axis]
    return mul(sum_over_axis(x, axis, keepdims), x.dtype.type(1.0 / n))


def _argmax_short(x: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Max/argmax over a short axis by comparing slabs; strict > keeps the first maximum."""
    slabs = np.moveaxis(x, axis, 0)
    values = slabs[0].copy()
    arg = np.zeros(values.shape, dtype=np.int64)
    for j in range(1, slabs.shape[0]):
        gt = slabs[j] > values
        np.copyto(values, slabs[j], where=gt)
        np.copyto(arg, j, where=gt)
    return values, arg


def max_over_axis(x: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max along ``axis``; gradient flows to the first maximal entry only."""
    axis = axis % x.ndim
    n = x.shape[axis]
    if n <= 32:
        out, arg = _argmax_short(x.data, axis)
    else:
        arg = np.argmax(x.data, axis=axis)
        out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        if n <= 32:
            slabs = np.moveaxis(gx, axis, 0)
            for j in range(n):
                np.copyto(slabs[j], g, where=arg == j)
        else:
            np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _record(out, (x,), backward), arg


# --------------------------------------------------------------------------
# layers

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-feature normalisation over every axis but the last.

    In training mode the batch statistics are used and the running
    estimates are updated in place as ``r <- momentum*r + (1-momentum)*batch``
    (biased batch variance). In eval mode the running estimates are used.
    """
    feat = x.shape[-1]
    if gamma.shape != (feat,) or beta.shape != (feat,):
        raise ShapeMismatch(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    dt = x.dtype.type
    if train:
        mu = x.data.mean(axis=axes)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
        xc = x.data - mu
    inv_std = dt(1) / np.sqrt(var + dt(eps))
    xhat = xc * inv_std
    out = gamma.data * xhat + beta.data
    m = x.data.size // feat

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data
        if train:
            gx = (inv_std / m) * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), backward)


def dropout(x: Tensor, keep_prob: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/keep_prob so eval is the identity."""
    if not train or keep_prob >= 1.0:
        return x
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / x.dtype.type(keep_prob)

    def backward(g):
        return (g * mask,)

    return _record(x.data * mask, (x,), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of (B, C) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    b = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1
        return (p * (g / b),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), backward)

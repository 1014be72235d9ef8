"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A Tape records primitive operations in creation order (a Wengert list); the
backward pass walks that list once in reverse, so every node's adjoint rule
fires exactly once. Only the primitives needed by the decoder and the training
losses are implemented.
"""

from __future__ import annotations

import math

import numpy as np

from .core import DataError


class Tape:
    """Creation-ordered record of Tensor nodes for one backward pass."""

    def __init__(self):
        self._nodes = []

    def _record(self, node):
        self._nodes.append(node)

    def backward(self, loss: "Tensor") -> None:
        """Seed d(loss)/d(loss) = 1 and accumulate gradients into leaf nodes."""
        if loss.tape is not self:
            raise DataError("loss node does not belong to this tape")
        if loss.data.size != 1:
            raise DataError(f"loss must be scalar, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)

    def __len__(self):
        return len(self._nodes)


class Tensor:
    """A value node. Leaves are created with `leaf`; ops build interior nodes."""

    __slots__ = ("data", "grad", "tape", "_backward")

    def __init__(self, data, tape=None, backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self._backward = backward
        if tape is not None:
            tape._record(self)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other, self.tape), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other, self.tape), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def leaf(data, tape: Tape) -> Tensor:
    return Tensor(data, tape)


def constant(data) -> Tensor:
    return Tensor(data)


def as_tensor(value, tape=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, None)


def _pick_tape(*tensors):
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    tape = _pick_tape(a, b)
    out = Tensor(a.data + b.data, tape)

    def backward(grad):
        a.accumulate(_unbroadcast(grad, a.data.shape))
        b.accumulate(_unbroadcast(grad, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    tape = _pick_tape(a, b)
    out = Tensor(a.data * b.data, tape)

    def backward(grad):
        a.accumulate(_unbroadcast(grad * b.data, a.data.shape))
        b.accumulate(_unbroadcast(grad * a.data, b.data.shape))

    out._backward = backward
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    tape = _pick_tape(a, b)
    out = Tensor(a.data / b.data, tape)

    def backward(grad):
        a.accumulate(_unbroadcast(grad / b.data, a.data.shape))
        b.accumulate(_unbroadcast(-grad * a.data / (b.data * b.data), b.data.shape))

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    tape = _pick_tape(a, b)
    out = Tensor(a.data @ b.data, tape)

    def backward(grad):
        ga = grad @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ grad
        a.accumulate(_unbroadcast(ga, a.data.shape))
        b.accumulate(_unbroadcast(gb, b.data.shape))

    out._backward = backward
    return out


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes), a.tape)
    inverse = tuple(np.argsort(axes))

    def backward(grad):
        a.accumulate(np.transpose(grad, inverse))

    out._backward = backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), a.tape)

    def backward(grad):
        a.accumulate(grad.reshape(a.data.shape))

    out._backward = backward
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    tape = _pick_tape(*tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tape)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * grad.ndim
            sl[axis] = slice(lo, hi)
            t.accumulate(grad[tuple(sl)])

    out._backward = backward
    return out


def take(a: Tensor, indices) -> Tensor:
    """Gather flat elements; the adjoint scatter-adds back."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data.reshape(-1)[indices], a.tape)

    def backward(grad):
        full = np.zeros(a.data.size)
        np.add.at(full, indices, grad)
        a.accumulate(full.reshape(a.data.shape))

    out._backward = backward
    return out


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.tape)

    def backward(grad):
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    out._backward = backward
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data), a.tape)

    def backward(grad):
        a.accumulate(grad * out.data)

    out._backward = backward
    return out


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data), a.tape)

    def backward(grad):
        a.accumulate(grad / a.data)

    out._backward = backward
    return out


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data), a.tape)

    def backward(grad):
        a.accumulate(grad * 0.5 / out.data)

    out._backward = backward
    return out


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data), a.tape)

    def backward(grad):
        a.accumulate(grad * (1.0 - out.data * out.data))

    out._backward = backward
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, a.tape)

    def backward(grad):
        inner = (grad * y).sum(axis=axis, keepdims=True)
        a.accumulate(y * (grad - inner))

    out._backward = backward
    return out


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Composed from primitives; the max shift is a constant and carries no grad."""
    a = as_tensor(a)
    shift = a.data.max(axis=axis, keepdims=True)
    e = exp(add(a, -shift))
    s = sum_(e, axis=axis, keepdims=True)
    result = add(log(s), shift)
    if not keepdims:
        result = reshape(result, np.squeeze(result.data, axis=axis).shape)
    return result


def normalize_rows_t(a: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Rows scaled to unit Euclidean norm; raises on a vanishing row."""
    a = as_tensor(a)
    sq = sum_(mul(a, a), axis=-1, keepdims=True)
    if (sq.data < min_norm**2).any():
        raise DataError("zero-norm row")
    return div(a, sqrt(sq))


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of `a` and rows of `b`."""
    return matmul(normalize_rows_t(a), transpose(normalize_rows_t(b), (1, 0)))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU, composed from primitives."""
    a = as_tensor(a)
    c = math.sqrt(2.0 / math.pi)
    inner = mul(add(a, mul(mul(mul(a, a), a), 0.044715)), c)
    return mul(mul(a, add(tanh(inner), 1.0)), 0.5)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    m = mean(a, axis=-1, keepdims=True)
    centered = add(a, mul(m, -1.0))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a mask drawn from `rng`."""
    if rate <= 0.0:
        return a
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return mul(a, constant(mask))


def backward(tape: Tape, loss: Tensor, leaves: dict) -> dict:
    """Run the tape backward and return gradients for every named leaf.

    Leaves that the loss never touched get zero gradients of matching shape.
    """
    tape.backward(loss)
    grads = {}
    for name, node in leaves.items():
        grads[name] = node.grad if node.grad is not None else np.zeros_like(node.data)
    return grads

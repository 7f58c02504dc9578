"""Reverse-mode automatic differentiation over dense float64 arrays.

Each op records a closure mapping the upstream gradient to parent gradients.
The closures are themselves written with :class:`Tensor` ops, so running a
backward pass with ``create_graph=True`` records a differentiable graph of the
gradient. That is what lets the poison objective (a function of model
gradients) be differentiated with respect to the poison inputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import kernels

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return sum_(self, axis=axis, keepdims=keepdims) * (1.0 / n)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


# ---------------------------------------------------------------- shape ops

def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _make(np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (sum_to(g, x.shape),), "broadcast_to")


def sum_to(x: Tensor, shape) -> Tensor:
    """Sum ``x`` down to ``shape`` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    return _make(data, (x,), lambda g: (broadcast_to(g, x.shape),), "sum_to")


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (reshape(g, x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (transpose(g, inv),), "transpose")


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(g.data, axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * x.ndim)
        return (broadcast_to(g, x.shape),)

    return _make(data, (x,), backward, "sum")


# ----------------------------------------------------------- elementwise ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        ga = sum_to(div(g, b), a.shape)
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), backward, "div")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return (mul(g, exp(a)),)

    return _make(out_data, (a,), backward, "exp")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        return (div(g, mul(2.0, sqrt(a))),)

    return _make(out_data, (a,), backward, "sqrt")


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),), "relu")


# ------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)), "matmul")


def im2col(x: Tensor, kernel: int, stride: int) -> Tensor:
    B, C, H, W = x.shape

    def backward(g):
        return (col2im(g, (B, C, H, W), kernel, stride),)

    return _make(kernels.im2col(x.data, kernel, stride), (x,), backward, "im2col")


def col2im(cols: Tensor, shape, kernel: int, stride: int) -> Tensor:
    B, C, H, W = shape
    data = kernels.col2im(np.ascontiguousarray(cols.data), C, H, W, kernel, stride)
    return _make(data, (cols,), lambda g: (im2col(g, kernel, stride),), "col2im")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Valid (unpadded) cross-correlation.

    ``x`` is (C, H, W) or (B, C, H, W); ``kernel`` is (O, C, K, K).
    Output spatial size is ``(H - K) // stride + 1``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, K, K2 = kernel.shape
    if Ck != C or K != K2 or K > H or K > W or stride < 1:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}, stride {stride}")
    Ho, Wo = kernels.conv_out_size(H, K, stride), kernels.conv_out_size(W, K, stride)
    cols = reshape(im2col(x, K, stride), (B * Ho * Wo, C * K * K))
    out = matmul(cols, transpose(reshape(kernel, (O, C * K * K))))
    if bias is not None:
        out = add(out, bias)
    out = transpose(reshape(out, (B, Ho, Wo, O)), (0, 3, 1, 2))
    if single:
        out = reshape(out, (O, Ho, Wo))
    return out


# ---------------------------------------------------------------- losses

def log_softmax(z: Tensor) -> Tensor:
    """Row-wise log-softmax of a (B, C) tensor, max-subtracted."""
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out: Tensor

    def backward(g):
        soft = exp(out)
        return (add(g, neg(mul(soft, sum_(g, axis=1, keepdims=True)))),)

    out = _make(out_data, (z,), backward, "log_softmax")
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-example cross-entropy. ``logits`` is (C,) or (B, C); returns (B,) or scalar."""
    single = logits.ndim == 1
    if single:
        logits = reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels))
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= C) or not np.all(labels == np.floor(labels)):
        raise ValueError(f"label out of range [0, {C}): {labels}")
    onehot = np.zeros((B, C))
    onehot[np.arange(B), labels.astype(np.int64)] = 1.0
    losses = neg(sum_(mul(log_softmax(logits), Tensor(onehot)), axis=1))
    if single:
        return reshape(losses, ())
    return losses


def squared_error(pred: Tensor, target) -> Tensor:
    """Per-example ``0.5 * (pred - target)**2`` for (B,) predictions."""
    diff = add(pred, Tensor(-np.asarray(target, dtype=np.float64)))
    return mul(0.5, mul(diff, diff))


# ---------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output: Tensor | None = None,
         create_graph: bool = False) -> list[Tensor]:
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    Raises ``ValueError`` if an input is not connected to ``output``.
    """
    if not output.requires_grad:
        raise ValueError("output is not connected to any tensor requiring grad")
    if grad_output is None:
        if output.data.size != 1:
            raise ValueError(f"grad_output required for non-scalar output of shape {output.shape}")
        grad_output = Tensor(np.ones_like(output.data))
    order = _toposort(output)
    reachable = {id(n) for n in order}
    for t in inputs:
        if id(t) not in reachable:
            raise ValueError(f"tensor {t!r} is not connected to the output")
    grads: dict[int, Tensor] = {id(output): grad_output}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else add(grads[key], pg)
    return [grads[id(t)] for t in inputs]


def backward(loss: Tensor, params: dict[str, Tensor], inputs: dict[str, Tensor] | None = None,
             create_graph: bool = False) -> dict[str, np.ndarray]:
    """Gradient map over named parameters and (optionally) designated inputs."""
    named = dict(params)
    if inputs:
        named.update(inputs)
    gs = grad(loss, list(named.values()), create_graph=create_graph)
    return {k: g.data for k, g in zip(named, gs)}

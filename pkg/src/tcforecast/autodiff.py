"""Tape-based reverse-mode automatic differentiation on numpy arrays.

Provides the primitives the forecasting network needs: dense and recurrent
algebra (matmul, elementwise arithmetic, sigmoid, tanh), softmax heads,
contrastive-loss pieces (log, abs, clamped division), and a gradient-reversal
operator for adversarial training. Double precision is the default so
finite-difference tolerances are meaningful; float32 is an opt-in fast mode.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

# Arguments of log/div are clamped at this floor before the operation.
EPS_FLOOR = 1e-9


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class NonFiniteError(AutodiffError):
    def __init__(self, op: str, index: int):
        super().__init__(f"non-finite values produced by node {index} ({op})")
        self.op = op
        self.index = index


class Node:
    """One recorded value on a tape. Value arrays are never mutated."""

    __slots__ = ("tape", "index", "value", "parents", "grad_fn", "requires_grad", "op")

    def __init__(self, tape, index, value, parents, grad_fn, requires_grad, op):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.index}, op={self.op}, shape={self.value.shape})"


class Tape:
    """Ordered operation record; node inputs always precede the node itself.

    ``backward`` accumulates into fresh per-call buffers, so running it twice
    on the same tape yields identical gradients (idempotence contract).
    """

    def __init__(self, dtype=DEFAULT_DTYPE, check_finite: bool = False):
        self.dtype = dtype
        self.check_finite = check_finite
        self.nodes: list[Node] = []

    def _record(self, value, parents, grad_fn, requires_grad, op) -> Node:
        value = np.asarray(value, dtype=self.dtype)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(op, len(self.nodes))
        node = Node(self, len(self.nodes), value, tuple(parents), grad_fn, requires_grad, op)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str = "leaf") -> Node:
        """Register a trainable input (a parameter)."""
        return self._record(value, (), None, True, name)

    def constant(self, value, name: str = "const") -> Node:
        return self._record(value, (), None, False, name)

    def backward(self, loss: Node) -> dict[Node, np.ndarray]:
        """Reverse sweep from a scalar loss; returns leaf-node gradients."""
        if loss.tape is not self:
            raise AutodiffError("loss node does not belong to this tape")
        if loss.value.ndim != 0:
            raise AutodiffError(f"backward requires a scalar loss, got shape {loss.value.shape}")
        acc: dict[int, np.ndarray] = {loss.index: np.ones((), dtype=self.dtype)}
        leaf_grads: dict[Node, np.ndarray] = {}
        for i in range(loss.index, -1, -1):
            grad = acc.pop(i, None)
            if grad is None:
                continue
            node = self.nodes[i]
            if not node.parents:
                if node.requires_grad:
                    leaf_grads[node] = grad
                continue
            parent_grads = node.grad_fn(grad)
            for parent, pgrad in zip(node.parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                if parent.index in acc:
                    acc[parent.index] = acc[parent.index] + pgrad
                else:
                    acc[parent.index] = pgrad
        return leaf_grads

    def gradients(self, loss: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
        """Gradients for the given leaves; unreachable leaves get exact zeros."""
        grads = self.backward(loss)
        return [grads.get(n, np.zeros_like(n.value)) for n in wrt]


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise AutodiffError("nodes from different tapes cannot be combined")
        return x
    return tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Node, b: Node) -> None:
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeError(op, a.value.shape, b.value.shape) from None


def add(a, b) -> Node:
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape("add", a, b)
    av, bv = a.value, b.value

    def grad_fn(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return tape._record(av + bv, (a, b), grad_fn, a.requires_grad or b.requires_grad, "add")


def sub(a, b) -> Node:
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape("sub", a, b)
    av, bv = a.value, b.value

    def grad_fn(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return tape._record(av - bv, (a, b), grad_fn, a.requires_grad or b.requires_grad, "sub")


def mul(a, b) -> Node:
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value

    def grad_fn(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape._record(av * bv, (a, b), grad_fn, a.requires_grad or b.requires_grad, "mul")


def neg(a: Node) -> Node:
    return a.tape._record(-a.value, (a,), lambda g: (-g,), a.requires_grad, "neg")


def div(a, b) -> Node:
    """Elementwise division; denominator magnitude clamped at EPS_FLOOR."""
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    small = np.abs(bv) < EPS_FLOOR
    b_safe = np.where(small, np.where(bv < 0, -EPS_FLOOR, EPS_FLOOR), bv)
    value = av / b_safe

    def grad_fn(g):
        ga = _unbroadcast(g / b_safe, av.shape)
        gb = _unbroadcast(np.where(small, 0.0, -g * av / (b_safe * b_safe)), bv.shape)
        return ga, gb

    return tape._record(value, (a, b), grad_fn, a.requires_grad or b.requires_grad, "div")


def matmul(a: Node, b: Node) -> Node:
    tape = a.tape
    b = _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape)

    def grad_fn(g):
        return g @ bv.T, av.T @ g

    return tape._record(av @ bv, (a, b), grad_fn, a.requires_grad or b.requires_grad, "matmul")


def sigmoid(a: Node) -> Node:
    x = a.value
    value = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def grad_fn(g):
        return (g * value * (1.0 - value),)

    return a.tape._record(value, (a,), grad_fn, a.requires_grad, "sigmoid")


def tanh(a: Node) -> Node:
    value = np.tanh(a.value)

    def grad_fn(g):
        return (g * (1.0 - value * value),)

    return a.tape._record(value, (a,), grad_fn, a.requires_grad, "tanh")


def softmax(a: Node, axis: int = -1) -> Node:
    shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        inner = np.sum(g * value, axis=axis, keepdims=True)
        return (value * (g - inner),)

    return a.tape._record(value, (a,), grad_fn, a.requires_grad, "softmax")


def log(a: Node) -> Node:
    """Natural log with the argument clamped at EPS_FLOOR from below."""
    clamped = np.maximum(a.value, EPS_FLOOR)
    mask = a.value > EPS_FLOOR

    def grad_fn(g):
        return (g * mask / clamped,)

    return a.tape._record(np.log(clamped), (a,), grad_fn, a.requires_grad, "log")


def absolute(a: Node) -> Node:
    sign = np.sign(a.value)

    def grad_fn(g):
        return (g * sign,)

    return a.tape._record(np.abs(a.value), (a,), grad_fn, a.requires_grad, "abs")


def clamp_min(a: Node, floor: float) -> Node:
    mask = a.value > floor

    def grad_fn(g):
        return (g * mask,)

    return a.tape._record(np.maximum(a.value, floor), (a,), grad_fn, a.requires_grad, "clamp_min")


def reduce_sum(a: Node, axis=None, keepdims: bool = False) -> Node:
    shape = a.value.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._record(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), grad_fn, a.requires_grad, "sum")


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    shape = a.value.shape
    count = a.value.size if axis is None else shape[axis]

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return a.tape._record(np.mean(a.value, axis=axis, keepdims=keepdims), (a,), grad_fn, a.requires_grad, "mean")


def concat(parts: Sequence[Node], axis: int = 1) -> Node:
    tape = parts[0].tape
    parts = [_lift(tape, p) for p in parts]
    base = list(parts[0].value.shape)
    for p in parts[1:]:
        other = list(p.value.shape)
        if len(other) != len(base) or any(o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)):
            raise ShapeError("concat", *[p.value.shape for p in parts])
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(parts)))

    value = np.concatenate([p.value for p in parts], axis=axis)
    return tape._record(value, tuple(parts), grad_fn, any(p.requires_grad for p in parts), "concat")


def take_cols(a: Node, start: int, stop: int) -> Node:
    if a.value.ndim != 2 or not (0 <= start <= stop <= a.value.shape[1]):
        raise ShapeError("take_cols", a.value.shape, (start, stop))
    shape = a.value.shape

    def grad_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, start:stop] = g
        return (out,)

    return a.tape._record(a.value[:, start:stop], (a,), grad_fn, a.requires_grad, "take_cols")


def reshape(a: Node, shape) -> Node:
    old = a.value.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return a.tape._record(a.value.reshape(shape), (a,), grad_fn, a.requires_grad, "reshape")


def gradient_reversal(a: Node, lam: float) -> Node:
    """Identity in the forward pass; backward multiplies the gradient by -lam."""
    if lam < 0:
        raise AutodiffError(f"gradient_reversal requires lam >= 0, got {lam}")

    def grad_fn(g):
        return (-lam * g,)

    return a.tape._record(a.value, (a,), grad_fn, a.requires_grad, "grl")


def scale(a: Node, c: float) -> Node:
    def grad_fn(g):
        return (c * g,)

    return a.tape._record(c * a.value, (a,), grad_fn, a.requires_grad, "scale")


def square(a: Node) -> Node:
    return mul(a, a)


def grad_check(fn: Callable[[dict], tuple[float, dict]], params: dict[str, np.ndarray], eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(params)`` must return ``(scalar_value, {name: gradient})``. The
    relative error for each parameter entry is
    ``|analytic - fd| / max(|analytic|, |fd|, 1e-12)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, analytic = fn(params)
    worst = 0.0
    for name, arr in params.items():
        grad = analytic[name]
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            f_plus, _ = fn(params)
            arr[idx] = orig - eps
            f_minus, _ = fn(params)
            arr[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"grad_check:{name}{idx}", -1)
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = float(np.asarray(grad)[idx])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-12)
            worst = max(worst, rel)
    return worst

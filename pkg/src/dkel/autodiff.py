"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Only the handful of primitives the networks and distillation losses need are
provided.  Each primitive is a :class:`Function` subclass; calling
``Function.apply`` runs the forward pass and, when any input requires a
gradient, records the node on the output tensor so :meth:`Tensor.backward`
can replay it in reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ParameterError, ShapeError, UsageError

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (teacher forwards, evaluation)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx")
    __array_priority__ = 1000  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, _ctx: Optional["Function"] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._ctx = _ctx

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same storage, cut from the tape; gradients never flow through it."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _lift(other))

    def __radd__(self, other):
        return Add.apply(_lift(other), self)

    def __sub__(self, other):
        return Sub.apply(self, _lift(other))

    def __rsub__(self, other):
        return Sub.apply(_lift(other), self)

    def __mul__(self, other):
        return Mul.apply(self, _lift(other))

    def __rmul__(self, other):
        return Mul.apply(_lift(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a Tensor is not a registered primitive")
        return Mul.apply(self, Tensor(1.0 / other))

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def sum(self) -> "Tensor":
        return Sum.apply(self)

    def mean(self) -> "Tensor":
        return Mean.apply(self)

    def relu(self) -> "Tensor":
        return ReLU.apply(self)

    # reverse pass ----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(x) into ``x.grad`` for every reachable ``x``
        with ``requires_grad``.  Repeated calls add to existing gradients."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            ctx = node._ctx
            if ctx is None:
                continue
            for inp, gi in zip(ctx.inputs, ctx.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for child in reversed(node._ctx.inputs):
                if child.requires_grad and id(child) not in seen:
                    stack.append((child, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """One recorded tape node.  Subclasses implement ``forward`` on raw arrays
    and ``backward`` returning one gradient (or None) per tensor input."""

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays, **kwargs) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:  # pragma: no cover
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        track = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=track, _ctx=fn if track else None)


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ self.b.T, self.a.T @ g


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0  # subgradient 0 at x == 0
        return np.maximum(x, 0.0)  # keeps NaN visible, unlike a masked select

    def backward(self, g):
        return (g * self.mask,)


class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum())

    def backward(self, g):
        return (np.broadcast_to(g, self.shape).copy(),)


class Mean(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.mean())

    def backward(self, g):
        return (np.full(self.shape, g / max(1, int(np.prod(self.shape)))),)


def _softmax(x: np.ndarray, tau: float) -> np.ndarray:
    z = x / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray, tau: float) -> np.ndarray:
    z = x / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class SoftmaxT(Function):
    def forward(self, x, tau):
        self.tau = tau
        self.p = _softmax(x, tau)
        return self.p

    def backward(self, g):
        p = self.p
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)) / self.tau,)


class LogSoftmaxT(Function):
    def forward(self, x, tau):
        self.tau = tau
        out = _log_softmax(x, tau)
        self.p = np.exp(out)
        return out

    def backward(self, g):
        return ((g - self.p * g.sum(axis=-1, keepdims=True)) / self.tau,)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def _check_tau(tau: float) -> float:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    return float(tau)


def softmax_t(x: Tensor, tau: float = 1.0) -> Tensor:
    """Row-wise softmax of ``x / tau``."""
    return SoftmaxT.apply(_lift(x), tau=_check_tau(tau))


def log_softmax_t(x: Tensor, tau: float = 1.0) -> Tensor:
    return LogSoftmaxT.apply(_lift(x), tau=_check_tau(tau))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(f"cannot concatenate shapes {[x.shape for x in tensors]}")
    return Concat.apply(*tensors, axis=axis)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    base = np.array(_lift(x).data, dtype=DTYPE)
    probe = Tensor(base.copy(), requires_grad=True)
    f(probe).backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(Tensor(base.copy())).item()
        flat[i] = orig - eps
        down = f(Tensor(base.copy())).item()
        flat[i] = orig
        numeric = (up - down) / (2 * eps)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst

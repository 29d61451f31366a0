"""A small tape-based reverse-mode autodiff tensor over numpy arrays.

Every differentiable op builds a result :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to one gradient per
parent.  :func:`backward` walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import ContractError, NonFiniteError

DEFAULT_DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def finite_checks_enabled() -> bool:
    return getattr(_state, "check_finite", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (thread-local)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = grad_enabled()
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle the post-op NaN/Inf check; timing runs switch it off."""
    prev = finite_checks_enabled()
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense array with an optional gradient tape.

    ``data`` is always a numpy array; float64 unless a float32 input is given.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100.0
    __array_ufunc__ = None  # make numpy operands defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # ---- construction helpers -------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        if finite_checks_enabled() and not np.all(np.isfinite(data)):
            raise NonFiniteError("operation produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = backward if needs else None
        return out

    # ---- array protocol --------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # ---- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return Tensor._make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise ContractError("only scalar exponents are supported")
        a = self.data
        return Tensor._make(a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other):
        from .ops import matmul

        return matmul(self, other)

    def __rmatmul__(self, other):
        from .ops import matmul

        return matmul(other, self)

    # ---- reductions and shape ops -----------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index) -> "Tensor":
        if isinstance(index, Tensor):
            raise ContractError("index with integer arrays, not Tensors")
        shape = self.shape
        dtype = self.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            if _is_basic_index(index):
                full[index] += g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._make(np.array(self.data[index]), (self,), back)

    # ---- elementwise functions ---------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def relu(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.maximum(a, 0), (self,), lambda g: (g * (a > 0),))

    def gelu(self) -> "Tensor":
        # tanh approximation
        a = self.data
        c = a.dtype.type(np.sqrt(2.0 / np.pi))
        inner = c * (a + 0.044715 * a**3)
        t = np.tanh(inner)
        out = 0.5 * a * (1.0 + t)

        def back(g):
            dinner = c * (1.0 + 3 * 0.044715 * a**2)
            return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner),)

        return Tensor._make(out, (self,), back)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward_from(root: Tensor, seed: np.ndarray, accumulate: bool = True) -> dict:
    """Propagate ``seed`` (same shape as ``root``) through the tape.

    Returns a dict mapping every reached leaf with ``requires_grad`` to its
    gradient from this call; with ``accumulate`` the leaves' ``.grad`` is
    also incremented.
    """
    if not root.requires_grad:
        return {}
    grads = {id(root): np.asarray(seed, dtype=root.dtype).reshape(root.shape)}
    leaves = {}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                leaves[node] = leaves.get(node, 0) + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    if not accumulate:
        return leaves
    for leaf, g in leaves.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


def backward(loss: Tensor) -> dict:
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. every leaf it reaches."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    return backward_from(loss, np.ones(loss.shape, dtype=loss.dtype))

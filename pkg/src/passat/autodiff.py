"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 array. Operations on tensors that require
gradients record a closure computing the vector-Jacobian product; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order. Tensors that do not require gradients record nothing, so
inference through the same code paths costs no tape memory.

Operator overloads make tensors interchangeable with ndarrays in the dynamics
code: ``ndarray * Tensor`` defers to ``Tensor.__rmul__`` because
``__array_ufunc__`` is disabled.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "as_tensor",
    "value",
    "concat",
    "leaky_relu",
    "clip",
    "tanh",
    "gather_rows",
    "segment_sum",
    "spmm",
    "linear_op",
    "stack",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Iterable["Tensor"], vjp) -> "Tensor":
        parents = tuple(parents)
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- backward -------------------------------------------------------------
    def backward(self, grad: np.ndarray | float | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape).copy()
        if not self.requires_grad:
            return

        # Iterative DFS; rollouts produce tapes far deeper than the recursion limit.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a / b,
            (self, other),
            lambda g: (
                _unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        a = self.data
        return Tensor._make(
            a**exponent,
            (self,),
            lambda g: (g * exponent * a ** (exponent - 1),),
        )

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __getitem__(self, index):
        a_shape = self.shape

        def vjp(g):
            out = np.zeros(a_shape)
            if _is_basic(index):
                out[index] = g  # basic indexing never repeats an element
            else:
                np.add.at(out, index, g)
            return (out,)

        return Tensor._make(self.data[index], (self,), vjp)

    # -- shape and reductions -------------------------------------------------
    def reshape(self, *shape):
        a_shape = self.shape
        return Tensor._make(
            self.data.reshape(*shape), (self,), lambda g: (g.reshape(a_shape),)
        )

    @property
    def T(self):
        return self.transpose()

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),)
        )

    def sum(self, axis=None):
        a_shape = self.shape

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a_shape).copy(),)

        return Tensor._make(np.sum(self.data, axis=axis), (self,), vjp)

    def mean(self, axis=None):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis) * (1.0 / n)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value(x) -> np.ndarray:
    """The raw array behind a tensor or array-like."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def concat(items: Sequence, axis: int = -1) -> Tensor:
    items = [as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in items], axis=axis),
        items,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(items: Sequence, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    n = len(items)
    return Tensor._make(
        np.stack([t.data for t in items], axis=axis),
        items,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return Tensor._make(x.data * scale, (x,), lambda g: (g * scale,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Hard projection onto [lo, hi]; gradient passes only strictly inside."""
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return Tensor._make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return Tensor._make(y, (x,), lambda g: (g * (1.0 - y * y),))


def gather_rows(x, index: np.ndarray) -> Tensor:
    """``x[index]`` along axis 0 with scatter-add adjoint."""
    x = as_tensor(x)
    n = x.shape[0]

    def vjp(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, index, g)
        return (out,)

    return Tensor._make(x.data[index], (x,), vjp)


def segment_sum(x, index: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``n_segments`` buckets given by ``index``."""
    x = as_tensor(x)
    out = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(out, index, x.data)
    return Tensor._make(out, (x,), lambda g: (g[index],))


def spmm(matrix: sp.spmatrix, x, adjoint: sp.spmatrix | None = None) -> Tensor:
    """Sparse-constant times dense-tensor product.

    ``adjoint`` lets a caller with a symmetric matrix skip the transpose.
    """
    x = as_tensor(x)
    mt = matrix.T if adjoint is None else adjoint
    return Tensor._make(
        np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(mt @ g),)
    )


def linear_op(x, forward: Callable, adjoint: Callable) -> Tensor:
    """Apply a fixed linear map given as a forward/adjoint function pair."""
    x = as_tensor(x)
    return Tensor._make(forward(x.data), (x,), lambda g: (adjoint(g),))

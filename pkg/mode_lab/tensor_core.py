"""Dense float64 matrices with reverse-mode differentiation.

Values are plain numpy arrays of shape ``(rows, cols)``; a token is a ``1 x P``
row and batches are stacked rows. Differentiable computations wrap values in
`Node` objects; every operation below accepts nodes or raw arrays and returns a
node that remembers its parents and the rule for pushing gradients back to them.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
import logging
from typing import Any

import numpy as np
import numpy.typing as npt

from mode_lab.exceptions import ContractError, NumericError, ShapeError


logger = logging.getLogger(__name__)

Matrix = npt.NDArray[np.float64]
BackwardFn = Callable[[Matrix], Sequence[Matrix | None]]


def as_matrix(value: npt.ArrayLike, *, name: str = "value") -> Matrix:
    """Convert `value` to a finite float64 matrix.

    One-dimensional input is promoted to a single row.
    """
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:  # noqa: PLR2004
        msg = f"{name} must be 2-D, got shape {arr.shape}"
        raise ShapeError(msg)
    if arr.size == 0:
        msg = f"{name} must be nonempty, got shape {arr.shape}"
        raise ShapeError(msg)
    if not np.isfinite(arr).all():
        msg = f"{name} contains non-finite entries"
        raise NumericError(msg)
    return arr


def as_vector(value: npt.ArrayLike, *, name: str = "vector") -> npt.NDArray[np.float64]:
    """Flatten a 1-D array or a single row/column matrix to 1-D."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 2 and 1 in arr.shape:  # noqa: PLR2004
        arr = arr.reshape(-1)
    if arr.ndim != 1 or arr.size == 0:
        msg = f"{name} must be a nonempty vector, got shape {arr.shape}"
        raise ShapeError(msg)
    return arr


class Node:
    """A value in a computation graph together with its accumulated gradient."""

    __array_ufunc__ = None  # let numpy defer to the reflected operators below
    __slots__ = ("_backward", "grad", "name", "parents", "requires_grad", "value")

    def __init__(
        self,
        value: npt.ArrayLike,
        parents: Sequence[Node] = (),
        backward: BackwardFn | None = None,
        *,
        requires_grad: bool = True,
        name: str = "",
    ):
        self.value = as_matrix(value, name=name or "node value")
        self.grad: Matrix = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def leaf(cls, value: npt.ArrayLike, name: str = "") -> Node:
        """A trainable input of the graph."""
        return cls(value, name=name)

    @classmethod
    def constant(cls, value: npt.ArrayLike, name: str = "") -> Node:
        """An input that never receives gradient (data, frozen weights)."""
        return cls(value, requires_grad=False, name=name)

    @property
    def shape(self) -> tuple[int, int]:
        rows, cols = self.value.shape
        return rows, cols

    def item(self) -> float:
        if self.value.shape != (1, 1):
            msg = f"item() needs a 1x1 node, got {self.value.shape}"
            raise ContractError(msg)
        return float(self.value[0, 0])

    def __matmul__(self, other: Operand) -> Node:
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> Node:
        return matmul(other, self)

    def __add__(self, other: Operand) -> Node:
        return add(self, other)

    def __radd__(self, other: Operand) -> Node:
        return add(other, self)

    def __sub__(self, other: Operand) -> Node:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Node:
        return sub(other, self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, requires_grad={self.requires_grad})"


Operand = Node | Matrix


def lift(value: Operand | npt.ArrayLike) -> Node:
    """Wrap raw arrays as constant nodes; nodes pass through."""
    if isinstance(value, Node):
        return value
    return Node.constant(value)


def _op(value: Matrix, parents: Sequence[Node], backward_fn: BackwardFn) -> Node:
    needs_grad = any(p.requires_grad for p in parents)
    return Node(
        value,
        parents if needs_grad else (),
        backward_fn if needs_grad else None,
        requires_grad=needs_grad,
    )


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        msg = f"{op}: shapes {a.shape} and {b.shape} differ"
        raise ShapeError(msg)


def matmul(a: Operand, b: Operand) -> Node:
    """Matrix product ``a @ b``."""
    na, nb = lift(a), lift(b)
    if na.shape[1] != nb.shape[0]:
        msg = f"matmul: inner dimensions of {na.shape} and {nb.shape} differ"
        raise ShapeError(msg)

    def backward_fn(g: Matrix) -> tuple[Matrix, Matrix]:
        return g @ nb.value.T, na.value.T @ g

    return _op(na.value @ nb.value, (na, nb), backward_fn)


def add(a: Operand, b: Operand) -> Node:
    na, nb = lift(a), lift(b)
    _same_shape("add", na, nb)
    return _op(na.value + nb.value, (na, nb), lambda g: (g, g))


def sub(a: Operand, b: Operand) -> Node:
    na, nb = lift(a), lift(b)
    _same_shape("sub", na, nb)
    return _op(na.value - nb.value, (na, nb), lambda g: (g, -g))


def mul(a: Operand, b: Operand) -> Node:
    """Elementwise product."""
    na, nb = lift(a), lift(b)
    _same_shape("mul", na, nb)
    return _op(na.value * nb.value, (na, nb), lambda g: (g * nb.value, g * na.value))


def square(a: Operand) -> Node:
    na = lift(a)
    return _op(na.value * na.value, (na,), lambda g: (2.0 * na.value * g,))


def scale(a: Operand, factor: float) -> Node:
    na = lift(a)
    return _op(na.value * factor, (na,), lambda g: (g * factor,))


def transpose(a: Operand) -> Node:
    na = lift(a)
    return _op(na.value.T.copy(), (na,), lambda g: (g.T,))


def columns(a: Operand, start: int, stop: int) -> Node:
    """Columns ``start:stop`` of `a`."""
    na = lift(a)
    cols = na.shape[1]
    if not 0 <= start < stop <= cols:
        msg = f"columns: slice {start}:{stop} out of range for shape {na.shape}"
        raise ShapeError(msg)

    def backward_fn(g: Matrix) -> tuple[Matrix]:
        full = np.zeros_like(na.value)
        full[:, start:stop] = g
        return (full,)

    return _op(na.value[:, start:stop].copy(), (na,), backward_fn)


def scale_rows(a: Operand, weights: Operand) -> Node:
    """Multiply row t of ``a`` (n x q) by ``weights[t, 0]`` (n x 1)."""
    na, nw = lift(a), lift(weights)
    if nw.shape != (na.shape[0], 1):
        msg = f"scale_rows: weights {nw.shape} do not match rows of {na.shape}"
        raise ShapeError(msg)

    def backward_fn(g: Matrix) -> tuple[Matrix, Matrix]:
        return g * nw.value, (g * na.value).sum(axis=1, keepdims=True)

    return _op(na.value * nw.value, (na, nw), backward_fn)


def outer(u: Operand | npt.ArrayLike, v: Operand | npt.ArrayLike) -> Node:
    """Dyadic product ``u ⊗ v`` of two vectors (rows or columns)."""
    nu, nv = lift(u), lift(v)
    if 1 not in nu.shape or 1 not in nv.shape:
        msg = f"outer: expected vectors, got shapes {nu.shape} and {nv.shape}"
        raise ShapeError(msg)
    uf, vf = nu.value.reshape(-1), nv.value.reshape(-1)

    def backward_fn(g: Matrix) -> tuple[Matrix, Matrix]:
        return (g @ vf).reshape(nu.shape), (g.T @ uf).reshape(nv.shape)

    return _op(np.outer(uf, vf), (nu, nv), backward_fn)


def softmax_row(v: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Numerically stable softmax of one vector of logits."""
    logits = as_vector(v, name="logits")
    if not np.isfinite(logits).all():
        msg = "softmax_row: logits must be finite"
        raise NumericError(msg)
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def _softmax_rows_value(x: Matrix) -> Matrix:
    shifted = np.exp(x - x.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def softmax_rows(a: Operand) -> Node:
    """Row-wise softmax; each row is one token's routing distribution."""
    na = lift(a)
    probs = _softmax_rows_value(na.value)

    def backward_fn(g: Matrix) -> tuple[Matrix]:
        inner = (g * probs).sum(axis=1, keepdims=True)
        return (probs * (g - inner),)

    return _op(probs, (na,), backward_fn)


def sum_all(a: Operand) -> Node:
    na = lift(a)
    return _op(
        np.array([[na.value.sum()]]),
        (na,),
        lambda g: (np.full_like(na.value, g[0, 0]),),
    )


def mean_all(a: Operand) -> Node:
    na = lift(a)
    size = na.value.size
    return _op(
        np.array([[na.value.mean()]]),
        (na,),
        lambda g: (np.full_like(na.value, g[0, 0] / size),),
    )


def _topological_order(output: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((parent, False) for parent in node.parents if id(parent) not in seen)
    return order


def backward(output: Node) -> None:
    """Fill ``grad`` of every node reachable from the scalar `output`.

    Gradients of reachable nodes are reset first, so calling this twice on the
    same graph gives the same result.
    """
    if output.shape != (1, 1):
        msg = f"backward needs a scalar (1x1) output, got shape {output.shape}"
        raise ContractError(msg)
    order = _topological_order(output)
    for node in order:
        node.grad = np.zeros_like(node.value)
    output.grad = np.ones_like(output.value)
    for node in reversed(order):
        if node._backward is None:
            continue
        for parent, grad in zip(node.parents, node._backward(node.grad)):
            if grad is not None and parent.requires_grad:
                parent.grad = parent.grad + grad


def finite_diff_grad(
    f: Callable[[list[Matrix]], Any],
    params: Sequence[npt.ArrayLike],
    h: float = 1e-5,
) -> list[Matrix]:
    """Central-difference gradient of a scalar function of several matrices."""
    if h <= 0:
        msg = f"step h must be positive, got {h}"
        raise ContractError(msg)
    base = [as_matrix(p, name=f"params[{i}]").copy() for i, p in enumerate(params)]

    def evaluate(values: list[Matrix]) -> float:
        result = float(np.asarray(f(values), dtype=np.float64).reshape(-1)[0])
        if not np.isfinite(result):
            msg = "finite_diff_grad: function returned a non-finite value"
            raise NumericError(msg)
        return result

    grads = []
    for k, param in enumerate(base):
        grad = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            original = param[idx]
            param[idx] = original + h
            upper = evaluate(base)
            param[idx] = original - h
            lower = evaluate(base)
            param[idx] = original
            grad[idx] = (upper - lower) / (2.0 * h)
        logger.debug("finite differences for params[%d] done (%d entries)", k, grad.size)
        grads.append(grad)
    return grads

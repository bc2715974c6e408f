"""Reverse-mode automatic differentiation over small dense tensors.

Graphs are built per mini-batch (define-by-run): a :class:`Graph` records every
:class:`Node` in creation order, so reverse creation order is a valid topological
order for the backward sweep. Values are float64 numpy arrays.

"""

import logging
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from gradfair.types import ShapeError


logger = logging.getLogger(__name__)

Tensor = np.ndarray

Vjp = Callable[[Tensor], tuple[Tensor, ...]]


class OpKind(str, Enum):
    """Operation kinds supported by the graph."""

    PARAM = "param"
    CONSTANT = "constant"
    MATMUL = "matmul"
    ADD = "add"
    SUBTRACT = "subtract"
    MULTIPLY = "multiply"
    RELU = "relu"
    SIGMOID = "sigmoid"
    SOFTPLUS = "softplus"
    SQUARE = "square"
    SUM = "sum"
    MEAN = "mean"
    SCALE = "scale"
    GRADIENT_REVERSAL = "gradient_reversal"
    IDENTITY = "identity"
    BATCH_NORM = "batch_norm"


class Node:
    """Computation graph vertex carrying a value and its adjoint.

    Parameters
    ----------
    graph: Graph
        The graph the node belongs to.
    op: OpKind
        The operation that produced the node.
    parents: Sequence[Node]
        Input nodes, all created before this one.
    value: np.ndarray
        Forward value.
    vjp: Callable, optional
        Maps the node adjoint onto one adjoint contribution per parent.
    name: str, optional
        Name of the node, required for parameters.

    """

    __slots__ = ("graph", "op", "parents", "value", "adjoint", "name", "index", "_vjp")

    def __init__(
        self,
        graph: "Graph",
        op: OpKind,
        parents: Sequence["Node"],
        value: Tensor,
        vjp: Optional[Vjp] = None,
        name: Optional[str] = None,
    ):
        self.graph = graph
        self.op = op
        self.parents = tuple(parents)
        self.value = value
        self.adjoint = np.zeros_like(value)
        self.name = name
        self.index = len(graph.nodes)
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f", name='{self.name}'" if self.name else ""
        return f"Node(op={self.op.value}, shape={self.shape}{label})"

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return subtract(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return multiply(self, other)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)


class Graph:
    """Tape of nodes for one forward/backward pass.

    A graph is single-threaded; distinct graphs share no state.

    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(
        self,
        op: OpKind,
        parents: Sequence[Node],
        value: Tensor,
        vjp: Optional[Vjp] = None,
        name: Optional[str] = None,
    ) -> Node:
        for parent in parents:
            if parent.graph is not self:
                raise ValueError(f"{op.value}: input {parent!r} belongs to another graph")
        value = np.asarray(value, dtype=np.float64)
        node = Node(self, op, parents, value, vjp=vjp, name=name)
        self.nodes.append(node)
        return node

    def param(self, value: Tensor, name: str) -> Node:
        """Leaf node whose adjoint is returned by :func:`backward`."""
        return self._append(OpKind.PARAM, (), _as_tensor(value), name=name)

    def constant(self, value: Tensor, name: Optional[str] = None) -> Node:
        """Leaf node holding data, its adjoint is computed but not returned."""
        return self._append(OpKind.CONSTANT, (), _as_tensor(value), name=name)


def _as_tensor(value) -> Tensor:
    return np.array(value, dtype=np.float64)


def _unbroadcast(grad: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum the adjoint of a broadcast result back onto an operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: OpKind, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(
            f"{kind.value}: incompatible shapes {a.shape} and {b.shape}"
        ) from e


# =====================================================================================
# Operations
# =====================================================================================
def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return a.graph._append(
        OpKind.MATMUL, (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g)
    )


def add(a: Node, b: Node) -> Node:
    _broadcast_shape(OpKind.ADD, a, b)
    sa, sb = a.shape, b.shape
    return a.graph._append(
        OpKind.ADD,
        (a, b),
        a.value + b.value,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def subtract(a: Node, b: Node) -> Node:
    _broadcast_shape(OpKind.SUBTRACT, a, b)
    sa, sb = a.shape, b.shape
    return a.graph._append(
        OpKind.SUBTRACT,
        (a, b),
        a.value - b.value,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def multiply(a: Node, b: Node) -> Node:
    _broadcast_shape(OpKind.MULTIPLY, a, b)
    av, bv = a.value, b.value
    return a.graph._append(
        OpKind.MULTIPLY,
        (a, b),
        av * bv,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.graph._append(
        OpKind.RELU, (x,), np.maximum(x.value, 0.0), lambda g: (g * mask,)
    )


def sigmoid(x: Node) -> Node:
    s = expit(x.value)
    return x.graph._append(OpKind.SIGMOID, (x,), s, lambda g: (g * s * (1.0 - s),))


def softplus(x: Node) -> Node:
    """Overflow-safe log(1 + exp(t)) computed as max(t, 0) + log1p(exp(-|t|))."""
    t = x.value
    value = np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))
    s = expit(t)
    return x.graph._append(OpKind.SOFTPLUS, (x,), value, lambda g: (g * s,))


def square(x: Node) -> Node:
    xv = x.value
    return x.graph._append(OpKind.SQUARE, (x,), xv * xv, lambda g: (2.0 * g * xv,))


def _check_axis(kind: OpKind, x: Node, axis: Optional[int]):
    if axis not in (None, 0):
        raise ShapeError(f"{kind.value}: axis must be None or 0, got {axis}")
    if axis == 0 and x.value.ndim == 0:
        raise ShapeError(f"{kind.value}: cannot reduce axis 0 of shape {x.shape}")


def sum(x: Node, axis: Optional[int] = None) -> Node:
    """Sum all elements, or the rows when ``axis=0``."""
    _check_axis(OpKind.SUM, x, axis)
    shape = x.shape
    return x.graph._append(
        OpKind.SUM,
        (x,),
        np.sum(x.value, axis=axis),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def mean(x: Node, axis: Optional[int] = None) -> Node:
    """Mean of all elements, or of the rows when ``axis=0``."""
    _check_axis(OpKind.MEAN, x, axis)
    shape = x.shape
    count = x.value.size if axis is None else shape[0]
    return x.graph._append(
        OpKind.MEAN,
        (x,),
        np.mean(x.value, axis=axis),
        lambda g: (np.broadcast_to(g / count, shape).copy(),),
    )


def scale(x: Node, factor: float) -> Node:
    factor = float(factor)
    if not np.isfinite(factor):
        raise ValueError(f"scale: factor must be finite, got {factor}")
    return x.graph._append(OpKind.SCALE, (x,), factor * x.value, lambda g: (factor * g,))


def gradient_reversal(x: Node) -> Node:
    """Identity in the forward pass, negates the adjoint in the backward pass."""
    return x.graph._append(
        OpKind.GRADIENT_REVERSAL, (x,), x.value.copy(), lambda g: (-g,)
    )


def identity(x: Node) -> Node:
    """Plain identity, the control counterpart of :func:`gradient_reversal`."""
    return x.graph._append(OpKind.IDENTITY, (x,), x.value.copy(), lambda g: (g,))


def batch_norm(x: Node, gamma: Node, beta: Node, eps: float) -> Node:
    """Normalise the rows of ``x`` with batch statistics then apply gamma and beta.

    Gradients flow through the batch mean and variance.

    """
    if x.value.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise ShapeError(
            f"batch_norm: incompatible shapes {x.shape} and {gamma.shape}"
        )
    n = x.shape[0]
    mu = x.value.mean(axis=0)
    inv_std = 1.0 / np.sqrt(x.value.var(axis=0) + eps)
    xhat = (x.value - mu) * inv_std
    gv = gamma.value

    def vjp(g: Tensor) -> tuple[Tensor, ...]:
        dxhat = g * gv
        dx = (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return x.graph._append(OpKind.BATCH_NORM, (x, gamma, beta), xhat * gv + beta.value, vjp)


_FORWARD = {
    OpKind.MATMUL: matmul,
    OpKind.ADD: add,
    OpKind.SUBTRACT: subtract,
    OpKind.MULTIPLY: multiply,
    OpKind.RELU: relu,
    OpKind.SIGMOID: sigmoid,
    OpKind.SOFTPLUS: softplus,
    OpKind.SQUARE: square,
    OpKind.SUM: sum,
    OpKind.MEAN: mean,
    OpKind.SCALE: scale,
    OpKind.GRADIENT_REVERSAL: gradient_reversal,
    OpKind.IDENTITY: identity,
    OpKind.BATCH_NORM: batch_norm,
}


def op_forward(kind: OpKind | str, inputs: Sequence[Node], **kwargs) -> Node:
    """Apply the operation ``kind`` to ``inputs``.

    Parameters
    ----------
    kind: OpKind | str
        Operation kind, e.g. "matmul" or OpKind.RELU.
    inputs: Sequence[Node]
        Input nodes from one graph.
    kwargs: dict
        Extra operation arguments, ``factor`` for scale, ``axis`` for sum and mean,
        ``eps`` for batch_norm.

    Returns
    -------
    node: Node
        New node holding the forward value.

    """
    kind = OpKind(kind)
    if kind not in _FORWARD:
        raise ValueError(f"'{kind.value}' is a leaf kind, create it from the graph")
    if not inputs:
        raise ValueError(f"{kind.value}: at least one input node is required")
    return _FORWARD[kind](*inputs, **kwargs)


def backward(loss: Node) -> dict[str, Tensor]:
    """Back-propagate from a scalar loss.

    Every adjoint in the graph is zeroed first so repeated calls are safe.

    Parameters
    ----------
    loss: Node
        Scalar node to differentiate.

    Returns
    -------
    grads: dict[str, np.ndarray]
        The adjoint of every parameter node keyed by parameter name.

    """
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    graph = loss.graph
    for node in graph.nodes:
        node.adjoint = np.zeros_like(node.value)
    loss.adjoint = np.ones_like(loss.value)
    for node in reversed(graph.nodes[: loss.index + 1]):
        if node._vjp is None or not node.adjoint.any():
            continue
        for parent, contribution in zip(node.parents, node._vjp(node.adjoint)):
            parent.adjoint += contribution
    return {
        node.name: node.adjoint.copy()
        for node in graph.nodes
        if node.op is OpKind.PARAM
    }


def finite_difference(
    fn: Callable[[], float], array: Tensor, step: float = 1e-5
) -> Tensor:
    """Central finite-difference estimate of d fn / d array.

    ``array`` is perturbed in place and restored, ``fn`` must read it on each call.

    """
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = fn()
        flat[i] = original - step
        lower = fn()
        flat[i] = original
        grad.reshape(-1)[i] = (upper - lower) / (2.0 * step)
    return grad

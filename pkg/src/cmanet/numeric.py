"""
Dense float64 tensors with reverse-mode differentiation.

Only the operations the positioning network needs are provided. There is no
broadcasting: every binary operation requires identical shapes, and the two
row/column broadcasts the network uses (bias add, per-row scaling) are
explicit operations.

Example:
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    loss = total(relu(x @ w))
    ComputeGraph.from_output(loss).backward()
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from cmanet.errors import ContractError, DimensionError, NumericError

LAYER_NORM_EPS = 1e-5

Backward = Callable[[np.ndarray], None]


class Tensor:
    """A node of the compute graph: a value, its gradient and how it was produced."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_op", "_backward")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        _prev: tuple["Tensor", ...] = (),
        _op: str = "leaf",
    ):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._op = _op
        self._backward: Backward | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def op(self) -> str:
        return self._op

    @property
    def inputs(self) -> tuple["Tensor", ...]:
        return self._prev

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        """Add ``grad`` into this tensor's gradient (sums over all consumers)."""
        if grad.shape != self.data.shape:
            raise DimensionError("accumulate", self.data.shape, grad.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: float) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __getitem__(self, key: Any) -> "Tensor":
        return index(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"


def _node(
    data: np.ndarray, inputs: tuple[Tensor, ...], op: str, backward: Backward
) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad, _prev=inputs, _op=op)
    if requires_grad:
        out._backward = backward
    return out


def _expect_ndim(op: str, t: Tensor, ndim: int) -> None:
    if t.data.ndim != ndim:
        raise DimensionError(op, t.shape)


def _expect_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a (p×q) and b (q×r)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(grad @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ grad)

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def transpose(a: Tensor) -> Tensor:
    _expect_ndim("transpose", a, 2)

    def backward(grad: np.ndarray) -> None:
        a.accumulate(grad.T)

    return _node(a.data.T.copy(), (a,), "transpose", backward)


# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _expect_same("add", a, b)

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(grad)
        if b.requires_grad:
            b.accumulate(grad)

    return _node(a.data + b.data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _expect_same("sub", a, b)

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(grad)
        if b.requires_grad:
            b.accumulate(-grad)

    return _node(a.data - b.data, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    _expect_same("mul", a, b)

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(grad * b.data)
        if b.requires_grad:
            b.accumulate(grad * a.data)

    return _node(a.data * b.data, (a, b), "mul", backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(grad: np.ndarray) -> None:
        a.accumulate(grad * c)

    return _node(a.data * c, (a,), "scale", backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-q vector to every row of a p×q matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError("add_bias", x.shape, b.shape)

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(grad)
        if b.requires_grad:
            b.accumulate(grad.sum(axis=0))

    return _node(x.data + b.data, (x, b), "add_bias", backward)


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row i of a p×q matrix by w[i]."""
    if x.data.ndim != 2 or w.data.ndim != 1 or x.shape[0] != w.shape[0]:
        raise DimensionError("scale_rows", x.shape, w.shape)

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(grad * w.data[:, None])
        if w.requires_grad:
            w.accumulate((grad * x.data).sum(axis=1))

    return _node(x.data * w.data[:, None], (x, w), "scale_rows", backward)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is stable for large |x|
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)

    def backward(grad: np.ndarray) -> None:
        x.accumulate(grad * out * (1.0 - out))

    return _node(out, (x,), "sigmoid", backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(grad: np.ndarray) -> None:
        x.accumulate(grad * (1.0 - out * out))

    return _node(out, (x,), "tanh", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(grad: np.ndarray) -> None:
        x.accumulate(grad * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), "relu", backward)


# reductions and normalizations


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""

    def backward(grad: np.ndarray) -> None:
        x.accumulate(np.full(x.shape, float(grad)))

    return _node(np.asarray(x.data.sum()), (x,), "sum", backward)


def row_l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row of a p×q matrix.

    The gradient at a zero row is taken as zero.
    """
    _expect_ndim("row_l2_norm", x, 2)
    norms = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))

    def backward(grad: np.ndarray) -> None:
        safe = np.where(norms > 0, norms, 1.0)
        unit = np.where((norms > 0)[:, None], x.data / safe[:, None], 0.0)
        x.accumulate(unit * grad[:, None])

    return _node(norms, (x,), "row_l2_norm", backward)


def softmax_rows(x: Tensor) -> Tensor:
    _expect_ndim("softmax_rows", x, 2)
    if np.isnan(x.data).any():
        raise NumericError(f"softmax_rows: NaN in input of shape {x.shape}")

    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(grad: np.ndarray) -> None:
        inner = (grad * out).sum(axis=1, keepdims=True)
        x.accumulate(out * (grad - inner))

    return _node(out, (x,), "softmax_rows", backward)


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """(x - mean) / sqrt(var + eps) over a vector, population variance, no affine."""
    _expect_ndim("layer_norm", x, 1)
    if x.shape[0] < 1:
        raise ContractError("layer_norm on an empty vector")

    centered = x.data - x.data.mean()
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered) + eps)
    out = centered * inv_std

    def backward(grad: np.ndarray) -> None:
        n = x.shape[0]
        x.accumulate(
            inv_std / n * (n * grad - grad.sum() - out * np.dot(grad, out))
        )

    return _node(out, (x,), "layer_norm", backward)


# structural


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError("reshape", x.shape, shape)

    def backward(grad: np.ndarray) -> None:
        x.accumulate(grad.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), "reshape", backward)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise DimensionError("permute", x.shape, axes)
    inverse = tuple(np.argsort(axes))

    def backward(grad: np.ndarray) -> None:
        x.accumulate(np.transpose(grad, inverse))

    return _node(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), "permute", backward)


def index(x: Tensor, key: Any) -> Tensor:
    """Basic (slice/integer) indexing; the backward scatters into a zero tensor."""
    out = x.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def backward(grad: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[key] += grad
        x.accumulate(full)

    return _node(np.array(out, copy=True), (x,), "index", backward)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    _expect_ndim("columns", x, 2)
    return index(x, (slice(None), slice(start, stop)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join same-shaped tensors along a new axis."""
    if not tensors:
        raise ContractError("stack of an empty sequence")
    for t in tensors[1:]:
        _expect_same("stack", tensors[0], t)

    def backward(grad: np.ndarray) -> None:
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate(np.take(grad, i, axis=axis))

    data = np.stack([t.data for t in tensors], axis=axis)
    return _node(data, tuple(tensors), "stack", backward)


# graph


@dataclass
class ComputeGraph:
    """Topologically ordered view of everything an output depends on.

    The graph is rebuilt for every forward pass. ``nodes`` lists inputs before
    their consumers, so a reversed walk visits every node exactly once after
    all of its consumers have contributed to its gradient.
    """

    nodes: list[Tensor]

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(output, False)]
        # iterative post-order; recurrent graphs are too deep for recursion
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack_.append((node, True))
            for parent in reversed(node.inputs):
                if id(parent) not in visited:
                    stack_.append((parent, False))
        return cls(nodes=order)

    @property
    def output(self) -> Tensor:
        return self.nodes[-1]

    def node_ids(self) -> dict[int, int]:
        return {id(node): i for i, node in enumerate(self.nodes)}

    def describe(self) -> list[tuple[int, str, tuple[int, ...]]]:
        """(node id, op kind, input node ids) for every node."""
        ids = self.node_ids()
        return [
            (i, node.op, tuple(ids[id(p)] for p in node.inputs))
            for i, node in enumerate(self.nodes)
        ]

    def leaves(self) -> list[Tensor]:
        return [node for node in self.nodes if not node.inputs and node.requires_grad]

    def backward(self, grad: np.ndarray | None = None) -> None:
        output = self.output
        if grad is None:
            if output.data.size != 1:
                raise ContractError(
                    f"backward without a seed gradient on shape {output.shape}"
                )
            grad = np.ones_like(output.data)
        output.accumulate(np.asarray(grad, dtype=np.float64))

        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(output: Tensor) -> ComputeGraph:
    graph = ComputeGraph.from_output(output)
    graph.backward()
    return graph


def grad_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-4,
) -> float:
    """Compare analytic leaf gradients with central differences.

    Args:
        f: Rebuilds the graph from the current leaf values and returns a
            scalar tensor.
        leaves: Tensors (``requires_grad=True``) whose gradients are checked.
        h: Finite-difference step.
        floor: Lower bound of the relative-error denominator, so that entries
            whose gradient is numerically zero are compared absolutely.

    Returns:
        The worst elementwise |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    if h <= 0:
        raise ContractError(f"grad_check step must be positive, got {h}")

    for leaf in leaves:
        leaf.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: function value is not finite")
    backward(out)

    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        for idx in np.ndindex(leaf.shape):
            saved = leaf.data[idx]
            leaf.data[idx] = saved + h
            plus = f().item()
            leaf.data[idx] = saved - h
            minus = f().item()
            leaf.data[idx] = saved
            numeric = (plus - minus) / (2.0 * h)
            denom = max(abs(analytic[idx]), abs(numeric), floor)
            worst = max(worst, abs(analytic[idx] - numeric) / denom)
    return worst

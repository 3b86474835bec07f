"""
Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy array. Every operation on tensors that
require gradients records its parents and a closure mapping the output
gradient to one gradient per parent. ``backward`` walks the recorded graph
once in reverse topological order and then releases it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from utp.core.exceptions import GraphReleasedError, NonScalarError, ShapeError

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """N-dimensional float64 array participating in an autodiff graph."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        _op: str = "leaf",
    ):
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._released = False
        self.requires_grad = bool(requires_grad)
        # Leaves own a gradient buffer; interior nodes hand gradients on during backward.
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if self.requires_grad and self.is_leaf else None
        )

    # ==================== Properties ====================

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def op(self) -> str:
        return self._op

    @property
    def T(self) -> "Tensor":
        from utp.autograd import functional as F
        return F.transpose(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # ==================== Construction helpers ====================

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def ones(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape), requires_grad=requires_grad)

    @classmethod
    def scalar(cls, value: Number) -> "Tensor":
        return cls(np.float64(value))

    def item(self) -> float:
        if self.size != 1:
            raise NonScalarError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    # ==================== Graph ====================

    @staticmethod
    def from_op(
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: BackwardFn,
        op: str,
    ) -> "Tensor":
        """Create an op output, recording the graph only when some parent needs gradients."""
        for p in parents:
            if p._released:
                raise GraphReleasedError(f"{op}: input produced by a graph that was already backpropagated")
        if any(p.requires_grad for p in parents):
            return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op)
        return Tensor(data, _op=op)

    def backward(self) -> None:
        """Populate ``grad`` of every requires_grad leaf reachable from this scalar."""
        if self.size != 1:
            raise NonScalarError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise GraphReleasedError("backward called twice on the same graph; rebuild the forward pass")

        graph = ComputeGraph.trace(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(graph.nodes):
            t = node.output
            g = pending.pop(id(t), None)
            if g is None:
                continue
            if t.is_leaf:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            parent_grads = t._backward(g)
            for parent, pg in zip(t._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"{t.op}: gradient shape {pg.shape} does not match input shape {parent.shape}"
                    )
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

        for node in graph.nodes:
            t = node.output
            if not t.is_leaf:
                t._backward = None
                t._parents = ()
                t._released = True
        self._released = True

    # ==================== Operators ====================

    def __add__(self, other: Union["Tensor", Number]) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Number) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: Union["Tensor", Number]) -> "Tensor":
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other: Number) -> "Tensor":
        return add(neg(self), other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __mul__(self, other: Union["Tensor", Number]) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Number) -> "Tensor":
        return mul(self, other)

    def __truediv__(self, other: Number) -> "Tensor":
        if isinstance(other, Tensor):
            raise ShapeError("division is only defined by a Python scalar")
        return mul(self, 1.0 / other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from utp.autograd import functional as F
        return F.matmul(self, other)


@dataclass
class GraphNode:
    """One operation record: op kind, input node indices, output tensor."""

    op: str
    inputs: List[int]
    output: Tensor


@dataclass
class ComputeGraph:
    """Nodes reachable from a root, every node after all of its inputs."""

    nodes: List[GraphNode] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputeGraph":
        index: dict = {}
        nodes: List[GraphNode] = []
        # Iterative post-order DFS; graphs of a batched forward pass are deep.
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if id(t) in index:
                continue
            if expanded:
                index[id(t)] = len(nodes)
                nodes.append(GraphNode(op=t.op, inputs=[index[id(p)] for p in t._parents], output=t))
                continue
            stack.append((t, True))
            for p in reversed(t._parents):
                if id(p) not in index:
                    stack.append((p, False))
        return cls(nodes=nodes)


# ==================== Elementwise arithmetic ====================

def _as_tensor(x: Union[Tensor, Number]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor.scalar(x)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to one of the permitted operand shapes."""
    if grad.shape == shape:
        return grad
    if shape == () or shape == (1,):
        return np.asarray(grad.sum()).reshape(shape)
    # bias-add: (..., n) + (n,)
    return grad.reshape(-1, shape[-1]).sum(axis=0)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.size == 1 and b.ndim <= 1 or a.size == 1 and a.ndim <= 1:
        return
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 2 and b.shape[-1] == a.shape[0]:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Union[Tensor, Number], b: Union[Tensor, Number]) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g: np.ndarray):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor.from_op(out, (a, b), backward, "add")


def mul(a: Union[Tensor, Number], b: Union[Tensor, Number]) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def backward(g: np.ndarray):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return Tensor.from_op(out, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")

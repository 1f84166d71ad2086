"""Tape-based reverse-mode differentiation over numpy arrays.

Every op that touches a tensor with ``requires_grad`` appends a node to the
active :class:`Graph`. :func:`backward` walks the tape in reverse insertion
order, which is a valid reverse topological order because a node's inputs
always exist before the node itself.
"""
from __future__ import annotations

import contextlib
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEBUG = os.environ.get("INVOXEL_DEBUG", "0") not in ("", "0")

_state = threading.local()


def _local():
    if not hasattr(_state, "graph"):
        _state.graph = Graph()
        _state.dtype = np.dtype(np.float32)
        _state.grad_enabled = True
    return _state


def get_dtype() -> np.dtype:
    return _local().dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are created with.

    Training always runs in float32; float64 is meant for finite-difference
    checks only.
    """
    st = _local()
    prev = st.dtype
    st.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        st.dtype = prev


@contextlib.contextmanager
def no_grad():
    st = _local()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


class GraphError(RuntimeError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)
    generation: int = 0

    def record(self, kind, inputs, output, backward_fn) -> None:
        output.node_id = len(self.nodes)
        output._gen = self.generation
        self.nodes.append(Node(kind, tuple(inputs), output, backward_fn))

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1


def current_graph() -> Graph:
    return _local().graph


class Tensor:
    """Dense array that can take part in a differentiation graph.

    Leaf tensors created with ``requires_grad=True`` receive their gradient in
    ``.grad`` after :func:`backward`. Intermediate results carry a ``node_id``
    into the tape of the graph that produced them.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_gen", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        dtype = get_dtype()
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._gen = -1
        self.name = name

    # basic info
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=-1, keepdims=False):
        from . import ops
        return ops.max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` in a tensor and record it on the tape if needed.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``)
    per input, each already reduced to that input's shape.
    """
    out = Tensor(out_data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{kind}: non-finite output from finite inputs")
    st = _local()
    if st.grad_enabled and any(t.requires_grad for t in inputs):
        for t in inputs:
            if t.requires_grad and t.node_id is not None and t._gen != st.graph.generation:
                raise GraphError(f"{kind}: input belongs to a graph that was already consumed")
        out.requires_grad = True
        st.graph.record(kind, inputs, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The tape is consumed afterwards; intermediate tensors from it cannot be
    reused in a later graph.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = current_graph()
    if not loss.requires_grad:
        graph.clear()
        return
    if loss.node_id is None:
        loss.grad = _accumulate(loss.grad, np.ones_like(loss.data))
        graph.clear()
        return
    if loss._gen != graph.generation:
        raise GraphError("backward: graph already consumed")

    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[loss.node_id] = np.ones_like(loss.data)
    for idx in range(loss.node_id, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        grads[idx] = None
        node = graph.nodes[idx]
        in_grads = node.backward(g)
        for t, ig in zip(node.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            if t.node_id is None:
                t.grad = _accumulate(t.grad, ig)
            else:
                grads[t.node_id] = _accumulate(grads[t.node_id], ig)
    graph.clear()


def _accumulate(acc, g):
    if acc is None:
        return np.array(g, copy=True)
    return acc + g

"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small tape: tensors wrap numpy arrays (channels-last, rank
up to 4), and each op that touches a tracked tensor appends a node holding
the inputs plus a closure that maps the output gradient to input gradients.
Construction order is a valid topological order of the DAG, so the backward
pass simply walks reachable nodes by descending id, visiting each exactly
once.

Float32 is the working precision; float64 exists for the finite-difference
gradient-check suites.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np


class GraphError(RuntimeError):
    """Malformed backward request (non-scalar loss, broken ordering)."""


class NonFiniteError(ArithmeticError):
    """A forward value left the finite range (NaN or Inf)."""


_grad_enabled = True
_node_counter = 0


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (evaluation / long rollouts)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One recorded operation: inputs and the gradient closure."""

    __slots__ = ("op", "parents", "grad_fn", "id")

    def __init__(self, op: str, parents: Sequence["Tensor"],
                 grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        global _node_counter
        _node_counter += 1
        self.id = _node_counter
        self.op = op
        self.parents = tuple(parents)
        self.grad_fn = grad_fn


class Tensor:
    """Fixed-shape dense array, optionally tracked on the tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ValueError(f"rank {arr.ndim} tensor not supported (max 4)")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    # -- basic views -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def backward(self):
        backward(self)

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g


def make_result(data: np.ndarray, op: str, parents: Sequence[Tensor],
                grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap an op result, recording a node when taping applies."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, grad_fn)
    return out


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss.

    Gradients add into ``.grad`` of every tracked tensor; repeated calls
    without ``zero_grad`` accumulate.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.accumulate_grad(np.ones_like(loss.data))
    if loss.node is None:
        return

    # Collect reachable nodes; creation ids give the topological order.
    nodes: dict[int, Node] = {}
    owners: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        n = t.node
        if n is None or n.id in nodes:
            continue
        nodes[n.id] = n
        owners[n.id] = t
        for p in n.parents:
            if p.node is not None and p.node.id >= n.id:
                raise GraphError("cycle detected: input created after its consumer")
            stack.append(p)

    for nid in sorted(nodes, reverse=True):
        out = owners[nid]
        if out.grad is None:
            continue  # node feeds only untracked paths
        grads = nodes[nid].grad_fn(out.grad)
        for p, g in zip(nodes[nid].parents, grads):
            if g is None or not p.requires_grad:
                continue
            p.accumulate_grad(g)


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")

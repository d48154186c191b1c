"""Tensor type, tape recording and reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation-only forwards)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data).astype(dtype, copy=False)
    # float64 survives only when handed in explicitly as an array.
    arr = np.asarray(data) if isinstance(data, (np.ndarray, np.generic)) else np.asarray(data, dtype=DEFAULT_DTYPE)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """Dense float array that may take part in a recorded computation.

    Leaves are created directly; interior nodes are produced by primitives
    and remember their parents plus a backward rule. The tape is the set of
    these references hanging off the output, so it dies with the output.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op: Optional[str] = None

    # numpy-ish introspection
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        extra = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{extra})"

    # Identity hashing so tensors can key gradient maps.
    __hash__ = object.__hash__


def record(op: str, out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a primitive's output and, if needed, attach it to the tape.

    ``backward(g, needs)`` receives the upstream gradient and a tuple of
    booleans (one per parent) and returns per-parent gradients, ``None``
    where not needed.
    """
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: non-finite value in output")
    t = Tensor(out)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
        t._op = op
    return t


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _run_backward(loss: Tensor, targets: Optional[Iterable[Tensor]], retain_graph: bool) -> dict:
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    if targets is not None:
        wanted = {id(t) for t in targets}
        reach: dict = {}
        for node in order:  # parents precede children
            reach[id(node)] = id(node) in wanted or any(reach.get(id(p), False) for p in node._parents)
    else:
        reach = None

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        if reach is not None:
            needs = tuple(p.requires_grad and reach.get(id(p), False) for p in node._parents)
        else:
            needs = tuple(p.requires_grad for p in node._parents)
        parent_grads = node._backward(g, needs)
        for p, pg, need in zip(node._parents, parent_grads, needs):
            if not need or pg is None:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"{node._op} backward: gradient shape {pg.shape} != input shape {p.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._parents = ()
            node._backward = None
    return leaves


def backward(loss: Tensor, retain_graph: bool = False) -> dict:
    """Differentiate a scalar ``loss`` w.r.t. every leaf that requires grad.

    Returns ``{leaf: gradient Tensor}`` and also stores ``leaf.grad``. The
    tape below ``loss`` is released unless ``retain_graph`` is set.
    """
    leaves = _run_backward(loss, None, retain_graph)
    out = {}
    for leaf, g in leaves.items():
        leaf.grad = g
        out[leaf] = Tensor(g)
    return out


def grad(loss: Tensor, inputs: Sequence[Tensor], retain_graph: bool = False) -> list:
    """Gradients of ``loss`` w.r.t. ``inputs`` only; other leaves are skipped.

    Paths that do not lead to an input are never differentiated, which is
    what attacks want (no parameter gradients). Missing paths give zeros.
    """
    leaves = _run_backward(loss, inputs, retain_graph)
    return [leaves.get(x, np.zeros_like(x.data)) for x in inputs]

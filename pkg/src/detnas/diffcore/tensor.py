"""Tensor value type and the reverse-mode gradient sweep."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from detnas.errors import InputError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise InputError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@dataclass(eq=False)
class ComputeNode:
    """Record of one differentiable operation.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, in input order.
    """

    op: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    cache: dict = field(default_factory=dict)


class Tensor:
    """Numeric array with an optional gradient slot.

    Feature maps are rank-4 ``(N, C, H, W)``; parameters and
    architecture vectors use whatever rank they need.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[ComputeNode] = None
        self.name = name

    # -- introspection -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar (implemented in ops) ---------------------------
    def __add__(self, other):
        from detnas.diffcore import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from detnas.diffcore import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from detnas.diffcore import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from detnas.diffcore import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from detnas.diffcore import ops

        return ops.scale(self, -1.0)

    def __getitem__(self, index):
        from detnas.diffcore import ops

        return ops.getitem(self, index)

    def sum(self):
        from detnas.diffcore import ops

        return ops.sum(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record the graph edge.

    Custom differentiable operations outside this package use this hook.
    """
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = ComputeNode(op, tuple(inputs), backward_fn)
    return out


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every reachable leaf with d(loss)/d(leaf).

    Leaf gradients accumulate onto whatever is already stored.
    """
    if loss.data.size != 1:
        raise InputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topological_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = t.node.backward_fn(g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise AssertionError(f"{t.node.op}: grad shape {pg.shape} != {parent.shape}")
            pg = pg.astype(parent.dtype, copy=False)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

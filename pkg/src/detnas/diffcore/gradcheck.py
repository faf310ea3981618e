"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from detnas.diffcore import ops
from detnas.diffcore.tensor import Tensor, no_grad
from detnas.errors import InputError


def _scalarize(out: Tensor, projection: np.ndarray | None) -> Tensor:
    if projection is None:
        return ops.sum(out)
    return ops.sum(ops.mul(out, Tensor(projection.astype(out.dtype))))


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5, seed: int = 0) -> float:
    """Largest elementwise relative error between analytic and numeric gradients.

    A tensor-valued ``f`` is reduced to a scalar through a fixed random
    projection. The analytic gradient is taken at the inputs' own dtype;
    the central differences are always evaluated in float64 so that a
    32-bit gradient is measured against an accurate reference.
    Error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise InputError("eps must be positive")
    inputs = list(inputs)

    def at64(arrays):
        return f(*[Tensor(a, dtype=np.float64) for a in arrays])

    base = [t.data.astype(np.float64) for t in inputs]
    with no_grad():
        first = at64(base).data.copy()
        second = at64(base).data
    if not np.array_equal(first, second):
        raise InputError("gradcheck requires a deterministic function")

    projection = None
    if first.size != 1:
        projection = np.random.default_rng(seed).standard_normal(first.shape)

    leaves = [Tensor(t.data.copy(), requires_grad=True, dtype=t.dtype) for t in inputs]
    _scalarize(f(*leaves), projection).backward()

    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.astype(np.float64)
        numeric = np.empty(leaf.shape)
        for idx in np.ndindex(*leaf.shape):
            vals = []
            for sign in (1.0, -1.0):
                arrays = [b.copy() for b in base]
                arrays[k][idx] += sign * eps
                with no_grad():
                    vals.append(float(_scalarize(at64(arrays), projection).data))
            numeric[idx] = (vals[0] - vals[1]) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom, initial=0.0)))
    return worst

"""Weighted fusion of predecessor features at one FPN node."""

from __future__ import annotations

from typing import NamedTuple, Optional, Sequence

from detnas import diffcore as dc
from detnas.diffcore import Tensor
from detnas.errors import InputError
from detnas.kernelreuse import UnifiedKernel, compound_conv


class ActiveWidth(NamedTuple):
    """Output width chosen for a layer and its straight-through gate (1.0 forward)."""

    width: int
    gate: Optional[Tensor] = None


def apply_gate(x: Tensor, gate: Optional[Tensor]) -> Tensor:
    return x if gate is None else dc.mul(x, gate)


def fuse_node(preds: Sequence[Tensor], alpha_edge: Tensor, alpha_ops: Sequence[Tensor],
              kernels: Sequence[UnifiedKernel], expansions: Sequence, strides: Optional[Sequence[int]] = None,
              use_bias: bool = True) -> Tensor:
    """z = sum_i softmax(alpha_edge)_i * compound_conv(x_i, kernel_i, softmax(alpha_ops_i)).

    Each edge is one convolution. Edges of different sampled width are
    summed on their leading channels; the node is as wide as its widest
    edge. ``expansions`` holds an :class:`ActiveWidth` (or a plain width)
    per predecessor.
    """
    n = len(preds)
    if not (len(alpha_ops) == len(kernels) == len(expansions) == n) or alpha_edge.shape != (n,):
        raise InputError("fuse_node: one edge weight, op vector, kernel and expansion per predecessor")
    strides = [1] * n if strides is None else list(strides)
    edge_w = dc.softmax(alpha_edge)
    outs = []
    for i, (x, a_op, uk, exp, s) in enumerate(zip(preds, alpha_ops, kernels, expansions, strides)):
        exp = exp if isinstance(exp, ActiveWidth) else ActiveWidth(int(exp))
        y = compound_conv(x, uk, dc.softmax(a_op), stride=s, c_out=exp.width, use_bias=use_bias)
        y = apply_gate(y, exp.gate)
        outs.append(dc.mul(y, dc.getitem(edge_w, i)))
    hw = outs[0].shape[2:]
    if any(o.shape[2:] != hw for o in outs):
        raise InputError(f"fuse_node: edges disagree on spatial size {[o.shape[2:] for o in outs]}")
    width = max(o.shape[1] for o in outs)
    z = dc.pad_channels(outs[0], width)
    for o in outs[1:]:
        z = dc.add(z, dc.pad_channels(o, width))
    return z

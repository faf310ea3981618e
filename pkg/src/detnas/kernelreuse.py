"""Kernel reusing: every candidate convolution on an edge is a masked view
of one shared 5x5 weight bank, so the weighted mixture of candidates
collapses into a single convolution."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from detnas import diffcore as dc
from detnas.diffcore import Tensor
from detnas.errors import ConfigError, InputError

BANK = 5
CENTER = BANK // 2
# 1 / E[silu(z)^2] for z ~ N(0, 1): keeps activation scale through silu layers
SILU_GAIN = 2.81


class CandidateOp(enum.Enum):
    """Candidate convolution kinds: (kernel size, dilation, native padding)."""

    CONV1X1 = ("conv1x1", 1, 1, 0)
    CONV3X3 = ("conv3x3", 3, 1, 1)
    CONV5X5 = ("conv5x5", 5, 1, 2)
    CONV3X3_DIL2 = ("conv3x3_dilated2", 3, 2, 2)

    def __init__(self, label: str, k: int, dilation: int, padding: int):
        self.label = label
        self.k = k
        self.dilation = dilation
        self.padding = padding

    @property
    def receptive_field(self) -> int:
        return self.dilation * (self.k - 1) + 1

    @classmethod
    def from_label(cls, label: str) -> "CandidateOp":
        for op in cls:
            if op.label == label:
                return op
        raise InputError(f"unknown candidate op {label!r}")


# Down-sampling layers and FPN edges search all four; the second conv of a
# bottleneck searches the three spatial ones.
ALL_OPS = (CandidateOp.CONV1X1, CandidateOp.CONV3X3, CandidateOp.CONV5X5, CandidateOp.CONV3X3_DIL2)
BOTTLENECK_OPS = (CandidateOp.CONV3X3, CandidateOp.CONV5X5, CandidateOp.CONV3X3_DIL2)


def build_mask(op: CandidateOp, k: Optional[int] = None, dilation: Optional[int] = None) -> np.ndarray:
    """Centred 5x5 binary footprint of a candidate's taps.

    ``k``/``dilation`` override the op's geometry, which lets callers probe
    shapes that do not fit in the bank.
    """
    k = op.k if k is None else k
    d = op.dilation if dilation is None else dilation
    rf = d * (k - 1) + 1
    if rf > BANK:
        raise ConfigError(f"receptive field {rf} of k={k}, dilation={d} exceeds {BANK}")
    mask = np.zeros((BANK, BANK))
    offsets = (np.arange(k) - k // 2) * d + CENTER
    mask[np.ix_(offsets, offsets)] = 1.0
    return mask


@dataclass
class UnifiedKernel:
    """Shared 5x5 weight bank for one super-edge, plus one shared bias."""

    theta: Tensor
    bias: Optional[Tensor]
    candidates: tuple

    def __post_init__(self):
        if self.theta.ndim != 4 or self.theta.shape[2:] != (BANK, BANK):
            raise InputError(f"unified weights must be Cout x Cin x 5 x 5, got {self.theta.shape}")
        self.candidates = tuple(self.candidates)
        self.masks = np.stack([build_mask(op) for op in self.candidates])

    @classmethod
    def init(cls, c_out: int, c_in: int, rng: np.random.Generator, candidates: Sequence[CandidateOp] = ALL_OPS,
             bias: bool = True, dtype=None) -> "UnifiedKernel":
        dtype = dtype or dc.default_dtype()
        # fan-in of the uniform candidate mixture, the kernel seen at initialisation
        mix = np.mean([build_mask(op) for op in candidates], axis=0)
        bound = np.sqrt(3.0 * SILU_GAIN / (c_in * float((mix ** 2).sum())))
        theta = Tensor(rng.uniform(-bound, bound, (c_out, c_in, BANK, BANK)), requires_grad=True, dtype=dtype)
        b = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype) if bias else None
        return cls(theta, b, tuple(candidates))

    @property
    def c_out(self) -> int:
        return self.theta.shape[0]

    @property
    def c_in(self) -> int:
        return self.theta.shape[1]

    def param_count(self) -> int:
        n = self.theta.size
        return n + (self.bias.size if self.bias is not None else 0)

    def index(self, op: CandidateOp) -> int:
        try:
            return self.candidates.index(op)
        except ValueError:
            raise InputError(f"{op.label} is not a candidate of this edge") from None


def independent_param_count(c_in: int, c_out: int, candidates: Sequence[CandidateOp] = ALL_OPS) -> int:
    """Parameters if every candidate kept its own kernel and bias."""
    return sum(c_out * c_in * op.k * op.k + c_out for op in candidates)


def shared_param_count(c_in: int, c_out: int) -> int:
    return c_out * c_in * BANK * BANK + c_out


def _alpha_tensor(alpha, like: Tensor) -> Tensor:
    if isinstance(alpha, Tensor):
        return alpha
    return Tensor(np.asarray(alpha, dtype=like.dtype))


def mixed_mask(masks: np.ndarray, alpha) -> Tensor:
    """Sum_o alpha_o * M_o as a differentiable 5x5 tensor."""
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha, dtype=np.float64))
    if alpha.shape != (masks.shape[0],):
        raise InputError(f"alpha has shape {alpha.shape}, expected ({masks.shape[0]},)")
    flat = Tensor(masks.reshape(masks.shape[0], -1).astype(alpha.dtype))
    row = dc.matmul(dc.reshape(alpha, (1, -1)), flat)
    return dc.reshape(row, (BANK, BANK))


def compound_kernel(uk: UnifiedKernel, alpha, theta: Optional[Tensor] = None) -> Tensor:
    """theta * sum_o alpha_o M_o (elementwise); ``theta`` may be a channel slice."""
    theta = uk.theta if theta is None else theta
    return dc.mul(theta, mixed_mask(uk.masks, _alpha_tensor(alpha, theta)))


def compound_conv(x: Tensor, uk: UnifiedKernel, alpha, stride: int = 1, c_out: Optional[int] = None,
                  use_bias: bool = True) -> Tensor:
    """All candidates of an edge evaluated as one 5x5 convolution.

    The input's channel count selects the leading input slice of the bank;
    ``c_out`` selects the leading output filters.
    """
    c_in = x.shape[1]
    if c_in > uk.c_in:
        raise InputError(f"input has {c_in} channels, bank holds {uk.c_in}")
    c_out = uk.c_out if c_out is None else c_out
    if not 0 < c_out <= uk.c_out:
        raise InputError(f"c_out={c_out} outside (0, {uk.c_out}]")
    theta = uk.theta
    if c_out < uk.c_out:
        theta = dc.getitem(theta, (slice(0, c_out),))
    if c_in < uk.c_in:
        theta = dc.getitem(theta, (slice(None), slice(0, c_in)))
    weight = compound_kernel(uk, alpha, theta)
    bias = None
    if use_bias and uk.bias is not None:
        bias = uk.bias if c_out == uk.c_out else dc.getitem(uk.bias, (slice(0, c_out),))
    return dc.conv2d(x, weight, bias, stride=stride, padding=CENTER)


def extract_candidate_kernel(uk: UnifiedKernel, op: CandidateOp) -> np.ndarray:
    """Native k x k kernel of ``op`` (a copy), whose 5x5 embedding is M_o * theta."""
    uk.index(op)
    offsets = (np.arange(op.k) - op.k // 2) * op.dilation + CENTER
    return uk.theta.data[:, :, offsets[:, None], offsets[None, :]].copy()


def embed_kernel(kernel: np.ndarray, op: CandidateOp) -> np.ndarray:
    """Inverse of extraction: place a native kernel into a zero 5x5 bank."""
    out = np.zeros(kernel.shape[:2] + (BANK, BANK), dtype=kernel.dtype)
    offsets = (np.arange(op.k) - op.k // 2) * op.dilation + CENTER
    out[:, :, offsets[:, None], offsets[None, :]] = kernel
    return out

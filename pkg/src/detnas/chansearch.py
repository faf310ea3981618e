"""Dynamic channel-number search.

Expansion rates are sampled per layer with the Gumbel-argmax trick; the
Gumbel-softmax relaxation of the same draw carries gradients back to the
architecture weights. Sampled widths are realised by keeping the leading
filters of a layer and the leading input channels of its successor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from detnas import diffcore as dc
from detnas.diffcore import Tensor
from detnas.errors import ConfigError, InputError

UNIFORM_CLAMP = 1e-12

DOWNSAMPLE_RATES = (0.5, 0.75, 1.0)
BOTTLENECK_RATES = (0.5, 0.75, 1.0)
C3_RATES = (0.75, 1.0)


def channels_for(rate: float, base: int) -> int:
    """Exact e*C; non-integer widths are rejected rather than rounded."""
    width = Fraction(rate).limit_denominator(1000) * base
    if width.denominator != 1 or width <= 0:
        raise ConfigError(f"expansion {rate} of {base} channels is not a positive integer")
    return int(width)


@dataclass
class ExpansionChoice:
    candidates: tuple
    alpha: Tensor
    base_channels: int

    def __post_init__(self):
        self.candidates = tuple(self.candidates)
        if self.alpha.shape != (len(self.candidates),):
            raise InputError(f"alpha shape {self.alpha.shape} vs {len(self.candidates)} candidates")
        self.widths = tuple(channels_for(e, self.base_channels) for e in self.candidates)


@dataclass
class GumbelSample:
    """One Gumbel draw: hard one-hot, its relaxation, the noise and temperature.

    ``relaxed`` is a graph tensor (differentiable w.r.t. the logits it was
    computed from) when produced by :func:`sample`.
    """

    onehot: np.ndarray
    relaxed: Optional[Tensor]
    noise: np.ndarray
    tau: float

    @property
    def index(self) -> int:
        return int(np.argmax(self.onehot))


def gumbel_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(n), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


def _log_softmax_np(v: np.ndarray) -> np.ndarray:
    # same arithmetic as diffcore.log_softmax so hard and relaxed argmax agree
    z = v - v.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _logits(alpha) -> np.ndarray:
    arr = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError("architecture weights must be a non-empty vector")
    return arr if np.issubdtype(arr.dtype, np.floating) else arr.astype(np.float64)


def gumbel_onehot(alpha, rng: Optional[np.random.Generator], noise: Optional[np.ndarray] = None) -> GumbelSample:
    """Gumbel-argmax draw; passing ``noise`` (e.g. zeros) bypasses the stream."""
    logits = _logits(alpha)
    g = gumbel_noise(logits.size, rng) if noise is None else np.asarray(noise, dtype=np.float64)
    if g.shape != logits.shape:
        raise InputError(f"noise shape {g.shape} vs weights {logits.shape}")
    onehot = np.zeros(logits.shape)
    onehot[int(np.argmax(_log_softmax_np(logits) + g.astype(logits.dtype)))] = 1.0
    return GumbelSample(onehot=onehot, relaxed=None, noise=g, tau=float("nan"))


def gumbel_softmax(alpha, g, tau: float) -> Tensor:
    """softmax((log softmax(alpha) + g) / tau), differentiable w.r.t. alpha."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha, dtype=np.float64))
    g = np.asarray(g, dtype=alpha.dtype)
    if g.shape != alpha.shape:
        raise InputError(f"noise shape {g.shape} vs weights {alpha.shape}")
    perturbed = dc.add(dc.log_softmax(alpha), Tensor(g))
    return dc.softmax(dc.scale(perturbed, 1.0 / tau))


def sample(alpha: Tensor, rng: np.random.Generator, tau: float, noise: Optional[np.ndarray] = None) -> GumbelSample:
    """Hard and relaxed samples built from one shared noise draw."""
    hard = gumbel_onehot(alpha, rng, noise)
    hard.relaxed = gumbel_softmax(alpha, hard.noise, tau)
    hard.tau = tau
    return hard


def straight_through(s: GumbelSample) -> Tensor:
    """Forward value is exactly the one-hot; gradient flows through the relaxation."""
    if s.relaxed is None or s.relaxed.shape != s.onehot.shape:
        raise InputError("straight_through needs a relaxed vector built from the same draw")
    if s.relaxed.data[s.index] < s.relaxed.data.max():
        raise InputError("relaxed vector does not come from the same Gumbel noise as the one-hot")
    out = s.onehot.astype(s.relaxed.dtype)
    return dc.make_result("straight_through", out, (s.relaxed,), lambda g: (g,))


def deterministic_choice(alpha) -> np.ndarray:
    """Noise-free argmax one-hot (lowest index on ties)."""
    logits = _logits(alpha)
    onehot = np.zeros(logits.shape)
    onehot[int(np.argmax(logits))] = 1.0
    return onehot


def slice_out_channels(w, c: int):
    """Leading ``c`` filters of a C_out x C_in x k x k weight."""
    return _prefix(w, c, axis=0)


def slice_in_channels(w, c: int):
    """Leading ``c`` input channels of a C_out x C_in x k x k weight."""
    return _prefix(w, c, axis=1)


def _prefix(w, c: int, axis: int):
    size = w.shape[axis]
    if not 0 < c <= size:
        raise InputError(f"slice width {c} outside (0, {size}]")
    index = (slice(None),) * axis + (slice(0, c),)
    if isinstance(w, Tensor):
        return w if c == size else dc.getitem(w, index)
    return np.asarray(w)[index]


def concat_conv_to_sum(w, splits: Sequence[int]) -> list:
    """Split a convolution that follows a concat into per-input blocks.

    conv(concat(X_1..X_M), w) == sum_m conv(X_m, block_m).
    """
    splits = [int(s) for s in splits]
    if any(s <= 0 for s in splits) or sum(splits) != w.shape[1]:
        raise InputError(f"splits {splits} do not partition {w.shape[1]} input channels")
    bounds = np.cumsum([0] + splits)
    blocks = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        index = (slice(None), slice(int(lo), int(hi)))
        if isinstance(w, Tensor):
            blocks.append(w if len(splits) == 1 else dc.getitem(w, index))
        else:
            blocks.append(np.asarray(w)[index])
    return blocks


def temperature(step: int, total_steps: int, tau0: float = 5.0, tau_min: float = 0.1) -> float:
    """Exponential decay from ``tau0`` at step 0 to ``tau_min`` at the last step."""
    if not tau0 > tau_min > 0:
        raise ConfigError(f"need tau0 > tau_min > 0, got {tau0}, {tau_min}")
    if total_steps <= 0:
        return tau0 if step <= 0 else tau_min
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return tau0 * math.pow(tau_min / tau0, step / total_steps)

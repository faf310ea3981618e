"""Activation sites with optional unit-variance calibration at initialisation.

Without normalisation layers a deep SiLU stack has no stable activation
scale: any fixed init gain makes the signal either vanish or blow up with
depth. Calibration runs one no-grad forward pass on a seeded noise batch
and divides the weights feeding each activation by the standard deviation
of its pre-activation, in forward order, so every pre-activation starts at
unit scale. Biases must still be zero when this runs.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from detnas import diffcore as dc
from detnas.diffcore import Tensor
from detnas.errors import InputError

CALIBRATION_BATCH = 4
CALIBRATION_SIZE = 64
_active = False


@contextmanager
def calibrating():
    global _active
    prev, _active = _active, True
    try:
        with dc.no_grad():
            yield
    finally:
        _active = prev


def act(y: Tensor, feeding) -> Tensor:
    """SiLU of ``y``; while calibrating, first rescale ``feeding`` so ``y`` has unit std."""
    if _active:
        s = float(y.data.std())
        if s > 0:
            for w in feeding:
                w.data = (w.data / s).astype(w.dtype)
            y = Tensor(y.data / s, dtype=y.dtype)
    return dc.silu(y)


def noise_batch(rng: np.random.Generator, size: int = CALIBRATION_SIZE) -> Tensor:
    return Tensor(rng.random((CALIBRATION_BATCH, 3, size, size)))


def calibrate(run, biases) -> None:
    """Run ``run()`` (one forward pass) in calibration mode."""
    if any(np.any(b.data) for b in biases):
        raise InputError("calibration needs zero biases; call it right after initialisation")
    with calibrating():
        run()

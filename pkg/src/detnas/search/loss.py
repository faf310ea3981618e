"""Toy single-stage detection loss on per-scale grids."""

from __future__ import annotations

import numpy as np

from detnas import diffcore as dc
from detnas.diffcore import Tensor
from detnas.errors import InputError

PROB_CLAMP = 1e-7
N_BOX = 4


def _check(preds, targets) -> int:
    if len(preds) != len(targets):
        raise InputError(f"{len(preds)} prediction maps for {len(targets)} target scales")
    nc = None
    for p, t in zip(preds, targets):
        if p.ndim != 4:
            raise InputError(f"prediction maps must be N x C x h x w, got {p.shape}")
        n, c, h, w = p.shape
        if c < 1 + 1 + N_BOX:
            raise InputError(f"{c} channels cannot hold objectness, a class and {N_BOX} box terms")
        if t["obj"].shape != (n, 1, h, w):
            raise InputError(f"prediction grid {p.shape} does not match target grid {t['obj'].shape}")
        if nc is not None and c - 1 - N_BOX != nc:
            raise InputError("prediction maps disagree on the class count")
        nc = c - 1 - N_BOX
        if t["cls"].max(initial=-1) >= nc:
            raise InputError(f"target class {t['cls'].max()} outside the {nc} predicted classes")
    return nc


def detection_loss(preds, targets) -> Tensor:
    """Objectness BCE (mean over cells) + box squared error and class CE at positive cells.

    ``preds`` are raw maps with channels [objectness, classes..., 4 box terms];
    ``targets`` are the matching per-scale dicts (see ``grid_targets``). Box and
    class terms are normalised by the total number of positive cells.
    """
    preds, targets = list(preds), list(targets)
    nc = _check(preds, targets)
    n_pos = max(1.0, float(sum(t["obj"].sum() for t in targets)))
    total = None
    for p, t in zip(preds, targets):
        dtype = p.dtype
        obj_t = t["obj"].astype(dtype)
        prob = dc.clip(dc.sigmoid(dc.getitem(p, (slice(None), slice(0, 1)))), PROB_CLAMP, 1 - PROB_CLAMP)
        bce = dc.add(dc.mul(dc.log(prob), obj_t), dc.mul(dc.log(1.0 - prob), 1.0 - obj_t))
        term = dc.scale(dc.mean(bce), -1.0)

        pos = obj_t  # N x 1 x h x w
        box = dc.getitem(p, (slice(None), slice(1 + nc, 1 + nc + N_BOX)))
        resid = dc.sub(box, t["box"].astype(dtype))
        box_term = dc.sum(dc.mul(dc.square(resid), pos))

        logp = dc.log_softmax(dc.getitem(p, (slice(None), slice(1, 1 + nc))), axis=1)
        onehot = np.zeros(logp.shape, dtype=dtype)
        ni, yi, xi = np.nonzero(t["cls"] >= 0)
        onehot[ni, t["cls"][ni, yi, xi], yi, xi] = 1.0
        ce_term = dc.scale(dc.sum(dc.mul(logp, onehot)), -1.0)

        term = dc.add(term, dc.scale(dc.add(box_term, ce_term), 1.0 / n_pos))
        total = term if total is None else dc.add(total, term)
    return total

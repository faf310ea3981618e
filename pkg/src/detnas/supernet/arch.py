"""Architecture-parameter layout and storage.

Every searchable decision of a supernet is a named weight vector. The
names are a pure function of the :class:`SearchSpaceSpec`, so derivation
and counting never need the network object itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from detnas.chansearch import BOTTLENECK_RATES, C3_RATES, DOWNSAMPLE_RATES
from detnas.diffcore import Tensor
from detnas.errors import InputError
from detnas.kernelreuse import ALL_OPS, BOTTLENECK_OPS
from detnas.supernet.spec import SCALES, SearchSpaceSpec

FPN_BLOCKS = ("td", "bu")
# node scales per fusion block, in creation order
NODE_SCALES = {"td": (32, 16, 8), "bu": (8, 16, 32)}
N_INPUTS = len(SCALES)


@dataclass(frozen=True)
class Slot:
    """One searchable vector: its name, family and candidate list."""

    name: str
    family: str  # "ops" | "edges" | "expansion"
    candidates: tuple


def c3_names(prefix: str, depth: int) -> list:
    slots = [Slot(f"{prefix}.exp", "expansion", C3_RATES)]
    for j in range(depth):
        b = f"{prefix}.b{j}"
        slots += [
            Slot(f"{b}.exp1", "expansion", BOTTLENECK_RATES),
            Slot(f"{b}.op", "ops", BOTTLENECK_OPS),
            Slot(f"{b}.exp2", "expansion", BOTTLENECK_RATES),
        ]
    return slots


def layout(spec: SearchSpaceSpec) -> list:
    """All searchable slots of ``spec`` in forward order."""
    slots = []
    for i in range(spec.L_D):
        slots += [
            Slot(f"bb.down{i}.op", "ops", ALL_OPS),
            Slot(f"bb.down{i}.exp", "expansion", DOWNSAMPLE_RATES),
        ]
        if i < spec.L_C:
            slots += c3_names(f"bb.c3_{i}", spec.c3_depths[i])
    for blk in FPN_BLOCKS:
        for j in range(len(SCALES)):
            n_preds = N_INPUTS + j
            slots.append(Slot(f"{blk}.n{j}.edge", "edges", tuple(range(n_preds))))
            for p in range(n_preds):
                slots += [
                    Slot(f"{blk}.n{j}.p{p}.op", "ops", ALL_OPS),
                    Slot(f"{blk}.n{j}.p{p}.exp", "expansion", DOWNSAMPLE_RATES),
                ]
        for j in range(len(SCALES)):
            slots += c3_names(f"{blk}.c3_{j}", spec.fpn_depth)
    return slots


class ArchParams:
    """Named architecture-weight vectors (pre-softmax)."""

    def __init__(self, spec: SearchSpaceSpec, values: Optional[dict] = None, dtype=np.float32):
        self.spec = spec
        self.slots = {s.name: s for s in layout(spec)}
        self.vectors = {}
        for name, slot in self.slots.items():
            init = np.zeros(len(slot.candidates)) if values is None else np.asarray(values[name])
            if init.shape != (len(slot.candidates),):
                raise InputError(f"{name}: expected {len(slot.candidates)} weights, got {init.shape}")
            self.vectors[name] = Tensor(init, requires_grad=True, dtype=dtype, name=name)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.vectors[name]
        except KeyError:
            raise InputError(f"no architecture vector named {name!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self.vectors)

    def __len__(self) -> int:
        return len(self.vectors)

    def tensors(self) -> list:
        return list(self.vectors.values())

    def family(self, fam: str) -> list:
        return [self.vectors[n] for n, s in self.slots.items() if s.family == fam]

    def normalized(self, name: str) -> np.ndarray:
        v = self.vectors[name].data.astype(np.float64)
        e = np.exp(v - v.max())
        return e / e.sum()

    def entropy(self, fam: str) -> float:
        """Mean softmax entropy over the vectors of one family."""
        ents = []
        for name, slot in self.slots.items():
            if slot.family == fam:
                p = self.normalized(name)
                ents.append(float(-(p * np.log(np.clip(p, 1e-300, None))).sum()))
        return float(np.mean(ents)) if ents else float("nan")

    def to_dict(self) -> dict:
        return {name: t.data.astype(np.float64).tolist() for name, t in self.vectors.items()}

    def copy(self) -> "ArchParams":
        return ArchParams(self.spec, {n: t.data.copy() for n, t in self.vectors.items()},
                          dtype=next(iter(self.vectors.values())).dtype)

"""Exact size of the backbone and FPN search spaces."""

from __future__ import annotations

from decimal import ROUND_HALF_EVEN, Decimal
from math import comb, prod
from typing import NamedTuple

from detnas.chansearch import BOTTLENECK_RATES, C3_RATES, DOWNSAMPLE_RATES
from detnas.kernelreuse import ALL_OPS, BOTTLENECK_OPS
from detnas.supernet.arch import FPN_BLOCKS, N_INPUTS
from detnas.supernet.genotype import KEEP_EDGES
from detnas.supernet.spec import SCALES, SearchSpaceSpec

# op x expansion choices of one searchable down-sampling conv or FPN edge
EDGE_CHOICES = len(ALL_OPS) * len(DOWNSAMPLE_RATES)
# op x expansion choices of one bottleneck (conv2 op, one expansion)
BOTTLENECK_CHOICES = len(BOTTLENECK_OPS) * len(BOTTLENECK_RATES)
C3_CHOICES = len(C3_RATES)

SINGLE_C3_NOTE = (
    "note: the FPN closed form {12^6*[C(3,2)C(4,2)C(5,2)]*2*9^K_B}^2 has one C3 expansion factor "
    "per fusion block; the sizes here use one per scale (2^3*9^K_B), one C3 per fusion node."
)
TOTAL_NOTE = (
    "note: the total column is the product of the rounded backbone and FPN sizes; "
    "the exact s-level total rounds to 7.8e36, the rounded product gives 7.7e36."
)


class SpaceSize(NamedTuple):
    backbone: int
    fpn: int
    total: int

    def formatted(self) -> tuple:
        """Each exact size rounded to two significant figures."""
        return tuple(sig_figs(v) for v in self)

    def rounded_product(self) -> tuple:
        """Rounded backbone and FPN sizes, with the total taken as their product."""
        bb, fpn = sig_figs(self.backbone), sig_figs(self.fpn)
        return bb, fpn, sig_figs(Decimal(bb) * Decimal(fpn))


def sig_figs(n, digits: int = 2) -> str:
    """Scientific notation with ``digits`` significant figures, e.g. 7.9e11."""
    if n == 0:
        return "0"
    d = Decimal(n)
    exp = d.adjusted()
    q = d.scaleb(-exp).quantize(Decimal(1).scaleb(-(digits - 1)), rounding=ROUND_HALF_EVEN)
    if q >= 10:
        q, exp = q / 10, exp + 1
        q = q.quantize(Decimal(1).scaleb(-(digits - 1)))
    return f"{q}e{exp}"


def connection_types() -> int:
    """Ways to keep two predecessors at each node of one fusion block."""
    return prod(comb(N_INPUTS + j, KEEP_EDGES) for j in range(len(SCALES)))


def fusion_block_size(k_b: int, per_scale_c3: bool = True) -> int:
    n_edges = KEEP_EDGES * len(SCALES)
    c3 = C3_CHOICES ** (len(SCALES) if per_scale_c3 else 1)
    return EDGE_CHOICES ** n_edges * connection_types() * c3 * BOTTLENECK_CHOICES ** k_b


def count_search_space(spec: SearchSpaceSpec, per_scale_c3: bool = True) -> SpaceSize:
    """Exact sizes; ``per_scale_c3=False`` evaluates the single-C3-factor closed form instead."""
    backbone = EDGE_CHOICES ** spec.L_D * C3_CHOICES ** spec.L_C * BOTTLENECK_CHOICES ** spec.L_B
    fpn = fusion_block_size(spec.K_B, per_scale_c3) ** len(FPN_BLOCKS)
    return SpaceSize(backbone, fpn, backbone * fpn)

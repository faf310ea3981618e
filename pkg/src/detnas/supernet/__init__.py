"""Backbone and FPN supernet, genotypes, materialization and counting."""

from detnas.supernet.arch import FPN_BLOCKS, ArchParams, Slot, layout
from detnas.supernet.counting import SpaceSize, count_search_space, sig_figs
from detnas.supernet.fusion import ActiveWidth, fuse_node
from detnas.supernet.genotype import EdgeChoice, Genotype, LayerChoice, derive, forced_params, random_genotype
from detnas.supernet.graph import (
    DETERMINISTIC,
    SEARCH,
    ForwardContext,
    SuperNet,
    build_supernet,
    forward,
    head_channels,
    supernet_param_counts,
)
from detnas.supernet.materialize import DerivedNet, count_params_flops, materialize
from detnas.supernet.spec import LEVELS, PRESETS, SCALES, SearchSpaceSpec, preset

__all__ = [
    "ActiveWidth", "ArchParams", "DETERMINISTIC", "DerivedNet", "EdgeChoice", "FPN_BLOCKS", "ForwardContext",
    "Genotype", "LEVELS", "LayerChoice", "PRESETS", "SCALES", "SEARCH", "SearchSpaceSpec", "Slot", "SpaceSize",
    "SuperNet", "build_supernet", "count_params_flops", "count_search_space", "derive", "forced_params", "forward",
    "fuse_node", "head_channels", "layout", "materialize", "preset", "random_genotype", "sig_figs",
    "supernet_param_counts",
]

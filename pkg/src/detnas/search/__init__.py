"""Bi-level search loop, detection loss and data handling."""

from detnas.search.data import DetectionSet, grid_targets, split_dataset
from detnas.search.loss import detection_loss
from detnas.search.train import (
    METRIC_COLUMNS,
    SGD,
    BilevelConfig,
    SearchState,
    TrainMetrics,
    arch_step,
    make_state,
    run_search,
    supernet_loss,
    train_derived,
    weight_step,
)

__all__ = [
    "BilevelConfig", "DetectionSet", "METRIC_COLUMNS", "SGD", "SearchState", "TrainMetrics", "arch_step",
    "detection_loss", "grid_targets", "make_state", "run_search", "split_dataset", "supernet_loss", "train_derived", "weight_step",
]

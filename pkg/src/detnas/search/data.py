"""In-memory detection datasets, grid targets and the bi-level split."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from detnas.errors import ConfigError, InputError
from detnas.supernet.spec import SCALES


@dataclass
class DetectionSet:
    """Images (N x 3 x H x W) plus boxes and per-scale grid targets.

    ``boxes[i]`` is a list of (class, cx, cy, w, h) in normalized coordinates.
    ``targets[s]`` holds arrays ``obj`` (N x 1 x h x w), ``cls`` (N x h x w,
    -1 for background) and ``box`` (N x 4 x h x w) for stride ``s``.
    """

    images: np.ndarray
    boxes: list
    num_classes: int
    targets: dict = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise InputError(f"images must be N x 3 x H x W, got {self.images.shape}")
        if len(self.boxes) != len(self.images):
            raise InputError("one box list per image required")
        if self.targets is None:
            self.targets = grid_targets(self.boxes, self.images.shape[2:], self.num_classes)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, index) -> "DetectionSet":
        index = np.asarray(index, dtype=np.int64)
        targets = {s: {k: v[index] for k, v in t.items()} for s, t in self.targets.items()}
        return DetectionSet(self.images[index], [self.boxes[i] for i in index], self.num_classes, targets)

    def batches(self, batch_size: int, rng: np.random.Generator = None):
        """Yield subsets of ``batch_size`` (last one may be short); shuffled if ``rng`` is given."""
        if batch_size < 1:
            raise ConfigError("batch_size must be positive")
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for lo in range(0, len(self), batch_size):
            yield self.subset(order[lo:lo + batch_size])


def grid_targets(boxes: list, hw: tuple, num_classes: int, scales=SCALES) -> dict:
    """Assign each box to the cell holding its centre, at every scale.

    Box regression targets are the centre's offset inside the cell and the
    normalized width and height. A later box overwrites an earlier one that
    lands in the same cell.
    """
    H, W = hw
    n = len(boxes)
    out = {}
    for s in scales:
        gh, gw = H // s, W // s
        obj = np.zeros((n, 1, gh, gw), dtype=np.float32)
        cls = np.full((n, gh, gw), -1, dtype=np.int64)
        box = np.zeros((n, 4, gh, gw), dtype=np.float32)
        for i, sample_boxes in enumerate(boxes):
            for c, cx, cy, w, h in sample_boxes:
                if not 0 <= int(c) < num_classes:
                    raise InputError(f"class {c} outside [0, {num_classes})")
                gx, gy = min(int(cx * gw), gw - 1), min(int(cy * gh), gh - 1)
                obj[i, 0, gy, gx] = 1.0
                cls[i, gy, gx] = int(c)
                box[i, :, gy, gx] = (cx * gw - gx, cy * gh - gy, w, h)
        out[s] = {"obj": obj, "cls": cls, "box": box}
    return out


def split_dataset(dataset, ratio: float, seed: int) -> tuple:
    """Seeded disjoint split into (weight part, architecture part).

    The weight part gets round-half-up(ratio * N) samples.
    """
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot split an empty dataset")
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    n_w = math.floor(ratio * n + 0.5)
    if n_w == 0 or n_w == n:
        raise ConfigError(f"ratio {ratio} leaves one side of a {n}-sample split empty")
    order = np.random.default_rng(seed).permutation(n)
    idx_w, idx_a = np.sort(order[:n_w]), np.sort(order[n_w:])
    if hasattr(dataset, "subset"):
        return dataset.subset(idx_w), dataset.subset(idx_a)
    return [dataset[i] for i in idx_w], [dataset[i] for i in idx_a]

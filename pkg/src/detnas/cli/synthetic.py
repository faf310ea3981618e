"""Seeded synthetic detection data: coloured rectangles on noise."""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from detnas.errors import ConfigError, InputError
from detnas.search.data import DetectionSet, grid_targets

MANIFEST = "index.json"


@dataclass(frozen=True)
class SyntheticParams:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    num_classes: int = 3
    min_size: float = 0.15  # box side as a fraction of the image side
    max_size: float = 0.5
    noise: float = 0.25

    def validate(self) -> None:
        if self.image_size < 32 or self.image_size % 32:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be at least 1")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 0 <= min_objects <= max_objects")
        if not 0 < self.min_size <= self.max_size:
            raise ConfigError("need 0 < min_size <= max_size")
        if self.max_size > 1:
            raise ConfigError(f"objects of relative size {self.max_size} do not fit in the image")
        if round(self.min_size * self.image_size) < 1:
            raise ConfigError("min_size rounds to a zero-pixel box")


@dataclass
class SyntheticSample:
    image: np.ndarray  # 3 x H x W, values in [0, 1]
    boxes: list  # (class, cx, cy, w, h), normalized
    targets: dict = None


def palette(n: int) -> np.ndarray:
    """``n`` saturated colours with evenly spaced hues; colour index = class."""
    return np.array([colorsys.hsv_to_rgb(i / n, 0.9, 0.95) for i in range(n)], dtype=np.float32)


def gen_synthetic_dataset(n: int, params: SyntheticParams = SyntheticParams(), seed: int = 0) -> list:
    if n < 1:
        raise ConfigError("dataset size must be at least 1")
    params.validate()
    rng = np.random.default_rng(seed)
    colors = palette(params.num_classes)
    S = params.image_size
    lo, hi = max(1, round(params.min_size * S)), round(params.max_size * S)
    samples = []
    for _ in range(n):
        image = (rng.random((3, S, S)) * params.noise).astype(np.float32)
        boxes = []
        for _ in range(rng.integers(params.min_objects, params.max_objects + 1)):
            c = int(rng.integers(params.num_classes))
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            x0, y0 = int(rng.integers(0, S - w + 1)), int(rng.integers(0, S - h + 1))
            image[:, y0:y0 + h, x0:x0 + w] = colors[c][:, None, None]
            boxes.append((c, (x0 + w / 2) / S, (y0 + h / 2) / S, w / S, h / S))
        targets = {s: {k: v[0] for k, v in t.items()} for s, t in grid_targets([boxes], (S, S), params.num_classes).items()}
        samples.append(SyntheticSample(image, boxes, targets))
    return samples


def to_detection_set(samples: list, num_classes: int) -> DetectionSet:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    return DetectionSet(images, [list(s.boxes) for s in samples], num_classes)


def save_dataset(samples: list, params: SyntheticParams, directory) -> Path:
    """One ``.npy`` image blob per sample plus a JSON manifest of files and boxes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}.npy"
        np.save(directory / name, s.image)
        records.append({"file": name, "boxes": [list(b) for b in s.boxes]})
    manifest = {"version": 1, "params": asdict(params), "samples": records}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    return directory


def load_dataset(directory) -> tuple:
    """Returns (DetectionSet, SyntheticParams) from a directory written by ``save_dataset``."""
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    try:
        params = SyntheticParams(**manifest["params"])
        records = manifest["samples"]
        images = np.stack([np.load(directory / r["file"]) for r in records])
        boxes = [[(int(b[0]), *map(float, b[1:])) for b in r["boxes"]] for r in records]
    except (KeyError, TypeError) as e:
        raise InputError(f"malformed dataset manifest: {e}") from None
    return DetectionSet(images.astype(np.float32), boxes, params.num_classes), params

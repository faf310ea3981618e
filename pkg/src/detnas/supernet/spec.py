"""Search-space presets (depth/width per supernet level)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

from detnas.errors import ConfigError

SCALES = (8, 16, 32)


@dataclass(frozen=True)
class SearchSpaceSpec:
    """Depth and width of one supernet.

    ``downsample`` holds the output channels of the four down-sampling
    layers; backbone C3 block ``i`` follows down-sampling layer ``i`` with
    the same width and ``c3_depths[i]`` bottlenecks. FPN widths are the
    backbone widths at strides 8/16/32.
    """

    level: str
    focus: int
    downsample: tuple
    c3_depths: tuple
    fpn_depth: int
    num_classes: int = 80

    def __post_init__(self):
        object.__setattr__(self, "downsample", tuple(int(c) for c in self.downsample))
        object.__setattr__(self, "c3_depths", tuple(int(m) for m in self.c3_depths))
        if self.focus < 1 or any(c < 1 for c in self.downsample):
            raise ConfigError("channel counts must be positive")
        if len(self.c3_depths) > len(self.downsample):
            raise ConfigError("more C3 blocks than down-sampling layers")
        if any(m < 0 for m in self.c3_depths) or self.fpn_depth < 0:
            raise ConfigError("bottleneck counts must be non-negative")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be at least 1")

    @property
    def L_D(self) -> int:
        return len(self.downsample)

    @property
    def L_C(self) -> int:
        return len(self.c3_depths)

    @property
    def L_B(self) -> int:
        return sum(self.c3_depths)

    @property
    def K_B(self) -> int:
        return self.fpn_depth * len(SCALES)

    @property
    def fpn_channels(self) -> dict:
        """Node width per stride."""
        if self.L_D != 4:
            raise ConfigError("an FPN needs exactly four down-sampling layers")
        return {8: self.downsample[1], 16: self.downsample[2], 32: self.downsample[3]}

    def with_classes(self, num_classes: int) -> "SearchSpaceSpec":
        return dataclasses.replace(self, num_classes=num_classes)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "focus": self.focus,
            "downsample": list(self.downsample),
            "c3_depths": list(self.c3_depths),
            "fpn_depth": self.fpn_depth,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpaceSpec":
        try:
            return cls(
                level=d["level"], focus=d["focus"], downsample=tuple(d["downsample"]),
                c3_depths=tuple(d["c3_depths"]), fpn_depth=d["fpn_depth"],
                num_classes=d.get("num_classes", 80),
            )
        except KeyError as e:
            raise ConfigError(f"spec is missing field {e}") from None


def _scaled(level: str, base: SearchSpaceSpec, divisor: int) -> SearchSpaceSpec:
    return SearchSpaceSpec(
        level=level,
        focus=base.focus // divisor,
        downsample=tuple(c // divisor for c in base.downsample),
        c3_depths=base.c3_depths,
        fpn_depth=base.fpn_depth,
        num_classes=base.num_classes,
    )


PRESETS = {
    "s": SearchSpaceSpec("s", 32, (64, 128, 256, 512), (1, 3, 3), 1),
    "m": SearchSpaceSpec("m", 48, (96, 192, 384, 768), (2, 6, 6), 2),
    "l": SearchSpaceSpec("l", 64, (128, 256, 512, 1024), (3, 9, 9), 3),
    "x": SearchSpaceSpec("x", 80, (160, 320, 640, 1280), (4, 12, 12), 4),
}
# Reduced-width presets for desk-scale runs; divisors keep every e*C integral.
PRESETS["s-mini"] = _scaled("s-mini", PRESETS["s"], 8)
PRESETS["m-mini"] = _scaled("m-mini", PRESETS["m"], 4)

LEVELS = tuple(PRESETS)


def preset(level: str, num_classes: Optional[int] = None) -> SearchSpaceSpec:
    try:
        spec = PRESETS[level]
    except KeyError:
        raise ConfigError(f"unknown level {level!r}; choose from {', '.join(LEVELS)}") from None
    return spec if num_classes is None else spec.with_classes(num_classes)

"""JSON run configuration with strict field checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from detnas.cli.synthetic import SyntheticParams
from detnas.errors import ConfigError, DetNASError
from detnas.search.train import BilevelConfig
from detnas.supernet.spec import LEVELS, SearchSpaceSpec, preset


@dataclass
class DataConfig:
    n_train: int = 200
    seed: int = 0
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    num_classes: int = 3
    min_size: float = 0.15
    max_size: float = 0.5
    noise: float = 0.25

    def synthetic(self) -> SyntheticParams:
        d = asdict(self)
        d.pop("n_train")
        d.pop("seed")
        return SyntheticParams(**d)


@dataclass
class RunConfig:
    level: str = "s-mini"
    spec: Optional[dict] = None  # explicit SearchSpaceSpec fields; overrides ``level``
    search: BilevelConfig = field(default_factory=BilevelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval_epochs: int = 10

    def validate(self) -> None:
        if self.spec is None and self.level not in LEVELS:
            raise ConfigError(f"level: unknown level {self.level!r}; choose from {', '.join(LEVELS)}")
        if self.data.n_train < 1:
            raise ConfigError("data.n_train: must be at least 1")
        if self.eval_epochs < 0:
            raise ConfigError("eval_epochs: must be non-negative")
        self.data.synthetic().validate()
        self.search_space()

    def search_space(self) -> SearchSpaceSpec:
        if self.spec is not None:
            spec = SearchSpaceSpec.from_dict(dict(self.spec))
            return spec.with_classes(self.data.num_classes)
        return preset(self.level, self.data.num_classes)

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{where}{key}: unknown field")
    kwargs = {}
    for key, value in raw.items():
        sub = {"search": BilevelConfig, "data": DataConfig}.get(key) if cls is RunConfig else None
        kwargs[key] = _build(sub, value, f"{where}{key}.") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}:{e.colno}: {e.msg}") from None
    try:
        cfg = _build(RunConfig, raw, "")
        cfg.validate()
    except DetNASError as e:
        raise ConfigError(f"{source}: {e}") from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))

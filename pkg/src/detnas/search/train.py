"""Alternating optimisation of network weights and architecture weights."""

from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from detnas import diffcore as dc
from detnas.chansearch import temperature
from detnas.diffcore import Tensor
from detnas.errors import ConfigError
from detnas.search.data import DetectionSet, split_dataset
from detnas.search.loss import detection_loss
from detnas.supernet.arch import ArchParams
from detnas.supernet.genotype import Genotype, derive
from detnas.supernet.graph import SEARCH, SuperNet, build_supernet, forward
from detnas.supernet.materialize import DerivedNet
from detnas.supernet.spec import SCALES, SearchSpaceSpec

METRIC_COLUMNS = (
    "epoch", "weight_loss", "arch_loss", "tau",
    "alpha_entropy_ops", "alpha_entropy_edges", "alpha_entropy_expansion", "seconds",
)


@dataclass
class BilevelConfig:
    epochs: int = 50
    weight_lr: float = 0.01
    arch_lr: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    split_ratio: float = 0.5
    warmup_epochs: int = 1
    tau0: float = 5.0
    tau_min: float = 0.1
    seed: int = 0
    batch_size: int = 8
    grad_clip: float = 10.0  # global gradient-norm cap per step; 0 disables

    def __post_init__(self):
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be non-negative")
        if not (self.weight_lr > 0 and self.arch_lr > 0):
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0 < self.split_ratio < 1:
            raise ConfigError("split_ratio must lie in (0, 1)")
        if not self.tau0 > self.tau_min > 0:
            raise ConfigError("need tau0 > tau_min > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be non-negative")

    @classmethod
    def field_names(cls) -> tuple:
        return tuple(f.name for f in fields(cls))


class SGD:
    """SGD with optional heavy-ball momentum, L2 weight decay and global gradient-norm clipping."""

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0, clip: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay, self.clip = lr, momentum, weight_decay, clip
        self.velocity = [None] * len(self.params)

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params if p.grad is not None))

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        factor = 1.0
        if self.clip:
            norm = self.grad_norm()
            if norm > self.clip:
                factor = self.clip / norm
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype)
            if factor != 1.0:
                g = g * p.dtype.type(factor)
            if self.weight_decay:
                g = g + p.dtype.type(self.weight_decay) * p.data
            if self.momentum:
                v = g if self.velocity[i] is None else p.dtype.type(self.momentum) * self.velocity[i] + g
                self.velocity[i] = v
                g = v
            p.data = p.data - p.dtype.type(self.lr) * g


@dataclass
class SearchState:
    """Optimisers, random stream and current temperature of one search run."""

    weight_opt: SGD
    arch_opt: SGD
    rng: np.random.Generator
    tau: float


@dataclass
class TrainMetrics:
    rows: list = field(default_factory=list)
    genotype: Optional[Genotype] = None
    alphas: Optional[dict] = None

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})

    @classmethod
    def read_csv(cls, path) -> "TrainMetrics":
        with open(path, newline="") as f:
            rows = [{k: int(v) if k == "epoch" else float(v) for k, v in r.items()} for r in csv.DictReader(f)]
        return cls(rows)


def _targets(batch: DetectionSet) -> list:
    return [batch.targets[s] for s in SCALES]


def supernet_loss(net: SuperNet, params: ArchParams, batch: DetectionSet, rng, tau: float) -> Tensor:
    image = Tensor(batch.images, dtype=params.tensors()[0].dtype)
    feats = forward(net, params, image, rng, mode=SEARCH, tau=tau)
    return detection_loss(net.detect(feats), _targets(batch))


def _step(net, params, batch, state: SearchState, opt: SGD) -> float:
    state.weight_opt.zero_grad()
    state.arch_opt.zero_grad()
    loss = supernet_loss(net, params, batch, state.rng, state.tau)
    dc.backward(loss)
    opt.step()
    return loss.item()


def weight_step(net: SuperNet, params: ArchParams, batch: DetectionSet, config: BilevelConfig,
                state: SearchState) -> float:
    """One SGD step on the network weights; architecture weights are left untouched."""
    return _step(net, params, batch, state, state.weight_opt)


def arch_step(net: SuperNet, params: ArchParams, batch: DetectionSet, config: BilevelConfig,
              state: SearchState) -> float:
    """One first-order SGD step on the architecture weights; network weights are left untouched."""
    return _step(net, params, batch, state, state.arch_opt)


def make_state(net: SuperNet, params: ArchParams, config: BilevelConfig, rng) -> SearchState:
    return SearchState(
        SGD(net.weights(), config.weight_lr, config.momentum, config.weight_decay, config.grad_clip),
        SGD(params.tensors(), config.arch_lr, clip=config.grad_clip),
        rng,
        config.tau0,
    )


def _row(epoch, w_loss, a_loss, tau, params: Optional[ArchParams], seconds) -> dict:
    ent = {f: params.entropy(f) if params is not None else math.nan for f in ("ops", "edges", "expansion")}
    return {
        "epoch": epoch, "weight_loss": float(w_loss), "arch_loss": float(a_loss), "tau": float(tau),
        "alpha_entropy_ops": ent["ops"], "alpha_entropy_edges": ent["edges"],
        "alpha_entropy_expansion": ent["expansion"], "seconds": float(seconds),
    }


def _n_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def run_search(spec: SearchSpaceSpec, dataset: DetectionSet, config: BilevelConfig, log=None) -> tuple:
    """Bi-level search; returns (genotype, metrics).

    Warmup epochs train weights only. Afterwards each weight batch is
    followed by one architecture batch and the temperature decays per
    iteration. Row 0 of the metrics is the untrained state.
    """
    spec = spec.with_classes(dataset.num_classes)
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    net, params = build_supernet(spec, int(seeds[0].generate_state(1)[0]))
    d_w, d_a = split_dataset(dataset, config.split_ratio, int(seeds[1].generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(seeds[2])
    state = make_state(net, params, config, np.random.default_rng(seeds[3]))

    n_w = _n_batches(len(d_w), config.batch_size)
    search_epochs = max(0, config.epochs - config.warmup_epochs)
    last_step = search_epochs * n_w - 1  # tau reaches tau_min on the final iteration
    metrics = TrainMetrics()
    start = time.perf_counter()

    eval_rng = np.random.default_rng(seeds[3].spawn(1)[0])
    with dc.no_grad():
        w0 = np.mean([supernet_loss(net, params, b, eval_rng, config.tau0).item() for b in d_w.batches(config.batch_size)])
        a0 = np.mean([supernet_loss(net, params, b, eval_rng, config.tau0).item() for b in d_a.batches(config.batch_size)])
    metrics.rows.append(_row(0, w0, a0, config.tau0, params, time.perf_counter() - start))

    step = 0
    for epoch in range(1, config.epochs + 1):
        w_losses, a_losses = [], []
        warm = epoch <= config.warmup_epochs
        arch_batches = itertools.cycle(list(d_a.batches(config.batch_size, shuffle_rng))) if not warm else None
        for batch in d_w.batches(config.batch_size, shuffle_rng):
            state.tau = config.tau0 if warm else temperature(step, last_step, config.tau0, config.tau_min)
            w_losses.append(weight_step(net, params, batch, config, state))
            if not warm:
                a_losses.append(arch_step(net, params, next(arch_batches), config, state))
                step += 1
        a_loss = np.mean(a_losses) if a_losses else math.nan
        metrics.rows.append(_row(epoch, np.mean(w_losses), a_loss, state.tau, params, time.perf_counter() - start))
        if log:
            log(metrics.rows[-1])
    metrics.genotype = derive(params)
    metrics.alphas = params.to_dict()
    return metrics.genotype, metrics


def derived_loss(model: DerivedNet, batch: DetectionSet) -> Tensor:
    image = Tensor(batch.images, dtype=model.weights()[0].dtype)
    return detection_loss(model.detect(model.features(image)), _targets(batch))


def train_derived(genotype: Genotype, dataset: DetectionSet, epochs: int, config: BilevelConfig,
                  log=None) -> TrainMetrics:
    """Train the materialized genotype from scratch with the same loss."""
    if genotype.spec.num_classes != dataset.num_classes:
        raise ConfigError(f"genotype predicts {genotype.spec.num_classes} classes, data has {dataset.num_classes}")
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    init_rng = np.random.default_rng(seeds[0])
    model = DerivedNet(genotype, init_rng)
    model.calibrate(init_rng)
    shuffle_rng = np.random.default_rng(seeds[1])
    opt = SGD(model.weights(), config.weight_lr, config.momentum, config.weight_decay, config.grad_clip)
    metrics = TrainMetrics(genotype=genotype)
    start = time.perf_counter()
    with dc.no_grad():
        l0 = np.mean([derived_loss(model, b).item() for b in dataset.batches(config.batch_size)])
    metrics.rows.append(_row(0, l0, math.nan, math.nan, None, time.perf_counter() - start))
    for epoch in range(1, epochs + 1):
        losses = []
        for batch in dataset.batches(config.batch_size, shuffle_rng):
            opt.zero_grad()
            loss = derived_loss(model, batch)
            dc.backward(loss)
            opt.step()
            losses.append(loss.item())
        metrics.rows.append(_row(epoch, np.mean(losses), math.nan, math.nan, None, time.perf_counter() - start))
        if log:
            log(metrics.rows[-1])
    return metrics


def config_dict(config: BilevelConfig) -> dict:
    return asdict(config)

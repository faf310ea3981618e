"""Discrete architecture derived from trained architecture weights."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from detnas.chansearch import BOTTLENECK_RATES, C3_RATES, DOWNSAMPLE_RATES
from detnas.errors import InputError
from detnas.kernelreuse import ALL_OPS, BOTTLENECK_OPS, CandidateOp
from detnas.supernet.arch import FPN_BLOCKS, N_INPUTS, ArchParams, layout
from detnas.supernet.spec import SCALES, SearchSpaceSpec

GENOTYPE_VERSION = 1
KEEP_EDGES = 2
FPN_KEYS = {"td": "topdown", "bu": "bottomup"}


@dataclass(frozen=True)
class LayerChoice:
    name: str
    block_kind: str  # downsample | c3 | bottleneck_conv1 | bottleneck_conv2
    op: str
    expansion: float

    def to_dict(self) -> dict:
        return {"name": self.name, "block_kind": self.block_kind, "op": self.op, "expansion": self.expansion}


@dataclass(frozen=True)
class EdgeChoice:
    pred: int
    op: str
    expansion: float

    def to_dict(self) -> dict:
        return {"pred": self.pred, "op": self.op, "expansion": self.expansion}


@dataclass
class Genotype:
    spec: SearchSpaceSpec
    backbone: list
    fpn: dict  # "td"/"bu" -> list of nodes, each a list of two EdgeChoice
    fpn_c3: dict = field(default_factory=dict)  # "td"/"bu" -> list of LayerChoice

    @property
    def level(self) -> str:
        return self.spec.level

    def layer(self, name: str) -> LayerChoice:
        for part in [self.backbone] + [self.fpn_c3[b] for b in FPN_BLOCKS]:
            for c in part:
                if c.name == name:
                    return c
        raise InputError(f"genotype has no layer {name!r}")

    def validate(self) -> None:
        """Structural invariants; raises InputError on violation."""
        expected = {c.name for c in _layer_template(self.spec)}
        got = [c.name for c in self.backbone] + [c.name for b in FPN_BLOCKS for c in self.fpn_c3.get(b, [])]
        if sorted(got) != sorted(expected):
            raise InputError("genotype layers do not match the search space")
        for part in [self.backbone] + [self.fpn_c3[b] for b in FPN_BLOCKS]:
            for c in part:
                ops, rates = candidates_for(c.block_kind)
                if c.op not in [o.label for o in ops] or c.expansion not in rates:
                    raise InputError(f"{c.name}: invalid choice {c.op}/{c.expansion}")
        for b in FPN_BLOCKS:
            nodes = self.fpn.get(b)
            if nodes is None or len(nodes) != len(SCALES):
                raise InputError(f"{b}: expected {len(SCALES)} fusion nodes")
            for j, node in enumerate(nodes):
                preds = [e.pred for e in node]
                if len(node) != KEEP_EDGES or len(set(preds)) != KEEP_EDGES:
                    raise InputError(f"{b} node {j}: exactly {KEEP_EDGES} distinct predecessors required")
                for e in node:
                    if not 0 <= e.pred < N_INPUTS + j:
                        raise InputError(f"{b} node {j}: predecessor {e.pred} out of range")
                    if e.op not in [o.label for o in ALL_OPS] or e.expansion not in DOWNSAMPLE_RATES:
                        raise InputError(f"{b} node {j}: invalid edge choice {e}")

    # -- serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": GENOTYPE_VERSION,
            "level": self.level,
            "backbone": [c.to_dict() for c in self.backbone],
            "fpn": {
                FPN_KEYS[b]: [[e.to_dict() for e in node] for node in self.fpn[b]] for b in FPN_BLOCKS
            } | {f"{FPN_KEYS[b]}_c3": [c.to_dict() for c in self.fpn_c3[b]] for b in FPN_BLOCKS},
            "spec_echo": self.spec.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        if d.get("version") != GENOTYPE_VERSION:
            raise InputError(f"unsupported genotype version {d.get('version')!r}")
        try:
            spec = SearchSpaceSpec.from_dict(d["spec_echo"])
            backbone = [LayerChoice(**c) for c in d["backbone"]]
            fpn = {b: [[EdgeChoice(**e) for e in node] for node in d["fpn"][FPN_KEYS[b]]] for b in FPN_BLOCKS}
            fpn_c3 = {b: [LayerChoice(**c) for c in d["fpn"][f"{FPN_KEYS[b]}_c3"]] for b in FPN_BLOCKS}
        except (KeyError, TypeError) as e:
            raise InputError(f"malformed genotype document: {e}") from None
        if d.get("level") != spec.level:
            raise InputError("genotype level disagrees with its spec echo")
        g = cls(spec, backbone, fpn, fpn_c3)
        g.validate()
        return g

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other) -> bool:
        return isinstance(other, Genotype) and self.to_dict() == other.to_dict()


def candidates_for(kind: str) -> tuple:
    return {
        "downsample": (ALL_OPS, DOWNSAMPLE_RATES),
        "c3": ((CandidateOp.CONV1X1,), C3_RATES),
        "bottleneck_conv1": ((CandidateOp.CONV1X1,), BOTTLENECK_RATES),
        "bottleneck_conv2": (BOTTLENECK_OPS, BOTTLENECK_RATES),
    }[kind]


def _c3_template(prefix: str, depth: int) -> list:
    out = [(f"{prefix}", "c3", None, f"{prefix}.exp")]
    for j in range(depth):
        b = f"{prefix}.b{j}"
        out.append((f"{b}.conv1", "bottleneck_conv1", None, f"{b}.exp1"))
        out.append((f"{b}.conv2", "bottleneck_conv2", f"{b}.op", f"{b}.exp2"))
    return out


def _layer_rows(spec: SearchSpaceSpec) -> dict:
    """(layer name, kind, op-vector name, expansion-vector name) per part."""
    rows = []
    for i in range(spec.L_D):
        rows.append((f"bb.down{i}", "downsample", f"bb.down{i}.op", f"bb.down{i}.exp"))
        if i < spec.L_C:
            rows += _c3_template(f"bb.c3_{i}", spec.c3_depths[i])
    parts = {"backbone": rows}
    for b in FPN_BLOCKS:
        rows = []
        for j in range(len(SCALES)):
            rows += _c3_template(f"{b}.c3_{j}", spec.fpn_depth)
        parts[b] = rows
    return parts


def _layer_template(spec: SearchSpaceSpec) -> list:
    out = []
    for rows in _layer_rows(spec).values():
        out += [LayerChoice(name, kind, "", 0.0) for name, kind, _, _ in rows]
    return out


def _argmax_softmax(params: ArchParams, name: str) -> int:
    return int(np.argmax(params.normalized(name)))


def top_k_edges(weights: np.ndarray, k: int = KEEP_EDGES) -> list:
    """Indices of the ``k`` largest weights, ties to the lower index, returned ascending."""
    order = np.lexsort((np.arange(len(weights)), -weights))
    return sorted(int(i) for i in order[:k])


def derive(params: ArchParams, spec: SearchSpaceSpec = None) -> Genotype:
    """Argmax op/expansion per layer and edge; top-2 predecessors per FPN node."""
    spec = params.spec if spec is None else spec
    parts = _layer_rows(spec)

    def choose(rows):
        out = []
        for name, kind, op_name, exp_name in rows:
            ops, rates = candidates_for(kind)
            op = ops[_argmax_softmax(params, op_name)] if op_name else ops[0]
            out.append(LayerChoice(name, kind, op.label, rates[_argmax_softmax(params, exp_name)]))
        return out

    backbone = choose(parts["backbone"])
    fpn, fpn_c3 = {}, {}
    for b in FPN_BLOCKS:
        nodes = []
        for j in range(len(SCALES)):
            kept = top_k_edges(params.normalized(f"{b}.n{j}.edge"))
            nodes.append([
                EdgeChoice(
                    p,
                    ALL_OPS[_argmax_softmax(params, f"{b}.n{j}.p{p}.op")].label,
                    DOWNSAMPLE_RATES[_argmax_softmax(params, f"{b}.n{j}.p{p}.exp")],
                )
                for p in kept
            ])
        fpn[b] = nodes
        fpn_c3[b] = choose(parts[b])
    g = Genotype(spec, backbone, fpn, fpn_c3)
    g.validate()
    return g


FORCE_LOGIT = 1.0e4


def forced_params(genotype: Genotype, dtype=np.float32) -> ArchParams:
    """Architecture weights whose softmax is exactly one-hot at the genotype's choices.

    Kept FPN edges share one large logit, so each gets weight exactly 1/2.
    """
    spec = genotype.spec
    params = ArchParams(spec, dtype=dtype)

    def put(name, index):
        v = np.zeros(len(params.slots[name].candidates))
        v[index] = FORCE_LOGIT
        params.vectors[name].data = v.astype(dtype)

    parts = _layer_rows(spec)
    chosen = {c.name: c for c in genotype.backbone}
    for b in FPN_BLOCKS:
        chosen.update({c.name: c for c in genotype.fpn_c3[b]})
    for rows in parts.values():
        for name, kind, op_name, exp_name in rows:
            ops, rates = candidates_for(kind)
            c = chosen[name]
            if op_name:
                put(op_name, [o.label for o in ops].index(c.op))
            put(exp_name, list(rates).index(c.expansion))
    for b in FPN_BLOCKS:
        for j, node in enumerate(genotype.fpn[b]):
            v = np.zeros(N_INPUTS + j)
            for e in node:
                v[e.pred] = FORCE_LOGIT
                put(f"{b}.n{j}.p{e.pred}.op", [o.label for o in ALL_OPS].index(e.op))
                put(f"{b}.n{j}.p{e.pred}.exp", list(DOWNSAMPLE_RATES).index(e.expansion))
            params.vectors[f"{b}.n{j}.edge"].data = v.astype(dtype)
    return params


def random_genotype(spec: SearchSpaceSpec, rng: np.random.Generator) -> Genotype:
    """Uniformly random point of the search space."""
    values = {s.name: rng.standard_normal(len(s.candidates)) for s in layout(spec)}
    return derive(ArchParams(spec, values, dtype=np.float64), spec)

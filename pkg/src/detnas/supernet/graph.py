"""Backbone + FPN supernet holding every candidate operation and connection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from detnas import diffcore as dc
from detnas.chansearch import (
    BOTTLENECK_RATES,
    C3_RATES,
    DOWNSAMPLE_RATES,
    channels_for,
    concat_conv_to_sum,
    deterministic_choice,
    sample,
    slice_in_channels,
    straight_through,
)
from detnas.diffcore import Tensor
from detnas.errors import ConfigError, InputError
from detnas.kernelreuse import ALL_OPS, BOTTLENECK_OPS, SILU_GAIN, UnifiedKernel, compound_conv
from detnas.supernet.calibration import act as act_fn, calibrate, noise_batch
from detnas.supernet.arch import FPN_BLOCKS, N_INPUTS, NODE_SCALES, ArchParams
from detnas.supernet.fusion import ActiveWidth, apply_gate, fuse_node
from detnas.supernet.spec import SCALES, SearchSpaceSpec

SPP_KERNELS = (5, 9, 13)
SEARCH = "search"
DETERMINISTIC = "deterministic"


def fan_in_scale(x: Tensor, full: int, live: Optional[int] = None) -> Tensor:
    """Multiply a prefix-sliced input by sqrt(full / live) so the live fan-in keeps the init scale."""
    live = x.shape[1] if live is None else live
    return x if live == full else dc.scale(x, float(np.sqrt(full / live)))


def head_channels(num_classes: int) -> int:
    """objectness + class scores + 4 box terms."""
    return 1 + num_classes + 4


@dataclass
class ForwardContext:
    """Per-call state: architecture weights, sampling mode and the random stream."""

    arch: ArchParams
    mode: str = DETERMINISTIC
    rng: Optional[np.random.Generator] = None
    tau: float = 1.0
    chosen: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in (SEARCH, DETERMINISTIC):
            raise InputError(f"mode must be {SEARCH!r} or {DETERMINISTIC!r}")
        if self.mode == SEARCH and self.rng is None:
            raise InputError("search mode needs a random stream")

    def ops(self, name: str) -> Tensor:
        return self.arch[name]

    def expansion(self, name: str, rates, base: int) -> ActiveWidth:
        alpha = self.arch[name]
        if self.mode == SEARCH:
            s = sample(alpha, self.rng, self.tau)
            k = s.index
            gate = dc.getitem(straight_through(s), k)
        else:
            k = int(np.argmax(deterministic_choice(alpha)))
            gate = None
        width = channels_for(rates[k], base)
        self.chosen[name] = (k, width)
        return ActiveWidth(width, gate)


class Conv:
    """Plain convolution whose weight is prefix-sliced to the live widths."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1, dtype=None):
        dtype = dtype or dc.default_dtype()
        bound = np.sqrt(3.0 * SILU_GAIN / (c_in * k * k))
        self.w = Tensor(rng.uniform(-bound, bound, (c_out, c_in, k, k)), requires_grad=True, dtype=dtype)
        self.b = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype)
        self.k, self.stride = k, stride

    @property
    def c_out(self) -> int:
        return self.w.shape[0]

    def weights(self) -> list:
        return [self.w, self.b]

    def __call__(self, x: Tensor, c_out: Optional[int] = None, act: bool = True) -> Tensor:
        c_out = self.c_out if c_out is None else c_out
        w = slice_in_channels(self.w, x.shape[1])
        x = fan_in_scale(x, self.w.shape[1])
        b = self.b
        if c_out < self.c_out:
            w = dc.getitem(w, (slice(0, c_out),))
            b = dc.getitem(b, (slice(0, c_out),))
        y = dc.conv2d(x, w, b, stride=self.stride, padding=self.k // 2)
        return act_fn(y, [self.w]) if act else y


class SearchEdge:
    """Super-edge: one unified 5x5 bank plus searched op and expansion."""

    def __init__(self, name: str, c_in: int, c_out: int, rng, candidates=ALL_OPS, rates=DOWNSAMPLE_RATES,
                 stride: int = 1, dtype=None):
        self.name, self.rates, self.stride = name, tuple(rates), stride
        self.kernel = UnifiedKernel.init(c_out, c_in, rng, candidates, dtype=dtype)
        for r in self.rates:
            channels_for(r, c_out)

    def weights(self) -> list:
        return [self.kernel.theta, self.kernel.bias]

    def __call__(self, x: Tensor, ctx: ForwardContext, exp_name: Optional[str] = None) -> Tensor:
        aw = ctx.expansion(exp_name or f"{self.name}.exp", self.rates, self.kernel.c_out)
        x = fan_in_scale(x, self.kernel.c_in)
        y = compound_conv(x, self.kernel, dc.softmax(ctx.ops(f"{self.name}.op")), self.stride, c_out=aw.width)
        return apply_gate(act_fn(y, [self.kernel.theta]), aw.gate)


class Bottleneck:
    """1x1 conv then searched spatial conv; no shortcut."""

    def __init__(self, name: str, hidden: int, rng, dtype=None):
        self.name, self.hidden = name, hidden
        for r in BOTTLENECK_RATES:
            channels_for(r, hidden)
        self.conv1 = Conv(hidden, hidden, 1, rng, dtype=dtype)
        self.conv2 = SearchEdge(name, hidden, hidden, rng, BOTTLENECK_OPS, BOTTLENECK_RATES, dtype=dtype)

    def weights(self) -> list:
        return self.conv1.weights() + self.conv2.weights()

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        aw = ctx.expansion(f"{self.name}.exp1", BOTTLENECK_RATES, self.hidden)
        h = apply_gate(self.conv1(x, aw.width), aw.gate)
        return self.conv2(h, ctx, exp_name=f"{self.name}.exp2")


class C3:
    """Two parallel 1x1 branches (one through the bottlenecks) merged by a 1x1 conv.

    The merge runs on the concatenated branches, evaluated as a sum of
    per-branch convolutions so each branch can be sliced independently.
    """

    def __init__(self, name: str, c_in: int, c_out: int, depth: int, rng, dtype=None):
        if c_out % 2:
            raise ConfigError(f"{name}: C3 width {c_out} must be even")
        self.name, self.hidden = name, c_out // 2
        for r in C3_RATES:
            channels_for(r, self.hidden)
        self.cv1 = Conv(c_in, self.hidden, 1, rng, dtype=dtype)
        self.cv2 = Conv(c_in, self.hidden, 1, rng, dtype=dtype)
        self.blocks = [Bottleneck(f"{name}.b{j}", self.hidden, rng, dtype=dtype) for j in range(depth)]
        self.cv3 = Conv(2 * self.hidden, c_out, 1, rng, dtype=dtype)

    def weights(self) -> list:
        out = self.cv1.weights() + self.cv2.weights()
        for b in self.blocks:
            out += b.weights()
        return out + self.cv3.weights()

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        aw = ctx.expansion(f"{self.name}.exp", C3_RATES, self.hidden)
        a = apply_gate(self.cv1(x, aw.width), aw.gate)
        b = apply_gate(self.cv2(x, aw.width), aw.gate)
        for blk in self.blocks:
            a = blk(a, ctx)
        wa, wb = concat_conv_to_sum(self.cv3.w, [self.hidden, self.hidden])
        live = a.shape[1] + b.shape[1]
        a, b = fan_in_scale(a, 2 * self.hidden, live), fan_in_scale(b, 2 * self.hidden, live)
        y = dc.conv2d(a, slice_in_channels(wa, a.shape[1]), self.cv3.b)
        y = dc.add(y, dc.conv2d(b, slice_in_channels(wb, b.shape[1])))
        return act_fn(y, [self.cv3.w])


class SPP:
    """Fixed spatial pyramid pooling: 1x1 reduce, max-pools {5,9,13} with identity, 1x1 merge."""

    def __init__(self, c_in: int, c_out: int, rng, dtype=None):
        self.hidden = c_in // 2
        self.cv1 = Conv(c_in, self.hidden, 1, rng, dtype=dtype)
        self.cv2 = Conv(self.hidden * (len(SPP_KERNELS) + 1), c_out, 1, rng, dtype=dtype)

    def weights(self) -> list:
        return self.cv1.weights() + self.cv2.weights()

    def __call__(self, x: Tensor, ctx: Optional[ForwardContext] = None) -> Tensor:
        h = self.cv1(x)
        branches = [h] + [dc.maxpool2d(h, k, 1, k // 2) for k in SPP_KERNELS]
        blocks = concat_conv_to_sum(self.cv2.w, [self.hidden] * len(branches))
        y = dc.conv2d(branches[0], blocks[0], self.cv2.b)
        for br, w in zip(branches[1:], blocks[1:]):
            y = dc.add(y, dc.conv2d(br, w))
        return act_fn(y, [self.cv2.w])


def align(x: Tensor, src_scale: int, dst_scale: int) -> tuple:
    """Nearest-upsample coarser inputs; return the edge stride for finer ones."""
    if src_scale > dst_scale:
        for _ in range(int(np.log2(src_scale // dst_scale))):
            x = dc.upsample_nearest2x(x)
        return x, 1
    return x, dst_scale // src_scale


class FusionBlock:
    """Three-node DAG over three input scales followed by one C3 per node."""

    def __init__(self, name: str, spec: SearchSpaceSpec, in_scales: tuple, in_channels: tuple, rng, dtype=None):
        self.name = name
        self.in_scales = tuple(in_scales)
        self.node_scales = NODE_SCALES[name]
        widths = spec.fpn_channels
        scales = list(in_scales)
        chans = list(in_channels)
        self.edges = []
        for j, s in enumerate(self.node_scales):
            row = [
                SearchEdge(f"{name}.n{j}.p{p}", chans[p], widths[s], rng, dtype=dtype)
                for p in range(N_INPUTS + j)
            ]
            self.edges.append(row)
            scales.append(s)
            chans.append(widths[s])
        self.scales = tuple(scales)
        self.c3 = [
            C3(f"{name}.c3_{j}", widths[s], widths[s], spec.fpn_depth, rng, dtype=dtype)
            for j, s in enumerate(self.node_scales)
        ]

    def weights(self) -> list:
        out = []
        for row in self.edges:
            for e in row:
                out += e.weights()
        for c in self.c3:
            out += c.weights()
        return out

    def __call__(self, inputs: list, ctx: ForwardContext) -> list:
        feats = list(inputs)
        for j, s in enumerate(self.node_scales):
            aligned, strides, exps = [], [], []
            for p, edge in enumerate(self.edges[j]):
                x, stride = align(feats[p], self.scales[p], s)
                aligned.append(fan_in_scale(x, edge.kernel.c_in))
                strides.append(stride)
                exps.append(ctx.expansion(f"{edge.name}.exp", edge.rates, edge.kernel.c_out))
            z = fuse_node(
                aligned,
                ctx.arch[f"{self.name}.n{j}.edge"],
                [ctx.ops(f"{e.name}.op") for e in self.edges[j]],
                [e.kernel for e in self.edges[j]],
                exps,
                strides,
            )
            feats.append(act_fn(z, [e.kernel.theta for e in self.edges[j]]))
        return [c3(feats[N_INPUTS + j], ctx) for j, c3 in enumerate(self.c3)]


class SuperNet:
    def __init__(self, spec: SearchSpaceSpec, rng: np.random.Generator, dtype=None):
        self.spec = spec
        if spec.L_D != 4 or spec.L_C != 3:
            raise ConfigError("the detection supernet needs four down-sampling layers and three C3 blocks")
        self.stem = Conv(12, spec.focus, 3, rng, dtype=dtype)
        self.down, self.c3 = [], []
        c_prev = spec.focus
        for i, c in enumerate(spec.downsample):
            self.down.append(SearchEdge(f"bb.down{i}", c_prev, c, rng, stride=2, dtype=dtype))
            if i < spec.L_C:
                self.c3.append(C3(f"bb.c3_{i}", c, c, spec.c3_depths[i], rng, dtype=dtype))
            c_prev = c
        self.spp = SPP(c_prev, c_prev, rng, dtype=dtype)
        fpn = spec.fpn_channels
        self.td = FusionBlock("td", spec, (32, 16, 8), (fpn[32], fpn[16], fpn[8]), rng, dtype=dtype)
        self.bu = FusionBlock("bu", spec, (8, 16, 32), (fpn[8], fpn[16], fpn[32]), rng, dtype=dtype)
        self.heads = [Conv(fpn[s], head_channels(spec.num_classes), 1, rng, dtype=dtype) for s in SCALES]

    def weights(self) -> list:
        out = self.stem.weights()
        for d in self.down:
            out += d.weights()
        for c in self.c3:
            out += c.weights()
        out += self.spp.weights() + self.td.weights() + self.bu.weights()
        for h in self.heads:
            out += h.weights()
        return out

    def param_count(self) -> int:
        return int(sum(t.size for t in self.weights()))

    def features(self, image: Tensor, ctx: ForwardContext) -> list:
        """Multi-scale features at strides 8, 16, 32."""
        check_image(image)
        x = self.stem(dc.space_to_depth(image))
        taps = []
        for i, d in enumerate(self.down):
            x = d(x, ctx)
            if i < len(self.c3):
                x = self.c3[i](x, ctx)
            taps.append(x)
        p5 = self.spp(x)
        td = self.td([p5, taps[2], taps[1]], ctx)  # nodes at 32, 16, 8
        return self.bu([td[2], td[1], td[0]], ctx)  # nodes at 8, 16, 32

    def detect(self, feats: list) -> list:
        return [h(f, act=False) for h, f in zip(self.heads, feats)]

    def calibrate(self, arch: ArchParams, rng: np.random.Generator) -> None:
        """Rescale fresh weights to unit pre-activation scale on a seeded noise batch.

        Widths are Gumbel-sampled as in search mode, from ``rng``.
        """
        image = Tensor(noise_batch(rng).data, dtype=self.stem.w.dtype)
        ctx = ForwardContext(arch, SEARCH, rng, 1.0)
        calibrate(lambda: self.features(image, ctx), self.weights()[1::2])


def check_image(image: Tensor) -> None:
    if image.ndim != 4 or image.shape[1] != 3:
        raise InputError(f"expected an N x 3 x H x W image batch, got {image.shape}")
    if image.shape[2] % 32 or image.shape[3] % 32:
        raise InputError(f"image size {image.shape[2:]} is not divisible by 32")


def build_supernet(spec: SearchSpaceSpec, seed: int, dtype=None, calibrated: bool = True) -> tuple:
    """Seeded supernet weights plus zero-initialised architecture weights."""
    rng = np.random.default_rng(seed)
    net = SuperNet(spec, rng, dtype=dtype)
    arch = ArchParams(spec, dtype=dtype or dc.default_dtype())
    if calibrated:
        net.calibrate(arch, rng)
    return net, arch


def forward(net: SuperNet, params: ArchParams, image: Tensor, rng: Optional[np.random.Generator] = None,
            mode: str = DETERMINISTIC, tau: float = 1.0, ctx: Optional[ForwardContext] = None) -> list:
    ctx = ctx or ForwardContext(params, mode, rng, tau)
    return net.features(image, ctx)


def supernet_param_counts(spec: SearchSpaceSpec) -> dict:
    """Stored parameters per down-sampling super-edge vs. independent candidates."""
    from detnas.kernelreuse import independent_param_count, shared_param_count

    out = {}
    c_prev = spec.focus
    for i, c in enumerate(spec.downsample):
        out[f"bb.down{i}"] = (shared_param_count(c_prev, c), independent_param_count(c_prev, c))
        c_prev = c
    return out


__all__ = [
    "Bottleneck", "C3", "Conv", "DETERMINISTIC", "FPN_BLOCKS", "ForwardContext", "FusionBlock", "SEARCH",
    "SPP", "SearchEdge", "SuperNet", "build_supernet", "check_image", "forward", "head_channels",
]

"""Standalone networks realised from a genotype."""

from __future__ import annotations

from typing import Optional

import numpy as np

from detnas import diffcore as dc
from detnas.chansearch import channels_for, concat_conv_to_sum
from detnas.diffcore import Tensor
from detnas.errors import InputError
from detnas.kernelreuse import SILU_GAIN, CandidateOp, extract_candidate_kernel
from detnas.supernet.arch import FPN_BLOCKS, N_INPUTS, NODE_SCALES
from detnas.supernet.calibration import act as act_fn, calibrate, noise_batch
from detnas.supernet.genotype import Genotype
from detnas.supernet.graph import SPP_KERNELS, SuperNet, check_image, head_channels
from detnas.supernet.spec import SCALES

EDGE_SCALE = 0.5  # softmax weight of each of the two kept edges


class PlainConv:
    """Fixed convolution; ``out_stride`` is the output's down-sampling factor."""

    def __init__(self, c_in, c_out, op: CandidateOp, rng, stride=1, out_stride=1, act=True, dtype=None):
        dtype = dtype or dc.default_dtype()
        k = op.k
        bound = np.sqrt(3.0 * SILU_GAIN / (c_in * k * k))
        self.w = Tensor(rng.uniform(-bound, bound, (c_out, c_in, k, k)), requires_grad=True, dtype=dtype)
        self.b = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype)
        self.op, self.stride, self.out_stride, self.act = op, stride, out_stride, act

    def weights(self) -> list:
        return [self.w, self.b]

    def load(self, w: np.ndarray, b: np.ndarray) -> None:
        if w.shape != self.w.shape or b.shape != self.b.shape:
            raise InputError(f"weight shape {w.shape} does not fit layer {self.w.shape}")
        self.w.data = np.array(w, dtype=self.w.dtype)
        self.b.data = np.array(b, dtype=self.b.dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = dc.conv2d(x, self.w, self.b, self.stride, self.op.padding, self.op.dilation)
        return act_fn(y, [self.w]) if self.act else y


class DerivedC3:
    def __init__(self, c_in, c_out, choices: list, rng, out_stride, concat_mode: bool, dtype=None):
        c3, rest = choices[0], choices[1:]
        hidden = c_out // 2
        w = channels_for(c3.expansion, hidden)
        one = CandidateOp.CONV1X1
        self.hidden, self.concat_mode = hidden, concat_mode
        self.cv1 = PlainConv(c_in, w, one, rng, out_stride=out_stride, dtype=dtype)
        self.cv2 = PlainConv(c_in, w, one, rng, out_stride=out_stride, dtype=dtype)
        self.blocks = []
        width = w
        for conv1, conv2 in zip(rest[::2], rest[1::2]):
            w1 = channels_for(conv1.expansion, hidden)
            w2 = channels_for(conv2.expansion, hidden)
            op = CandidateOp.from_label(conv2.op)
            self.blocks.append((
                PlainConv(width, w1, one, rng, out_stride=out_stride, dtype=dtype),
                PlainConv(w1, w2, op, rng, out_stride=out_stride, dtype=dtype),
            ))
            width = w2
        self.split = (width, w)
        self.cv3 = PlainConv(width + w, c_out, one, rng, out_stride=out_stride, dtype=dtype)

    def convs(self) -> list:
        out = [self.cv1, self.cv2]
        for pair in self.blocks:
            out += list(pair)
        return out + [self.cv3]

    def __call__(self, x: Tensor) -> Tensor:
        a, b = self.cv1(x), self.cv2(x)
        for c1, c2 in self.blocks:
            a = c2(c1(a))
        if self.concat_mode:
            return self.cv3(dc.concat_channels([a, b]))
        wa, wb = concat_conv_to_sum(self.cv3.w, list(self.split))
        y = dc.add(dc.conv2d(a, wa, self.cv3.b), dc.conv2d(b, wb))
        return act_fn(y, [self.cv3.w])


class DerivedSPP:
    def __init__(self, c_in, c_out, full_in, rng, out_stride, concat_mode: bool, dtype=None):
        one = CandidateOp.CONV1X1
        self.hidden = full_in // 2
        self.concat_mode = concat_mode
        self.cv1 = PlainConv(c_in, self.hidden, one, rng, out_stride=out_stride, dtype=dtype)
        self.cv2 = PlainConv(self.hidden * (len(SPP_KERNELS) + 1), c_out, one, rng, out_stride=out_stride, dtype=dtype)

    def convs(self) -> list:
        return [self.cv1, self.cv2]

    def __call__(self, x: Tensor) -> Tensor:
        h = self.cv1(x)
        branches = [h] + [dc.maxpool2d(h, k, 1, k // 2) for k in SPP_KERNELS]
        if self.concat_mode:
            return self.cv2(dc.concat_channels(branches))
        blocks = concat_conv_to_sum(self.cv2.w, [self.hidden] * len(branches))
        y = dc.conv2d(branches[0], blocks[0], self.cv2.b)
        for br, w in zip(branches[1:], blocks[1:]):
            y = dc.add(y, dc.conv2d(br, w))
        return act_fn(y, [self.cv2.w])


class DerivedFusion:
    def __init__(self, name, genotype: Genotype, in_scales, in_widths, rng, concat_mode, dtype=None):
        spec = genotype.spec
        self.name, self.node_scales = name, NODE_SCALES[name]
        widths = spec.fpn_channels
        scales, chans = list(in_scales), list(in_widths)
        self.nodes = []
        for j, s in enumerate(self.node_scales):
            edges = []
            for e in genotype.fpn[name][j]:
                w = channels_for(e.expansion, widths[s])
                stride = max(1, s // scales[e.pred])
                conv = PlainConv(chans[e.pred], w, CandidateOp.from_label(e.op), rng, stride=stride,
                                 out_stride=s, act=False, dtype=dtype)
                edges.append((e.pred, conv))
            self.nodes.append(edges)
            scales.append(s)
            chans.append(max(conv.w.shape[0] for _, conv in edges))
        self.scales = tuple(scales)
        self.c3 = []
        for j, s in enumerate(self.node_scales):
            rows = [c for c in genotype.fpn_c3[name] if c.name == f"{name}.c3_{j}" or
                    c.name.startswith(f"{name}.c3_{j}.")]
            self.c3.append(DerivedC3(chans[N_INPUTS + j], widths[s], rows, rng, s, concat_mode, dtype=dtype))

    def convs(self) -> list:
        out = [conv for node in self.nodes for _, conv in node]
        for c in self.c3:
            out += c.convs()
        return out

    def __call__(self, inputs: list) -> list:
        feats = list(inputs)
        for j, s in enumerate(self.node_scales):
            outs = []
            for p, conv in self.nodes[j]:
                x = feats[p]
                for _ in range(int(np.log2(max(1, self.scales[p] // s)))):
                    x = dc.upsample_nearest2x(x)
                outs.append(dc.scale(conv(x), EDGE_SCALE))
            width = max(o.shape[1] for o in outs)
            z = dc.add(dc.pad_channels(outs[0], width), dc.pad_channels(outs[1], width))
            feats.append(act_fn(z, [conv.w for _, conv in self.nodes[j]]))
        return [c3(feats[N_INPUTS + j]) for j, c3 in enumerate(self.c3)]


class DerivedNet:
    """Plain network for one genotype; evaluable and trainable, no architecture weights.

    ``concat_mode`` realises every concatenation point as concat-then-conv
    instead of the equivalent sum of per-input convolutions.
    """

    def __init__(self, genotype: Genotype, rng: np.random.Generator, concat_mode: bool = False, dtype=None):
        genotype.validate()
        self.genotype = genotype
        spec = genotype.spec
        one, three = CandidateOp.CONV1X1, CandidateOp.CONV3X3
        self.stem = PlainConv(12, spec.focus, three, rng, out_stride=2, dtype=dtype)
        by_name = {c.name: c for c in genotype.backbone}
        self.stages = []
        width, stride = spec.focus, 2
        for i, c in enumerate(spec.downsample):
            stride *= 2
            d = by_name[f"bb.down{i}"]
            down = PlainConv(width, channels_for(d.expansion, c), CandidateOp.from_label(d.op), rng,
                             stride=2, out_stride=stride, dtype=dtype)
            c3 = None
            width = down.w.shape[0]
            if i < spec.L_C:
                rows = [r for r in genotype.backbone if r.name == f"bb.c3_{i}" or r.name.startswith(f"bb.c3_{i}.")]
                c3 = DerivedC3(width, c, rows, rng, stride, concat_mode, dtype=dtype)
                width = c
            self.stages.append((down, c3))
        self.spp = DerivedSPP(width, spec.downsample[-1], spec.downsample[-1], rng, stride, concat_mode, dtype=dtype)
        fpn = spec.fpn_channels
        self.td = DerivedFusion("td", genotype, (32, 16, 8), (fpn[32], fpn[16], fpn[8]), rng, concat_mode, dtype)
        self.bu = DerivedFusion("bu", genotype, (8, 16, 32), (fpn[8], fpn[16], fpn[32]), rng, concat_mode, dtype)
        self.heads = [PlainConv(fpn[s], head_channels(spec.num_classes), one, rng, out_stride=s, act=False,
                                dtype=dtype) for s in SCALES]

    def convs(self) -> list:
        out = [self.stem]
        for down, c3 in self.stages:
            out.append(down)
            if c3 is not None:
                out += c3.convs()
        out += self.spp.convs() + self.td.convs() + self.bu.convs() + self.heads
        return out

    def weights(self) -> list:
        return [t for c in self.convs() for t in c.weights()]

    def param_count(self) -> int:
        return int(sum(t.size for t in self.weights()))

    def features(self, image: Tensor) -> list:
        check_image(image)
        x = self.stem(dc.space_to_depth(image))
        taps = []
        for down, c3 in self.stages:
            x = down(x)
            if c3 is not None:
                x = c3(x)
            taps.append(x)
        p5 = self.spp(x)
        td = self.td([p5, taps[2], taps[1]])
        return self.bu([td[2], td[1], td[0]])

    def detect(self, feats: list) -> list:
        return [h(f) for h, f in zip(self.heads, feats)]

    def calibrate(self, rng: np.random.Generator) -> None:
        """Rescale fresh weights to unit pre-activation scale on a seeded noise batch."""
        image = noise_batch(rng)
        calibrate(lambda: self.features(Tensor(image.data, dtype=self.stem.w.dtype)),
                  [c.b for c in self.convs()])


def _fold(w: np.ndarray, full_in: int) -> np.ndarray:
    """Bake the supernet's sqrt(full / live) input scaling into a sliced kernel."""
    live = w.shape[1]
    return w if live == full_in else w * np.sqrt(full_in / live).astype(w.dtype)


def _plain_slice(w: Tensor, b: Tensor, c_out: int, c_in: int):
    return _fold(w.data[:c_out, :c_in], w.shape[1]), b.data[:c_out]


def _load_c3(dst: DerivedC3, src) -> None:
    w, b = dst.cv1.w.shape[0], dst.cv1.w.shape[1]
    dst.cv1.load(*_plain_slice(src.cv1.w, src.cv1.b, w, b))
    dst.cv2.load(*_plain_slice(src.cv2.w, src.cv2.b, w, b))
    for (c1, c2), blk in zip(dst.blocks, src.blocks):
        c1.load(*_plain_slice(blk.conv1.w, blk.conv1.b, *c1.w.shape[:2]))
        k = extract_candidate_kernel(blk.conv2.kernel, c2.op)
        c2.load(_fold(k[:c2.w.shape[0], :c2.w.shape[1]], k.shape[1]), blk.conv2.kernel.bias.data[:c2.w.shape[0]])
    wa, wb = dst.split
    full = src.cv3.w.data
    merged = np.concatenate([full[:, :wa], full[:, src.hidden:src.hidden + wb]], axis=1)
    dst.cv3.load(_fold(merged, full.shape[1]), src.cv3.b.data)


def _load_edge(dst: PlainConv, edge) -> None:
    k = extract_candidate_kernel(edge.kernel, dst.op)
    dst.load(_fold(k[:dst.w.shape[0], :dst.w.shape[1]], k.shape[1]), edge.kernel.bias.data[:dst.w.shape[0]])


def materialize(genotype: Genotype, net: SuperNet, concat_mode: bool = False,
                rng: Optional[np.random.Generator] = None) -> DerivedNet:
    """Extract the chosen kernels and channel slices of ``net`` into a :class:`DerivedNet`."""
    if genotype.spec != net.spec:
        raise InputError("genotype was derived for a different search space")
    dtype = net.stem.w.dtype
    out = DerivedNet(genotype, rng or np.random.default_rng(0), concat_mode, dtype=dtype)
    out.stem.load(net.stem.w.data, net.stem.b.data)
    for (down, c3), sdown, sc3 in zip(out.stages, net.down, net.c3 + [None]):
        _load_edge(down, sdown)
        if c3 is not None:
            _load_c3(c3, sc3)
    out.spp.cv1.load(*_plain_slice(net.spp.cv1.w, net.spp.cv1.b, *out.spp.cv1.w.shape[:2]))
    out.spp.cv2.load(net.spp.cv2.w.data, net.spp.cv2.b.data)
    for dst, src in ((out.td, net.td), (out.bu, net.bu)):
        for j, node in enumerate(dst.nodes):
            for p, conv in node:
                _load_edge(conv, src.edges[j][p])
        for dc3, sc3 in zip(dst.c3, src.c3):
            _load_c3(dc3, sc3)
    for dh, sh in zip(out.heads, net.heads):
        dh.load(sh.w.data, sh.b.data)
    return out


def count_params_flops(genotype: Genotype, input_hw: tuple) -> tuple:
    """(parameters, multiply-accumulates) of the realised network for one image."""
    h, w = input_hw
    if h % 32 or w % 32:
        raise InputError(f"input size {input_hw} is not divisible by 32")
    net = DerivedNet(genotype, np.random.default_rng(0))
    params = macs = 0
    for conv in net.convs():
        params += conv.w.size + conv.b.size
        macs += conv.w.size * (h // conv.out_stride) * (w // conv.out_stride)
    return int(params), int(macs)


__all__ = ["DerivedNet", "EDGE_SCALE", "FPN_BLOCKS", "PlainConv", "count_params_flops", "materialize"]

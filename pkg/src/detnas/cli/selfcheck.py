"""Invariant suite behind the ``selfcheck`` command.

Each check raises AssertionError (or any exception) on failure and may
return a short detail string.
"""

from __future__ import annotations

import time
import traceback

import numpy as np
from scipy import stats

from detnas import diffcore as dc
from detnas.chansearch import (
    channels_for,
    concat_conv_to_sum,
    gumbel_onehot,
    gumbel_softmax,
    sample,
    straight_through,
    temperature,
)
from detnas.diffcore import Tensor
from detnas.errors import ConfigError
from detnas.kernelreuse import (
    ALL_OPS,
    UnifiedKernel,
    build_mask,
    compound_conv,
    embed_kernel,
    extract_candidate_kernel,
    independent_param_count,
    shared_param_count,
)
from detnas.search.loss import detection_loss
from detnas.supernet import (
    ArchParams,
    Genotype,
    build_supernet,
    count_search_space,
    derive,
    forced_params,
    forward,
    fuse_node,
    materialize,
    preset,
    random_genotype,
)
from detnas.supernet.genotype import candidates_for

REFERENCE_SIZES = {
    "s": ("7.9e11", "9.8e24", "7.7e36"),
    "m": ("3.8e18", "5.2e30", "2.0e49"),
    "l": ("1.8e25", "2.8e36", "5.0e61"),
    "x": ("8.7e31", "1.5e42", "1.3e74"),
}


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def explicit_mixture(x: Tensor, uk: UnifiedKernel, alpha: np.ndarray, stride: int) -> np.ndarray:
    """Weighted sum of each candidate evaluated as its own native convolution."""
    out = 0.0
    for a, op in zip(alpha, uk.candidates):
        k = Tensor(extract_candidate_kernel(uk, op))
        y = dc.conv2d(x, k, uk.bias, stride=stride, padding=op.padding, dilation=op.dilation)
        out = out + a * y.data.astype(np.float64)
    return out


def check_conv_oracle(rng):
    y = dc.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    np.testing.assert_array_equal(y, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def check_masks(rng):
    sizes = [int(build_mask(op).sum()) for op in ALL_OPS]
    assert sizes == [1, 9, 25, 9], sizes
    assert shared_param_count(3, 5) == 25 * 15 + 5
    assert independent_param_count(3, 5) == 44 * 15 + 4 * 5
    return f"ratio {25 / 44:.3f}"


def check_eq1(rng, n=50):
    worst = 0.0
    for _ in range(n):
        c_in, c_out, size, stride = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 9), rng.choice([1, 2])
        uk = UnifiedKernel.init(int(c_out), int(c_in), rng, dtype=np.float32)
        uk.bias.data = rng.standard_normal(uk.c_out).astype(np.float32)
        alpha = dc.softmax(Tensor(rng.standard_normal(4) * 2, dtype=np.float32)).data
        x = Tensor(rng.standard_normal((int(rng.integers(1, 3)), int(c_in), int(size), int(size))), dtype=np.float32)
        worst = max(worst, rel_err(compound_conv(x, uk, alpha, int(stride)).data, explicit_mixture(x, uk, alpha, int(stride))))
    assert worst <= 1e-5, worst
    return f"max rel err {worst:.1e} over {n}"


def check_extract_embed(rng):
    uk = UnifiedKernel.init(3, 2, rng)
    for op in ALL_OPS:
        k = extract_candidate_kernel(uk, op)
        np.testing.assert_array_equal(embed_kernel(k, op), uk.theta.data * build_mask(op))


def check_prop1(rng, n=50):
    worst = 0.0
    for _ in range(n):
        m = int(rng.integers(1, 4))
        splits = [int(v) for v in rng.integers(1, 5, size=m)]
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        xs = [Tensor(rng.standard_normal((2, c, 7, 7)), dtype=np.float32) for c in splits]
        w = Tensor(rng.standard_normal((3, sum(splits), k, k)), dtype=np.float32)
        cat = dc.conv2d(dc.concat_channels(xs), w, stride=stride, padding=k // 2).data
        parts = concat_conv_to_sum(w, splits)
        total = sum(dc.conv2d(x, p, stride=stride, padding=k // 2).data.astype(np.float64) for x, p in zip(xs, parts))
        worst = max(worst, rel_err(cat, total))
    assert worst <= 1e-5, worst
    return f"max rel err {worst:.1e} over {n}"


def check_gumbel(rng, n=20000):
    alpha = np.log([0.7, 0.2, 0.1])
    counts = np.zeros(3)
    for _ in range(n):
        counts[gumbel_onehot(alpha, rng).index] += 1
    freq = counts / n
    assert np.abs(freq - [0.7, 0.2, 0.1]).max() <= 0.01, freq
    p = stats.chisquare(counts, np.array([0.7, 0.2, 0.1]) * n).pvalue
    assert p > 0.01, p
    return f"freq {np.round(freq, 3).tolist()}, chi-square p={p:.2f}"


def check_straight_through(rng, n=10):
    with dc.precision(np.float64):
        for _ in range(n):
            a = Tensor(rng.standard_normal(3), requires_grad=True)
            tau = float(rng.uniform(0.2, 3.0))
            s = sample(a, rng, tau)
            st = straight_through(s)
            np.testing.assert_array_equal(st.data, s.onehot)
            proj = rng.standard_normal(3)
            dc.backward(dc.sum(dc.mul(st, proj)))
            num = np.zeros(3)
            for i in range(3):
                e = np.zeros(3)
                e[i] = 1e-6
                hi = gumbel_softmax(a.data + e, s.noise, tau).data @ proj
                lo = gumbel_softmax(a.data - e, s.noise, tau).data @ proj
                num[i] = (hi - lo) / 2e-6
            assert rel_err(a.grad, num) <= 1e-5 or np.abs(a.grad - num).max() <= 1e-9


def _gradchecks(rng, dtype):
    with dc.precision(dtype):
        t = lambda *shape: Tensor(rng.standard_normal(shape), requires_grad=True, dtype=dc.default_dtype())
        uk = UnifiedKernel.init(3, 2, rng)
        uk.bias = None
        x = t(1, 2, 5, 5)
        alpha = t(4)
        g = rng.standard_normal(4)
        errs = {
            "conv2d": dc.gradcheck(lambda a, w: dc.conv2d(a, w, stride=2, padding=1), [t(1, 2, 6, 6), t(3, 2, 3, 3)]),
            "compound_conv": dc.gradcheck(
                lambda xx, th, al: compound_conv(xx, UnifiedKernel(th, None, ALL_OPS), dc.softmax(al)),
                [x, uk.theta, alpha]),
            "gumbel_softmax": dc.gradcheck(lambda al: gumbel_softmax(al, g, 0.7), [alpha]),
        }
        k1, k2 = UnifiedKernel.init(2, 2, rng), UnifiedKernel.init(2, 3, rng)
        errs["fuse_node"] = dc.gradcheck(
            lambda a, b, e, o1, o2: fuse_node([a, b], e, [o1, o2], [k1, k2], [2, 2]),
            [t(1, 2, 4, 4), t(1, 3, 4, 4), t(2), t(4), t(4)])
        targets = [{"obj": (rng.random((1, 1, 2, 2)) > 0.5).astype(float), "cls": rng.integers(-1, 2, (1, 2, 2)),
                    "box": rng.random((1, 4, 2, 2))}]
        targets[0]["obj"] = (targets[0]["cls"] >= 0).astype(float)[:, None]
        errs["detection_loss"] = dc.gradcheck(lambda p: detection_loss([p], targets), [t(1, 7, 2, 2)])
    return errs


def check_gradients(rng):
    out = []
    for dtype, tol in ((np.float32, 1e-3), (np.float64, 1e-5)):
        for name, err in _gradchecks(rng, dtype).items():
            assert err <= tol, f"{name} at {np.dtype(dtype).name}: {err:.2e}"
            out.append(err)
    return f"worst {max(out):.1e}"


def check_channels(rng):
    assert channels_for(0.75, 8) == 6
    try:
        channels_for(0.75, 6)
    except ConfigError:
        return None
    raise AssertionError("non-integer width was not rejected")


def check_temperature(rng):
    taus = [temperature(s, 100) for s in range(101)]
    assert taus[0] == 5.0 and abs(taus[-1] - 0.1) < 1e-12
    assert all(a >= b for a, b in zip(taus, taus[1:]))


def check_space_sizes(rng):
    for level, expected in REFERENCE_SIZES.items():
        size = count_search_space(preset(level))
        assert size.rounded_product() == expected, (level, size.rounded_product())
        assert size.total == size.backbone * size.fpn
    return "12/12 entries"


def check_bridge(rng, n=3):
    spec = preset("s-mini", 3)
    net, _ = build_supernet(spec, int(rng.integers(1 << 30)))
    image = Tensor(rng.random((2, 3, 64, 64)))
    worst = 0.0
    with dc.no_grad():
        for _ in range(n):
            g = random_genotype(spec, rng)
            a = forward(net, forced_params(g), image)
            b = materialize(g, net).features(image)
            worst = max(worst, max(rel_err(y.data, x.data) for x, y in zip(a, b)))
    assert worst <= 1e-5, worst
    return f"max rel err {worst:.1e} over {n} genotypes"


def check_derivation(rng):
    spec = preset("s-mini", 3)
    zero = derive(ArchParams(spec))
    for c in zero.backbone + [c for b in zero.fpn_c3 for c in zero.fpn_c3[b]]:
        ops, rates = candidates_for(c.block_kind)
        assert (c.op, c.expansion) == (ops[0].label, rates[0]), c
    assert all([e.pred for e in node] == [0, 1] for b in zero.fpn for node in zero.fpn[b])
    values = {n: rng.standard_normal(len(s.candidates)) for n, s in ArchParams(spec).slots.items()}
    g = derive(ArchParams(spec, values, np.float64))
    name = next(iter(values))
    shifted = dict(values, **{name: values[name] + 3.0})
    assert derive(ArchParams(spec, shifted, np.float64)) == g
    assert Genotype.from_json(g.to_json()) == g


CHECKS = (
    ("conv2d all-ones oracle", check_conv_oracle),
    ("candidate masks and parameter counts", check_masks),
    ("compound convolution equals explicit candidate sum", check_eq1),
    ("kernel extraction round trip", check_extract_embed),
    ("concat-then-conv equals sum of split convs", check_prop1),
    ("gumbel-argmax frequencies", check_gumbel),
    ("straight-through forward and gradient", check_straight_through),
    ("gradient checks (32-bit and 64-bit)", check_gradients),
    ("integer channel widths", check_channels),
    ("temperature schedule", check_temperature),
    ("search-space sizes", check_space_sizes),
    ("supernet/materialized bridge", check_bridge),
    ("derivation tie-break, shift invariance, JSON round trip", check_derivation),
)


def run_selfcheck(seed: int = 0, out=print) -> list:
    """Run every check; returns [(name, ok, detail, seconds)]."""
    results = []
    for i, (name, fn) in enumerate(CHECKS):
        rng = np.random.default_rng([seed, i])
        start = time.perf_counter()
        try:
            detail = fn(rng) or ""
            ok = True
        except Exception as e:  # noqa: BLE001 - every failure is reported, not raised
            ok, detail = False, f"{type(e).__name__}: {e}".strip()
            if not str(e):
                detail += " " + traceback.format_exc(limit=1).strip().splitlines()[-1]
        secs = time.perf_counter() - start
        results.append((name, ok, detail, secs))
        out(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
    return results

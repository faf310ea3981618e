import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detnas import diffcore as dc
from detnas.cli.synthetic import SyntheticParams, gen_synthetic_dataset, to_detection_set
from detnas.diffcore import Tensor
from detnas.errors import ConfigError, InputError
from detnas.search import (
    BilevelConfig,
    DetectionSet,
    TrainMetrics,
    arch_step,
    detection_loss,
    grid_targets,
    make_state,
    run_search,
    supernet_loss,
    split_dataset,
    train_derived,
    weight_step,
)
from detnas.supernet import ArchParams, DerivedNet, build_supernet, derive, preset

MINI = preset("s-mini", 3)


def tiny_set(n=16, seed=0):
    return to_detection_set(gen_synthetic_dataset(n, SyntheticParams(), seed), 3)


def fast(**kw):
    base = dict(epochs=3, warmup_epochs=1, batch_size=8, seed=0)
    base.update(kw)
    return BilevelConfig(**base)


def without_time(rows):
    return [{k: v for k, v in r.items() if k != "seconds"} for r in rows]


class TestSplit:
    def test_disjoint_and_covering(self):
        w, a = split_dataset(list(range(11)), 0.5, 3)
        assert len(w) == 6 and len(a) == 5  # 5.5 rounds half up
        assert sorted(w + a) == list(range(11))

    def test_seeded(self):
        assert split_dataset(list(range(20)), 0.3, 1) == split_dataset(list(range(20)), 0.3, 1)
        assert split_dataset(list(range(20)), 0.3, 1) != split_dataset(list(range(20)), 0.3, 2)

    @pytest.mark.parametrize("n,ratio", [(0, 0.5), (3, 0.0), (3, 1.0), (3, 0.1), (3, 0.9)])
    def test_degenerate(self, n, ratio):
        with pytest.raises(ConfigError):
            split_dataset(list(range(n)), ratio, 0)

    def test_subsets_carry_targets(self):
        ds = tiny_set(10)
        w, a = split_dataset(ds, 0.5, 0)
        assert isinstance(w, DetectionSet) and len(w) + len(a) == 10
        assert w.targets[8]["obj"].shape == (5, 1, 8, 8)


class TestTargets:
    def test_cell_assignment(self):
        t = grid_targets([[(2, 0.3, 0.8, 0.2, 0.1)]], (64, 64), 3)
        assert t[8]["cls"][0, 6, 2] == 2 and t[8]["obj"].sum() == 1
        np.testing.assert_allclose(t[8]["box"][0, :, 6, 2], [0.4, 0.4, 0.2, 0.1], rtol=1e-6)
        assert t[32]["cls"][0, 1, 0] == 2

    def test_right_edge_clamped(self):
        t = grid_targets([[(0, 1.0, 1.0, 0.1, 0.1)]], (32, 32), 1)
        assert t[32]["obj"][0, 0, 0, 0] == 1.0

    def test_bad_class(self):
        with pytest.raises(InputError):
            grid_targets([[(3, 0.5, 0.5, 0.1, 0.1)]], (32, 32), 3)


def perfect_preds(targets, nc, margin=30.0):
    out = []
    for t in targets:
        n, _, h, w = t["obj"].shape
        p = np.zeros((n, 1 + nc + 4, h, w))
        p[:, 0] = np.where(t["obj"][:, 0] > 0, margin, -margin)
        for c in range(nc):
            p[:, 1 + c] = np.where(t["cls"] == c, margin, -margin)
        p[:, 1 + nc:] = t["box"]
        out.append(p)
    return out


class TestLoss:
    def targets(self):
        boxes = [[(0, 0.3, 0.3, 0.2, 0.2), (1, 0.7, 0.6, 0.4, 0.3)], [(2, 0.5, 0.5, 0.5, 0.5)]]
        t = grid_targets(boxes, (64, 64), 3)
        return [t[s] for s in (8, 16, 32)]

    def test_perfect_prediction_near_zero(self, f64):
        t = self.targets()
        loss = detection_loss([Tensor(p) for p in perfect_preds(t, 3)], t).item()
        assert 0 <= loss < 1e-5

    def test_box_residual_is_quadratic(self, f64):
        t = self.targets()
        base = perfect_preds(t, 3)
        losses = []
        for delta in (0.0, 0.1, 0.2):
            preds = [p.copy() for p in base]
            for p, tt in zip(preds, t):
                p[:, 4:] += delta * tt["obj"]
            losses.append(detection_loss([Tensor(p) for p in preds], t).item())
        # excess over the clamped perfect baseline
        assert (losses[2] - losses[0]) / (losses[1] - losses[0]) == pytest.approx(4.0, rel=1e-9)

    def test_constant_prediction_value(self, f64):
        t = self.targets()
        zeros = [Tensor(np.zeros((2, 8) + tt["cls"].shape[1:])) for tt in t]
        n_pos = sum(tt["obj"].sum() for tt in t)
        box = sum(float((tt["box"] ** 2).sum()) for tt in t)
        want = 3 * math.log(2) + (box + n_pos * math.log(3)) / n_pos
        assert detection_loss(zeros, t).item() == pytest.approx(want, rel=1e-6)  # float32 box targets

    def test_gradient(self, rng, f64):
        t = self.targets()
        preds = [Tensor(rng.standard_normal((2, 8) + tt["cls"].shape[1:]), requires_grad=True) for tt in t]
        assert dc.gradcheck(lambda *p: detection_loss(p, t), preds) <= 1e-5

    def test_layout_checked(self):
        t = self.targets()
        with pytest.raises(InputError):
            detection_loss([Tensor(np.zeros((2, 8, 8, 8)))], t)
        with pytest.raises(InputError):
            detection_loss([Tensor(np.zeros((2, 5, 8, 8))), Tensor(np.zeros((2, 5, 4, 4))),
                            Tensor(np.zeros((2, 5, 2, 2)))], t)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"epochs": -1}, {"weight_lr": 0}, {"momentum": 1.0}, {"split_ratio": 1.0},
        {"tau0": 0.1, "tau_min": 0.2}, {"batch_size": 0}, {"grad_clip": -1.0}, {"weight_decay": -1e-4},
    ])
    def test_rejected(self, kw):
        with pytest.raises(ConfigError):
            BilevelConfig(**kw)


class TestSteps:
    def setup_method(self):
        self.net, self.arch = build_supernet(MINI, 2)
        self.config = fast()
        self.state = make_state(self.net, self.arch, self.config, np.random.default_rng(0))
        self.batch = tiny_set(8)

    def snapshot(self):
        return [t.data.copy() for t in self.net.weights()], [t.data.copy() for t in self.arch.tensors()]

    def test_weight_step_leaves_arch_bitwise(self):
        w0, a0 = self.snapshot()
        weight_step(self.net, self.arch, self.batch, self.config, self.state)
        w1, a1 = self.snapshot()
        assert all(np.array_equal(x, y) for x, y in zip(a0, a1))
        assert any(not np.array_equal(x, y) for x, y in zip(w0, w1))

    def test_arch_step_leaves_weights_bitwise(self):
        w0, a0 = self.snapshot()
        arch_step(self.net, self.arch, self.batch, self.config, self.state)
        w1, a1 = self.snapshot()
        assert all(np.array_equal(x, y) for x, y in zip(w0, w1))
        assert any(not np.array_equal(x, y) for x, y in zip(a0, a1))

    def test_single_step_descends_for_small_lr(self):
        # replay the same Gumbel draws before and after the step so the loss is one fixed function
        decreased = []
        for lr in (1e-2, 1e-3, 1e-4):
            net, arch = build_supernet(MINI, 2)
            config = fast(weight_lr=lr, weight_decay=0.0)
            seed_state = np.random.default_rng(5).bit_generator.state

            def replay():
                g = np.random.default_rng()
                g.bit_generator.state = seed_state
                return g

            with dc.no_grad():
                before = supernet_loss(net, arch, self.batch, replay(), config.tau0).item()
            state = make_state(net, arch, config, replay())
            weight_step(net, arch, self.batch, config, state)
            with dc.no_grad():
                after = supernet_loss(net, arch, self.batch, replay(), config.tau0).item()
            decreased.append(after < before)
        assert decreased[-1] and any(decreased)

    def test_clipping_bounds_update(self):
        from detnas.search.train import SGD

        p = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
        p.grad = np.array([30.0, 40.0])
        SGD([p], lr=1.0, clip=10.0).step()
        np.testing.assert_allclose(p.data, [-6.0, -8.0])


class TestRunSearch:
    def test_zero_epochs_derives_initial_weights(self):
        g, m = run_search(MINI, tiny_set(), fast(epochs=0, warmup_epochs=0))
        assert g == derive(ArchParams(MINI))
        assert len(m.rows) == 1

    def test_metrics_layout(self):
        _, m = run_search(MINI, tiny_set(), fast())
        assert m.column("epoch") == [0, 1, 2, 3]
        assert math.isnan(m.rows[1]["arch_loss"])  # warmup trains weights only
        assert m.rows[-1]["tau"] == pytest.approx(0.1)
        assert all(np.isfinite(m.column("weight_loss")))

    def test_deterministic(self):
        g1, m1 = run_search(MINI, tiny_set(), fast(seed=4))
        g2, m2 = run_search(MINI, tiny_set(), fast(seed=4))
        assert g1 == g2
        assert without_time(m1.rows) == without_time(m2.rows)
        assert m1.alphas == m2.alphas

    @pytest.mark.parametrize("lr", [0.003, 0.01, 0.03])
    def test_descends_across_learning_rates(self, lr):
        _, m = run_search(MINI, tiny_set(24), fast(epochs=4, weight_lr=lr))
        losses = m.column("weight_loss")
        assert losses[-1] < losses[0]

    def test_class_count_mismatch(self):
        with pytest.raises(ConfigError):
            train_derived(derive(ArchParams(preset("s-mini", 5))), tiny_set(), 1, fast())

    def test_csv_round_trip(self, tmp_path):
        _, m = run_search(MINI, tiny_set(), fast(epochs=1))
        m.write_csv(tmp_path / "m.csv")
        back = TrainMetrics.read_csv(tmp_path / "m.csv")
        for a, b in zip(m.rows, back.rows):
            for k in a:
                assert (math.isnan(a[k]) and math.isnan(b[k])) or a[k] == b[k]


class TestTrainDerived:
    def test_loss_mostly_non_increasing(self):
        g = derive(ArchParams(MINI))
        m = train_derived(g, tiny_set(32), 6, fast())
        losses = m.column("weight_loss")
        violations = sum(b > a for a, b in zip(losses, losses[1:]))
        assert violations <= 1, losses
        assert losses[-1] < losses[0]

    def test_smaller_than_supernet(self):
        net, _ = build_supernet(MINI, 0)
        g = derive(ArchParams(MINI))
        assert DerivedNet(g, np.random.default_rng(0)).param_count() < net.param_count()


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 60), ratio=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
def test_split_property(n, ratio, seed):
    n_w = math.floor(ratio * n + 0.5)
    if n_w in (0, n):
        with pytest.raises(ConfigError):
            split_dataset(list(range(n)), ratio, seed)
        return
    w, a = split_dataset(list(range(n)), ratio, seed)
    assert len(w) == n_w and not set(w) & set(a) and len(w) + len(a) == n

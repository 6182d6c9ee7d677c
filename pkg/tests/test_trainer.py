import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import hybridpatch.trainer as trainer
from hybridpatch import tensor as T
from hybridpatch.data import split_indices, synth_multimodal
from hybridpatch.losses import LossConfig, PairIndex, hybrid_loss
from hybridpatch.mining import MiningConfig, n_mined
from hybridpatch.model import Arch, HybridNetwork, Modality, Variant, encode, export_params, init_params
from hybridpatch.trainer import (
    LOG_FIELDS,
    SGD,
    DivergenceError,
    EarlyStopping,
    EpochRecord,
    TrainConfig,
    TrainLog,
    ablation_run,
    arm_config,
    prepare_data,
    sgd_step,
    train,
)


@pytest.fixture(scope="module")
def tiny():
    """Eight training, four validation and four test positives."""
    pairs = synth_multimodal(16, 3)
    return prepare_data(pairs, split_indices(16, 3, (0.5, 0.25, 0.25)))


def quick_cfg(**kw):
    base = dict(batch_size=4, max_epochs=2, init_scheme="he", arch=Arch.SIAMESE, loss=LossConfig(aux_weight_siam=0, aux_weight_asym=0))
    base.update(kw)
    return TrainConfig(**base)


def fresh_net(cfg, variant=Variant.L2):
    net = HybridNetwork(variant)
    init_params(net, cfg.seed, cfg.init_sigma, cfg.init_scheme)
    return net


def record(epoch, val_total=1.0, **kw):
    vals = dict(lr=0.01, train_total=1.0, train_main=1.0, train_aux_s=0.0, train_aux_a=0.0,
                val_total=val_total, val_main=val_total, val_aux_s=0.0, val_aux_a=0.0, mined_fraction=0.0)
    vals.update(kw)
    return EpochRecord(epoch=epoch, **vals)


class TestSgdStep:
    def test_plain_gradient_descent(self):
        p, g = np.array([1.0, -2.0]), np.array([0.5, 0.25])
        v = np.zeros(2)
        sgd_step([p], [g], [v], lr=0.1, momentum=0.0, weight_decay=0.0)
        np.testing.assert_allclose(p, [0.95, -2.025])

    def test_zero_gradient_still_moves_with_velocity(self):
        p, v = np.array([1.0]), np.array([2.0])
        sgd_step([p], [np.zeros(1)], [v], lr=0.1, momentum=0.9, weight_decay=0.0)
        assert v[0] == pytest.approx(1.8)
        assert p[0] == pytest.approx(1.0 - 0.1 * 0.9 * 2.0)

    def test_none_gradient_is_zero(self):
        p, v = np.array([1.0]), np.array([2.0])
        sgd_step([p], [None], [v], lr=0.1, momentum=0.5, weight_decay=0.0)
        assert p[0] == pytest.approx(0.9)

    @given(st.floats(0.01, 2.0), st.floats(0.0, 0.99), st.floats(0.0, 0.1), st.floats(-3, 3), st.floats(0.001, 0.2))
    @settings(max_examples=100, deadline=None)
    def test_two_steps_on_quadratic_match_recursion(self, a, mom, wd, x0, lr):
        # f(x) = a x^2 / 2, so grad = a x
        p, v = np.array([x0]), np.zeros(1)
        x, vel = x0, 0.0
        for _ in range(2):
            sgd_step([p], [a * p.copy()], [v], lr, mom, wd)
            vel = mom * vel + a * x + wd * x
            x = x - lr * vel
        assert p[0] == pytest.approx(x, rel=1e-12, abs=1e-15)
        assert v[0] == pytest.approx(vel, rel=1e-12, abs=1e-15)

    def test_decay_mask(self):
        p, q = np.array([1.0]), np.array([1.0])
        sgd_step([p, q], [np.zeros(1), np.zeros(1)], [np.zeros(1), np.zeros(1)], 1.0, 0.0, 0.5, [True, False])
        assert p[0] == 0.5 and q[0] == 1.0

    @pytest.mark.parametrize("shapes", [((2,), (3,), (2,)), ((2,), (2,), (1,))])
    def test_shape_mismatch(self, shapes):
        p, g, v = (np.zeros(s) for s in shapes)
        with pytest.raises(ValueError, match="shape"):
            sgd_step([p], [g], [v], 0.1, 0.9, 0.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step([np.zeros(1)], [], [np.zeros(1)], 0.1, 0.9, 0.0)

    def test_biases_are_not_decayed(self):
        net = HybridNetwork(Variant.L2, np.float64)
        init_params(net, 0, 0.1)
        for _, t in net.named_parameters():
            t.data[...] = 1.0
        opt = SGD(net, momentum=0.0, weight_decay=0.5)
        for _, t in net.named_parameters():
            t.grad = np.zeros_like(t.data)
        opt.step(1.0)
        for name, t in net.named_parameters():
            assert np.all(t.data == (1.0 if name.endswith(".bias") else 0.5)), name


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr, c.momentum, c.weight_decay, c.batch_size) == (0.01, 0.9, 0.0005, 128)
        assert c.lr_drop_epochs == (75, 95) and c.lr_drop_factor == 0.1 and c.early_stop_patience == 10

    def test_schedule(self):
        c = TrainConfig(lr_drop_epochs=(2,))
        assert [c.lr_at(e) for e in range(4)] == pytest.approx([0.01, 0.01, 0.001, 0.001])
        d = TrainConfig()
        assert d.lr_at(74) == 0.01 and d.lr_at(75) == pytest.approx(0.001) and d.lr_at(95) == pytest.approx(0.0001)

    @pytest.mark.parametrize("kw", [{"lr": -0.1}, {"momentum": 1.0}, {"momentum": -0.1}, {"batch_size": 1}, {"early_stop_patience": 0}, {"max_epochs": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_to_dict_is_json(self):
        d = TrainConfig().to_dict()
        assert json.loads(json.dumps(d))["arch"] == "hybrid_aux"


class TestEarlyStopping:
    def test_scripted_sequence(self):
        seq = [5.0, 4.0, 4.5, 3.0, 3.1, 3.2, 3.0, 3.5]
        es = EarlyStopping(patience=3)
        out = [es.update(e, v) for e, v in enumerate(seq)]
        # last improvement at epoch 3; an equal value is not an improvement
        assert [o[0] for o in out[:7]] == [True, True, False, True, False, False, False]
        assert [o[1] for o in out[:7]] == [False] * 6 + [True]
        assert es.best_epoch == 3

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=40), st.integers(1, 6))
    @settings(max_examples=100, deadline=None)
    def test_stops_exactly_patience_after_last_improvement(self, seq, patience):
        es = EarlyStopping(patience)
        best, last = np.inf, None
        for e, v in enumerate(seq):
            _, stop = es.update(e, v)
            if v < best:
                best, last = v, e
            assert stop == (e - last >= patience)
            if stop:
                break

    def test_train_stops_on_scripted_validation(self, tiny, monkeypatch):
        script = iter([1.0, 0.9, 0.95, 0.92, 0.91, 0.5])
        monkeypatch.setattr(trainer, "pairset_loss", lambda *a: dict(total=next(script), main=0.0, aux_siam=0.0, aux_asym=0.0))
        cfg = quick_cfg(max_epochs=10, early_stop_patience=3, lr=0.0)
        _, tlog = train(fresh_net(cfg), tiny, cfg)
        assert len(tlog) == 5 and tlog.stopped_early and tlog.best_epoch == 1


class TestTrainLog:
    def test_monotone_epochs(self):
        tlog = TrainLog()
        tlog.append(record(0))
        with pytest.raises(ValueError):
            tlog.append(record(0))

    def test_jsonl_round_trip(self):
        tlog = TrainLog()
        for e, v in enumerate([3.0, 2.0, 2.5]):
            tlog.append(record(e, v))
        text = tlog.to_jsonl()
        assert [list(json.loads(line)) for line in text.splitlines()] == [list(LOG_FIELDS)] * 3
        back = TrainLog.from_jsonl(text)
        assert back.records == tlog.records and back.best_epoch == 1


class TestTrain:
    def test_zero_epochs(self, tiny):
        cfg = quick_cfg(max_epochs=0)
        net = fresh_net(cfg)
        before = [t.data.copy() for t in net.parameters()]
        out, tlog = train(net, tiny, cfg)
        assert len(tlog) == 0 and tlog.best_epoch is None
        assert all(np.array_equal(a, t.data) for a, t in zip(before, out.parameters()))

    def test_lr_zero_leaves_parameters_bitwise_unchanged(self, tiny):
        cfg = quick_cfg(max_epochs=1, lr=0.0, arch=Arch.HYBRID_AUX, loss=LossConfig())
        net = fresh_net(cfg)
        before = [t.data.copy() for t in net.parameters()]
        train(net, tiny, cfg)
        assert all(np.array_equal(a, t.data) for a, t in zip(before, net.parameters()))

    def test_logged_schedule(self, tiny):
        cfg = quick_cfg(max_epochs=4, lr_drop_epochs=(2,), early_stop_patience=10)
        _, tlog = train(fresh_net(cfg), tiny, cfg)
        assert tlog.column("lr") == pytest.approx([0.01, 0.01, 0.001, 0.001])
        assert tlog.column("epoch").tolist() == [0, 1, 2, 3]

    def test_parts_sum_to_total(self, tiny):
        cfg = quick_cfg(max_epochs=1, arch=Arch.HYBRID_AUX, loss=LossConfig())
        _, tlog = train(fresh_net(cfg), tiny, cfg)
        r = tlog.records[0]
        assert r.train_main + r.train_aux_s + r.train_aux_a == pytest.approx(r.train_total, abs=1e-5)
        assert r.val_main + r.val_aux_s + r.val_aux_a == pytest.approx(r.val_total, abs=1e-5)
        assert r.mined_fraction == pytest.approx(n_mined_fraction(8, 4, 0.8))
        assert r.seconds is None

    def test_deterministic(self, tiny):
        cfg = quick_cfg(max_epochs=2)
        a_net, a_log = train(fresh_net(cfg), tiny, cfg)
        b_net, b_log = train(fresh_net(cfg), tiny, cfg)
        assert a_log.to_jsonl() == b_log.to_jsonl()
        assert export_params(a_net) == export_params(b_net)

    def test_returns_best_validation_copy(self, tiny, monkeypatch):
        script = iter([1.0, 0.5, 0.7])
        monkeypatch.setattr(trainer, "pairset_loss", lambda *a: dict(total=next(script), main=0.0, aux_siam=0.0, aux_asym=0.0))
        snapshots = []
        real_copy = HybridNetwork.copy

        def tracking_copy(self):
            c = real_copy(self)
            snapshots.append(export_params(c))
            return c

        monkeypatch.setattr(HybridNetwork, "copy", tracking_copy)
        cfg = quick_cfg(max_epochs=3)
        best, tlog = train(fresh_net(cfg), tiny, cfg)
        assert tlog.best_epoch == 1
        # copies: initial, after epoch 0, after epoch 1; epoch 2 did not improve
        assert len(snapshots) == 3
        assert export_params(best) == snapshots[2]

    @staticmethod
    def poison_call(monkeypatch, k):
        """Make the ``k``-th loss evaluation (training or validation) NaN."""
        calls = {"n": 0}

        def poisoned(*args, **kw):
            total, parts = hybrid_loss(*args, **kw)
            calls["n"] += 1
            if calls["n"] == k:
                total = T.mul(total, np.float32(np.nan))
            return total, parts

        monkeypatch.setattr(trainer, "hybrid_loss", poisoned)

    def test_divergence_names_epoch_and_batch(self, tiny, monkeypatch):
        # evaluations: epoch 0 batches 0 and 1, validation, then epoch 1 batch 0
        self.poison_call(monkeypatch, 4)
        with pytest.raises(DivergenceError, match="epoch 1, batch 0") as err:
            train(fresh_net(quick_cfg()), tiny, quick_cfg(max_epochs=3))
        assert (err.value.epoch, err.value.batch) == (1, 0)

    def test_divergence_in_validation(self, tiny, monkeypatch):
        self.poison_call(monkeypatch, 3)
        with pytest.raises(DivergenceError, match="epoch 0, validation") as err:
            train(fresh_net(quick_cfg()), tiny, quick_cfg())
        assert err.value.batch is None

    def test_variant_mismatch(self, tiny):
        cfg = quick_cfg()
        with pytest.raises(ValueError, match="variant|softmax|l2"):
            train(fresh_net(cfg, Variant.SOFTMAX), tiny, cfg)

    def test_stats_come_from_training_split(self, tiny):
        cfg = quick_cfg(max_epochs=0)
        out, _ = train(fresh_net(cfg), tiny, cfg)
        assert out.norm == tiny.stats


def n_mined_fraction(n_train, batch, h_m):
    sizes = [min(batch, n_train - s) for s in range(0, n_train, batch)]
    return sum(n_mined(k, h_m) for k in sizes) / n_train


class TestOverfit:
    def test_fifty_steps_on_one_batch(self):
        """A single fixed batch, no weight decay: the loss must fall."""
        pairs = synth_multimodal(40, 7)
        data = prepare_data(pairs, split_indices(40, 7))
        net = HybridNetwork(Variant.L2)
        init_params(net, 0, scheme="he")
        net.norm = data.stats
        xs, ys = trainer._normalized(net, data.train.xs[:8], data.train.ys[:8], np.float32)
        pairs_ix = PairIndex.positives_and_negatives((np.arange(8) + 1) % 8)
        cfg = LossConfig(aux_weight_siam=0, aux_weight_asym=0)
        opt = SGD(net, momentum=0.9, weight_decay=0.0)
        losses = []
        for _ in range(50):
            ex, ey = encode(net, xs, Modality.X, Arch.SIAMESE), encode(net, ys, Modality.Y, Arch.SIAMESE)
            loss, _ = hybrid_loss(net, ex, ey, pairs_ix, cfg, Arch.SIAMESE)
            net.zero_grad()
            T.backward(loss)
            opt.step(0.01)
            losses.append(float(loss.data))
        assert losses[-1] < 0.7 * losses[0]
        # smoothed over momentum oscillation the curve keeps going down
        blocks = np.array(losses).reshape(5, 10).mean(axis=1)
        assert np.all(np.diff(blocks) < 0)


class TestAblationArms:
    def test_arm_config_switches_only_arch_and_weights(self):
        base = TrainConfig(loss=LossConfig(aux_weight_siam=0.3, aux_weight_asym=0.3))
        for arch in Arch:
            arm = arm_config(base, arch)
            aux = 1.0 if arch is Arch.HYBRID_AUX else 0.0
            assert arm.arch is arch and arm.loss.aux_weight_siam == arm.loss.aux_weight_asym == aux
            assert dataclasses.replace(arm, arch=base.arch, loss=base.loss) == base

    def test_bookkeeping_and_shared_data_order(self, tiny, monkeypatch):
        seen = {}
        current = {"arm": None}
        real_aug = trainer.augment_arrays

        def spy(xs, ys, rng):
            out = real_aug(xs, ys, rng)
            seen.setdefault(current["arm"], []).append(out[0].tobytes() + out[1].tobytes())
            return out

        monkeypatch.setattr(trainer, "augment_arrays", spy)
        cfg = quick_cfg(max_epochs=1)
        logs, nets = {}, {}
        for arch in Arch:
            current["arm"] = arch
            nets[arch], logs[arch] = ablation_run(tiny, arch, cfg)
        batches = list(seen.values())
        assert all(b == batches[0] for b in batches)
        assert logs[Arch.HYBRID].records[0].val_aux_s == 0.0 == logs[Arch.HYBRID].records[0].train_aux_a
        assert logs[Arch.HYBRID_AUX].records[0].val_aux_s > 0 and logs[Arch.HYBRID_AUX].records[0].train_aux_a > 0

        init = HybridNetwork(Variant.L2)
        init_params(init, cfg.seed, cfg.init_sigma, cfg.init_scheme)
        frozen = {
            Arch.SIAMESE: ("asym_x", "asym_y", "merge"),
            Arch.ASYMMETRIC: ("siamese", "merge"),
        }
        start = dict(init.named_parameters())
        for arch, prefixes in frozen.items():
            for name, t in nets[arch].named_parameters():
                if name.startswith(prefixes):
                    assert np.array_equal(t.data, start[name].data), f"{arch.value} moved {name}"

    def test_hybrid_mining_switch(self, tiny):
        on = quick_cfg(max_epochs=1, mining=MiningConfig(enabled=True))
        off = quick_cfg(max_epochs=1, mining=MiningConfig(enabled=False))
        assert ablation_run(tiny, Arch.SIAMESE, on)[1].records[0].mined_fraction > 0
        assert ablation_run(tiny, Arch.SIAMESE, off)[1].records[0].mined_fraction == 0

    def test_mining_warm_up(self, tiny):
        cfg = quick_cfg(max_epochs=2, mining=MiningConfig(start_epoch=1))
        _, tlog = ablation_run(tiny, Arch.SIAMESE, cfg)
        assert tlog.column("mined_fraction")[0] == 0 and tlog.column("mined_fraction")[1] > 0

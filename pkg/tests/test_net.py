"""Architecture wiring, accounting, condensation scheduling, checkpoints."""

import numpy as np
import pytest

from condenseg import tensor as T
from condenseg.lgconv import CondensationSchedule
from condenseg.net import (
    ConfigError,
    NetConfig,
    Network,
    apply_condensation,
    build,
    load_checkpoint,
    save_checkpoint,
)
from condenseg.tensor import ShapeError, Tensor, grad_check


def small_config():
    return NetConfig(input_size=32, layers_per_block=(1, 1, 2, 1, 1),
                     pool_layers=2)


def small_net(seed=0):
    return build(small_config(), rng=np.random.default_rng(seed))


class TestConfig:
    def test_default_valid(self):
        assert NetConfig().violations() == []

    def test_wrong_block_count(self):
        cfg = NetConfig(layers_per_block=(2, 3, 4, 3, 2))  # pool_layers still 3
        with pytest.raises(ConfigError):
            build(cfg)

    def test_non_palindromic(self):
        cfg = NetConfig(layers_per_block=(2, 3, 4, 5, 4, 3, 1))
        assert any("palindromic" in v for v in cfg.violations())

    def test_input_size_not_divisible(self):
        cfg = NetConfig(input_size=100)
        assert any("divisible" in v for v in cfg.violations())

    def test_error_lists_all_violations(self):
        cfg = NetConfig(input_size=100, num_classes=1, growth_rate=15)
        try:
            build(cfg)
            assert False, "expected ConfigError"
        except ConfigError as e:
            msg = str(e)
            assert "divisible" in msg and "num_classes" in msg and "growth_rate" in msg


class TestAccounting:
    def test_default_param_band(self):
        net = build(NetConfig(), rng=np.random.default_rng(0))
        n = net.param_count("dense")
        assert 250_000 <= n <= 450_000
        assert net.param_count("alive") == n  # nothing pruned yet

    def test_alive_drops_to_quarter_of_lg_weights(self):
        net = small_net()
        sched = CondensationSchedule(100, 4)
        for epoch in (16, 33, 50):
            apply_condensation(net, epoch, sched)
        dense_lg = sum(lg.kernel.data.size for lg in net.lg_layers())
        alive_lg = sum(int(lg.mask.sum()) * 9 for lg in net.lg_layers())
        # ceil rounding adds at most (C-1)/C of a channel per filter
        assert alive_lg <= dense_lg / 4 + sum(9 * lg.out_channels
                                              for lg in net.lg_layers())
        assert net.param_count("alive") == net.param_count("dense") - (dense_lg - alive_lg)

    def test_flop_count_positive_and_mode_aware(self):
        net = small_net()
        dense = net.flop_count("dense")
        assert dense > 0
        sched = CondensationSchedule(10, 4)
        for epoch in (1, 3, 5):
            apply_condensation(net, epoch, sched)
        assert net.flop_count("alive") < dense

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            small_net().param_count("sparse")


class TestForward:
    def test_output_shape_and_prob_sums(self):
        net = small_net()
        for b in (1, 2, 3):
            x = Tensor(np.random.default_rng(b).normal(size=(b, 1, 32, 32)))
            out = net.forward(x, training=True)
            assert out.shape == (b, 4, 32, 32)
            assert np.max(np.abs(out.data.sum(axis=1) - 1.0)) < 1e-6

    def test_constant_input_near_uniform_output(self):
        # zero padding breaks exact spatial constancy (border effects spread
        # through pools/upsampling), so "no learned structure" is tested as:
        # interior probabilities loosely uniform, class means near the prior
        net = small_net(seed=4)
        x = Tensor(np.full((1, 1, 32, 32), 3.7))
        out = net.forward(x, training=True).data
        interior = np.abs(out[:, :, 8:24, 8:24] - 0.25)
        assert interior.max() < 0.3
        means = out.mean(axis=(0, 2, 3))
        assert np.all(means > 0.1) and np.all(means < 0.45)

    def test_wrong_input_size_raises(self):
        net = small_net()
        with pytest.raises(ShapeError):
            net.forward(Tensor(np.zeros((1, 1, 64, 64))))
        with pytest.raises(ShapeError):
            net.forward(Tensor(np.zeros((1, 2, 32, 32))))

    def test_deterministic(self):
        x = Tensor(np.random.default_rng(7).normal(size=(1, 1, 32, 32)))
        a = small_net(seed=5).forward(x, training=True).data
        b = small_net(seed=5).forward(x, training=True).data
        assert np.array_equal(a, b)


class TestCondensationSchedule:
    def test_off_boundary_empty(self):
        net = small_net()
        sched = CondensationSchedule(100, 4)
        assert apply_condensation(net, 0, sched) == []
        assert apply_condensation(net, 15, sched) == []

    def test_three_events_per_layer_over_run(self):
        net = small_net()
        sched = CondensationSchedule(100, 4)
        n_lg = len(net.lg_layers())
        events = []
        alive = [net.param_count("alive")]
        for epoch in range(100):
            events.extend(apply_condensation(net, epoch, sched))
            alive.append(net.param_count("alive"))
        assert len(events) == 3 * n_lg
        assert all(lg.stage == 3 for lg in net.lg_layers())
        assert all(a >= b for a, b in zip(alive, alive[1:]))  # non-increasing

    def test_catches_up_after_skipped_epochs(self):
        net = small_net()
        sched = CondensationSchedule(100, 4)
        events = apply_condensation(net, 60, sched)  # straight to optimization
        assert len(events) == 3 * len(net.lg_layers())


class TestCheckpoint:
    def test_roundtrip_bytes_and_outputs(self, tmp_path):
        net = small_net(seed=9)
        x = Tensor(np.random.default_rng(10).normal(size=(2, 1, 32, 32)))
        net.forward(x, training=True)  # populate running stats
        sched = CondensationSchedule(10, 4)
        apply_condensation(net, 1, sched)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(net, p1, epoch=3)
        net2, header = load_checkpoint(p1)
        assert header["epoch"] == 3
        save_checkpoint(net2, p2, epoch=3)
        assert p1.read_bytes() == p2.read_bytes()
        a = net.forward(x, training=False).data
        b = net2.forward(x, training=False).data
        assert np.array_equal(a, b)
        assert [lg.stage for lg in net2.lg_layers()] == \
               [lg.stage for lg in net.lg_layers()]

    def test_bad_header_raises(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"not json\n\x00\x01")
        with pytest.raises(ValueError):
            load_checkpoint(p)

    def test_truncated_raises(self, tmp_path):
        net = small_net()
        p = tmp_path / "t.ckpt"
        save_checkpoint(net, p)
        data = p.read_bytes()
        p.write_bytes(data[:len(data) - 100])
        with pytest.raises(ValueError):
            load_checkpoint(p)


class TestGradients:
    def test_spot_check_params(self):
        # full-coverage finite-difference sweep lives in the acceptance suite
        net = small_net(seed=11)
        x = Tensor(np.random.default_rng(12).normal(size=(1, 1, 32, 32)))
        w = np.random.default_rng(13).normal(size=(1, 4, 32, 32))

        def f(_):
            out = net.forward(x, training=True)
            return (out * Tensor(w)).sum()

        rng = np.random.default_rng(14)
        targets = [net.encoders[0].layers[0].lg.kernel,
                   net.bottleneck.layers[1].bn.gamma,
                   net.up_blocks[0].up,
                   net.head.kernel]
        for p in targets:
            assert grad_check(f, p, indices=None, rng=rng) < T.GRAD_TOL

import numpy as np
import pytest

from ytmt import tensor as T
from ytmt.errors import ContractError, DimensionError
from ytmt.exchange import ExchangeMode, FusionMode
from ytmt.networks import (Augmenter, NetConfig, StagePlan, TwoStageNet, build_network, build_plain, build_two_stage,
                           build_ushaped, cascade_forward, init_from_stage1)
from ytmt.tensor import Tensor


def conv_params(cin, cout, k):
    return cout * cin * k * k + cout


def attention_params(c, r):
    h = min(c, max(8, c // r))
    return conv_params(c, h, 1) + conv_params(h, c, 1) + conv_params(c, h, 1) + conv_params(h, 1, 1)


def block_params(cin, cout, fused, r):
    per_stream = conv_params(cin, cout, 3) + conv_params(cout, cout, 3) + attention_params(cout, r)
    if fused:
        per_stream += 2 * conv_params(2 * cout, cout, 1)
    return 2 * per_stream


def ushaped_params(depth, base, fused, interacting, r=8, image=3):
    widths = [base * 2**l for l in range(depth)]
    total = conv_params(image, base, 1)
    cin = base
    for w in widths:
        total += block_params(cin, w, fused, r)
        cin = w
    total += block_params(cin, cin, fused, r)
    up = cin
    copies = 2 if interacting else 1
    for w in reversed(widths):
        total += 2 * conv_params(copies * w + up, w, 1) + block_params(w, w, fused, r)
        up = w
    return total + 2 * conv_params(base, 3, 3)


def image(n=1, size=32, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, (n, 3, size, size)).astype(np.float32))


class TestUShaped:
    def test_shape_contract(self):
        net = build_ushaped(NetConfig(base_channels=8), np.random.default_rng(0))
        t, r = net(image())
        assert t.shape == r.shape == (1, 3, 32, 32)

    @pytest.mark.parametrize("size", [7, 13, 20])
    def test_odd_and_uneven_sizes(self, size):
        net = build_ushaped(NetConfig(base_channels=4, depth=3), np.random.default_rng(0))
        t, r = net(image(size=size))
        assert t.shape == r.shape == (1, 3, size, size)

    def test_depth_one(self):
        net = build_ushaped(NetConfig(depth=1, base_channels=4), np.random.default_rng(0))
        assert len(net.encoder) == 1 and len(net.decoder) == 1
        assert net(image(size=8))[0].shape == (1, 3, 8, 8)

    @pytest.mark.parametrize("fusion,exchange", [
        (FusionMode.CONCAT, ExchangeMode.YTMT), (FusionMode.ADD, ExchangeMode.YTMT),
        (FusionMode.CONCAT, ExchangeMode.NONE), (FusionMode.CONCAT, ExchangeMode.RELU_ONLY),
    ])
    def test_parameter_count_closed_form(self, fusion, exchange):
        cfg = NetConfig(depth=3, base_channels=32, fusion=fusion, exchange=exchange)
        net = build_ushaped(cfg, np.random.default_rng(0))
        fused = fusion is FusionMode.CONCAT and exchange is not ExchangeMode.NONE
        assert net.num_parameters() == ushaped_params(3, 32, fused, exchange is not ExchangeMode.NONE)

    def test_pyramid_augmenter_keeps_stem_width(self):
        net = build_ushaped(NetConfig(base_channels=8, augmenter=Augmenter.PYRAMID), np.random.default_rng(0))
        assert net.inc.out_channels == 8
        assert net.augmenter.trainable_parameters() == []
        assert net(image(size=16))[0].shape == (1, 3, 16, 16)

    def test_deterministic(self):
        outs = [build_ushaped(NetConfig(base_channels=4), np.random.default_rng(7))(image())[0].data for _ in range(2)]
        assert outs[0].tobytes() == outs[1].tobytes()

    def test_input_channel_check(self):
        net = build_ushaped(NetConfig(base_channels=4), np.random.default_rng(0))
        with pytest.raises(DimensionError):
            net(Tensor(np.zeros((1, 4, 8, 8), dtype=np.float32)))

    def test_invalid_config(self):
        with pytest.raises(ContractError):
            build_ushaped(NetConfig(depth=0))

    def test_every_parameter_receives_gradient(self):
        net = build_ushaped(NetConfig(base_channels=16), np.random.default_rng(1))
        net.zero_grad()
        for seed in range(3):
            t, r = net(image(n=2, seed=seed))
            T.sum_(T.square(t) + T.square(r) * 0.5).backward()
        dead = [n for n, p in net.named_parameters() if not np.any(p.grad)]
        assert dead == []

    def test_outputs_not_clamped(self):
        net = build_ushaped(NetConfig(base_channels=4), np.random.default_rng(2))
        for _, p in net.named_parameters():
            p.data = p.data * 3
        t, _ = net(image())
        assert t.data.min() < 0 or t.data.max() > 1


class TestPlain:
    def test_shape_contract(self):
        net = build_plain(NetConfig(architecture="plain", base_channels=4), np.random.default_rng(0))
        assert len(net.blocks) == 6
        t, r = net(image(size=9))
        assert t.shape == r.shape == (1, 3, 9, 9)

    def test_no_interaction_factors_into_single_streams(self):
        cfg = NetConfig(architecture="plain", base_channels=4, plain_blocks=2, exchange=ExchangeMode.NONE)
        net = build_plain(cfg, np.random.default_rng(3))
        x = image(size=8)
        t, r = net(x)
        # run each stream alone with its own weights
        for k, expected in ((0, t), (1, r)):
            h = net.inc(net.augmenter(x))
            for block in net.blocks:
                s = block.streams[k]
                h = s.att(T.relu(s.conv_b(T.relu(s.conv_a(h)))))
            assert net.heads[k](h).data.tobytes() == expected.data.tobytes()

    def test_build_network_dispatch(self):
        assert build_network(NetConfig(architecture="plain", base_channels=4)).__class__.__name__ == "PlainNet"


class TestReluOnlyDegeneracy:
    @pytest.mark.parametrize("arch", ["ushaped", "plain"])
    def test_tied_streams_identical_at_every_block(self, arch):
        cfg = NetConfig(architecture=arch, base_channels=4, plain_blocks=3, exchange=ExchangeMode.RELU_ONLY)
        net = build_network(cfg, np.random.default_rng(4))
        net.tie_streams()
        (t, r), pairs = net.trace(image(size=12))
        for a, b in pairs:
            assert a.data.tobytes() == b.data.tobytes()
        assert t.data.tobytes() == r.data.tobytes()


class TestTwoStage:
    def setup_method(self):
        self.stage1 = build_ushaped(NetConfig(base_channels=4, depth=2), np.random.default_rng(5))

    def test_stage2_channels_and_shapes(self):
        net = build_two_stage(self.stage1, np.random.default_rng(6))
        assert net.stage2.cfg.in_channels == 6
        t, r = net(image(size=8))
        assert t.shape == r.shape == (1, 3, 8, 8)
        assert np.isfinite(t.data).all() and np.isfinite(r.data).all()

    def test_with_input_flag(self):
        net = build_two_stage(self.stage1, np.random.default_rng(6), StagePlan(2, stage2_with_input=True))
        assert net.stage2.cfg.in_channels == 9
        assert net(image(size=8))[0].shape == (1, 3, 8, 8)

    def test_matching_parameters_copied(self):
        net = build_two_stage(self.stage1, np.random.default_rng(6))
        src = dict(self.stage1.named_parameters())
        for name, p in net.stage2.named_parameters():
            if src[name].shape == p.shape:
                np.testing.assert_array_equal(p.data, src[name].data)

    def test_initial_stage2_applies_stage1_to_sum(self):
        net = build_two_stage(self.stage1, np.random.default_rng(6))
        x = image(size=8)
        t1, r1 = self.stage1(x)
        t2, r2 = net(x)
        ref_t, ref_r = self.stage1(t1 + r1)
        np.testing.assert_allclose(t2.data, ref_t.data, atol=1e-5)
        np.testing.assert_allclose(r2.data, ref_r.data, atol=1e-5)

    def test_adapted_names(self):
        stage2 = build_ushaped(NetConfig(base_channels=4, depth=2, in_channels=6), np.random.default_rng(7))
        assert init_from_stage1(stage2, self.stage1) == ["inc.weight"]

    def test_stage1_grads_zero_after_stage2_backward(self):
        net = build_two_stage(self.stage1, np.random.default_rng(6))
        net.zero_grad()
        t, r = net(image(size=8))
        T.sum_(t * r).backward()
        for _, p in net.stage1.named_parameters():
            assert not np.any(p.grad)
        assert any(np.any(p.grad) for _, p in net.stage2.named_parameters())

    def test_unfrozen_stage1_rejected(self):
        stage2 = build_ushaped(NetConfig(base_channels=4, depth=2, in_channels=6), np.random.default_rng(7))
        with pytest.raises(ContractError):
            cascade_forward(self.stage1, stage2, image(size=8))

    def test_wrong_stage2_width(self):
        with pytest.raises(DimensionError):
            TwoStageNet(self.stage1, build_ushaped(NetConfig(base_channels=4, depth=2), np.random.default_rng(7)))

    def test_stage_plan_validation(self):
        with pytest.raises(ContractError):
            StagePlan(stages=3)

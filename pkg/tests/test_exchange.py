import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ytmt import tensor as T
from ytmt.errors import DimensionError
from ytmt.exchange import ExchangeMode, FusionMode, YtmtBlock, negative_relu, ytmt_exchange
from ytmt.gradcheck import gradcheck
from ytmt.tensor import Tensor

finite32 = st.floats(allow_nan=False, allow_infinity=False, allow_subnormal=True, width=32)


def special_values(rng, n):
    """Random float32 mixture with signed zeros, denormals and huge magnitudes."""
    pool = np.array([0.0, -0.0, 1e-45, -1e-45, 1e-40, -3e-39, 3.4e38, -3.4e38, 1.0, -1.0], dtype=np.float32)
    x = (rng.standard_normal(n) * np.exp(rng.uniform(-20, 20, n))).astype(np.float32)
    picks = rng.random(n) < 0.2
    x[picks] = rng.choice(pool, size=int(picks.sum()))
    return x


class TestNegativeRelu:
    def test_values(self):
        np.testing.assert_array_equal(negative_relu(Tensor([-1.0, 0.0, 2.0])).data, [-1.0, 0.0, 0.0])

    def test_gradient(self):
        x = Tensor(np.array([-3.5, 1.2]), requires_grad=True)
        T.sum_(negative_relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [1.0, 0.0])

    def test_gradient_zero_at_zero(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        T.sum_(negative_relu(x)).backward()
        assert x.grad[0] == 0.0

    def test_reassembly_special_values(self):
        x = special_values(np.random.default_rng(0), 100_000)
        t = Tensor(x)
        assert (T.relu(t) + negative_relu(t)).data.tobytes() == x.tobytes()


class TestExchange:
    def test_add_scalars(self):
        y1, y2 = ytmt_exchange(Tensor([2.0]), Tensor([-3.0]), ExchangeMode.YTMT, FusionMode.ADD)
        assert (y1.data[0], y2.data[0]) == (-1.0, 0.0)
        assert y1.data[0] + y2.data[0] == 2.0 + -3.0

    def test_add_scalars_second_case(self):
        y1, y2 = ytmt_exchange(Tensor([-1.0]), Tensor([4.0]), ExchangeMode.YTMT, FusionMode.ADD)
        assert (y1.data[0], y2.data[0]) == (0.0, 3.0)

    def test_concat_channel_order(self):
        a = Tensor(np.full((1, 2, 2, 2), 1.5))
        b = Tensor(np.full((1, 2, 2, 2), -0.5))
        y1, y2 = ytmt_exchange(a, b, ExchangeMode.YTMT, FusionMode.CONCAT)
        assert y1.shape == (1, 4, 2, 2)
        np.testing.assert_array_equal(y1.data[:, :2], 1.5)
        np.testing.assert_array_equal(y1.data[:, 2:], -0.5)
        np.testing.assert_array_equal(y2.data, 0.0)

    def test_concat_reassembly_bit_exact(self):
        rng = np.random.default_rng(1)
        x1 = special_values(rng, 4 * 3 * 5 * 5).reshape(4, 3, 5, 5)
        x2 = special_values(rng, 4 * 3 * 5 * 5).reshape(4, 3, 5, 5)
        y1, y2 = ytmt_exchange(Tensor(x1), Tensor(x2), ExchangeMode.YTMT, FusionMode.CONCAT)
        c = x1.shape[1]
        # normal half of stream k plus the YTMT half carried by the other stream
        rebuilt1 = y1.data[:, :c] + y2.data[:, c:]
        rebuilt2 = y2.data[:, :c] + y1.data[:, c:]
        assert rebuilt1.tobytes() == x1.tobytes()
        assert rebuilt2.tobytes() == x2.tobytes()

    def test_concat_nonzero_multiset(self):
        rng = np.random.default_rng(2)
        x1, x2 = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 2, 3, 3))
        y1, y2 = ytmt_exchange(Tensor(x1), Tensor(x2), ExchangeMode.YTMT, FusionMode.CONCAT)
        out = np.concatenate([y1.data.ravel(), y2.data.ravel()])
        assert sorted(out[out != 0]) == sorted(np.concatenate([x1.ravel(), x2.ravel()]))

    def test_relu_only(self):
        y1, y2 = ytmt_exchange(Tensor([2.0]), Tensor([-3.0]), ExchangeMode.RELU_ONLY, FusionMode.ADD)
        assert (y1.data[0], y2.data[0]) == (2.0, 2.0)

    def test_no_interaction(self):
        y1, y2 = ytmt_exchange(Tensor([2.0, -1.0]), Tensor([-3.0, 5.0]), ExchangeMode.NONE, FusionMode.CONCAT)
        np.testing.assert_array_equal(y1.data, [2.0, 0.0])
        np.testing.assert_array_equal(y2.data, [0.0, 5.0])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ytmt_exchange(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 3, 4))))

    @pytest.mark.parametrize("fusion", list(FusionMode))
    @pytest.mark.parametrize("mode", list(ExchangeMode))
    def test_swap_symmetry(self, mode, fusion):
        rng = np.random.default_rng(3)
        a, b = Tensor(rng.standard_normal((1, 2, 3, 3))), Tensor(rng.standard_normal((1, 2, 3, 3)))
        p1, p2 = ytmt_exchange(a, b, mode, fusion)
        q1, q2 = ytmt_exchange(b, a, mode, fusion)
        np.testing.assert_array_equal(p1.data, q2.data)
        np.testing.assert_array_equal(p2.data, q1.data)

    @given(hnp.arrays(np.float32, (2, 3, 4), elements=finite32), hnp.arrays(np.float32, (2, 3, 4), elements=finite32))
    @settings(max_examples=60, deadline=None)
    def test_add_conservation_property(self, a, b):
        y1, y2 = ytmt_exchange(Tensor(a), Tensor(b), ExchangeMode.YTMT, FusionMode.ADD)
        assert (y1.data + y2.data).tobytes() == (a + b).tobytes()


def tie(block):
    s0, s1 = block.streams
    for (_, p0), (_, p1) in zip(s0.named_parameters(), s1.named_parameters()):
        p1.data = p0.data.copy()


class TestBlock:
    @pytest.mark.parametrize("fusion", list(FusionMode))
    @pytest.mark.parametrize("mode", list(ExchangeMode))
    def test_shapes(self, mode, fusion):
        block = YtmtBlock(4, 6, mode, fusion, reduction=2, rng=np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).standard_normal((2, 4, 5, 5)).astype(np.float32))
        y1, y2 = block(x, x)
        assert y1.shape == y2.shape == (2, 6, 5, 5)

    def test_fusion_convs_only_when_concatenating(self):
        assert hasattr(YtmtBlock(4, 4, ExchangeMode.YTMT, FusionMode.CONCAT).streams[0], "fuse_a")
        assert not hasattr(YtmtBlock(4, 4, ExchangeMode.YTMT, FusionMode.ADD).streams[0], "fuse_a")
        assert not hasattr(YtmtBlock(4, 4, ExchangeMode.NONE, FusionMode.CONCAT).streams[0], "fuse_a")

    @pytest.mark.parametrize("mode", [ExchangeMode.NONE, ExchangeMode.RELU_ONLY])
    def test_tied_streams_equal_inputs_identical_outputs(self, mode):
        block = YtmtBlock(4, 4, mode, FusionMode.CONCAT, reduction=2, rng=np.random.default_rng(2))
        tie(block)
        x = Tensor(np.random.default_rng(3).standard_normal((1, 4, 6, 6)).astype(np.float32))
        y1, y2 = block(x, x)
        assert y1.data.tobytes() == y2.data.tobytes()

    def test_no_interaction_streams_independent(self):
        block = YtmtBlock(4, 4, ExchangeMode.NONE, FusionMode.CONCAT, reduction=2, rng=np.random.default_rng(4))
        rng = np.random.default_rng(5)
        x1 = Tensor(rng.standard_normal((1, 4, 5, 5)).astype(np.float32))
        a, _ = block(x1, Tensor(rng.standard_normal((1, 4, 5, 5)).astype(np.float32)))
        b, _ = block(x1, Tensor(rng.standard_normal((1, 4, 5, 5)).astype(np.float32)))
        assert a.data.tobytes() == b.data.tobytes()

    def test_gradcheck_ytmt_block(self):
        rng = np.random.default_rng(6)
        block = YtmtBlock(4, 4, ExchangeMode.YTMT, FusionMode.CONCAT, reduction=2, rng=rng, dtype=np.float64)

        def fn(a, b):
            return T.concat(list(block(a, b)), axis=1)

        x1, x2 = rng.standard_normal((1, 4, 6, 6)), rng.standard_normal((1, 4, 6, 6))
        assert gradcheck(fn, [x1, x2], max_checks=60).max_rel_error < 1e-4

    def test_stream_shape_mismatch(self):
        block = YtmtBlock(4, 4)
        with pytest.raises(DimensionError):
            block(Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32)), Tensor(np.zeros((1, 4, 5, 5), dtype=np.float32)))

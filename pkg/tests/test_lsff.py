"""Selective encoder/decoder fusion."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from serankdet.gradcheck import check_lsff
from serankdet.lsff import channel_pool, lsff_forward, make_lsff_block
from serankdet.tensor import Tensor


class TestChannelPool:
    def test_single_channel_passthrough(self):
        x = Tensor(np.random.default_rng(0).random((2, 1, 3, 3)))
        avg, mx = channel_pool(x)
        np.testing.assert_allclose(avg.data, x.data, atol=1e-7)
        np.testing.assert_array_equal(mx.data, x.data)

    def test_hand_values(self):
        x = Tensor(np.zeros((1, 2, 1, 1)))
        x.data[0, 0, 0, 0] = 2.0
        x.data[0, 1, 0, 0] = 4.0
        avg, mx = channel_pool(x)
        assert avg.data.reshape(()) == 3.0
        assert mx.data.reshape(()) == 4.0

    def test_constant_tensor(self):
        x = Tensor(np.full((1, 5, 4, 4), 0.7))
        avg, mx = channel_pool(x)
        np.testing.assert_allclose(avg.data, 0.7, atol=1e-7)
        np.testing.assert_allclose(mx.data, 0.7, atol=1e-7)


class TestLsffForward:
    def test_equal_inputs_pass_through_exactly(self):
        rng = np.random.default_rng(1)
        block = make_lsff_block(rng)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
        out = lsff_forward(x, x, block).data
        np.testing.assert_array_equal(out, x.data)

    def test_zero_logits_average_inputs(self):
        rng = np.random.default_rng(2)
        block = make_lsff_block(rng)
        block.attn_conv.weight.data[:] = 0.0
        block.attn_conv.bias.data[:] = 0.0
        a = Tensor(rng.normal(size=(1, 2, 8, 8)), dtype=np.float64)
        b = Tensor(rng.normal(size=(1, 2, 8, 8)), dtype=np.float64)
        out = lsff_forward(a, b, block).data
        assert np.abs(out - 0.5 * (a.data + b.data)).max() < 1e-6

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        block = make_lsff_block(rng)
        with pytest.raises(ValueError, match="shape"):
            lsff_forward(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((1, 3, 8, 8))), block)

    @given(st.integers(0, 2 ** 31))
    @settings(max_examples=25, deadline=None)
    def test_output_is_pointwise_convex_combination(self, seed):
        rng = np.random.default_rng(seed)
        block = make_lsff_block(rng, dtype=np.float64)
        a = Tensor(rng.normal(size=(1, 3, 8, 8)), dtype=np.float64)
        b = Tensor(rng.normal(size=(1, 3, 8, 8)), dtype=np.float64)
        out = lsff_forward(a, b, block).data
        lo = np.minimum(a.data, b.data)
        hi = np.maximum(a.data, b.data)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)

    def test_gate_identical_across_channels(self):
        # Recover the per-channel gate from the outputs; all channels must
        # share one spatial map.
        rng = np.random.default_rng(4)
        block = make_lsff_block(rng, dtype=np.float64)
        a = Tensor(rng.normal(size=(1, 4, 8, 8)), dtype=np.float64)
        b = Tensor(rng.normal(size=(1, 4, 8, 8)), dtype=np.float64)
        out = lsff_forward(a, b, block).data
        gate = (out - b.data) / (a.data - b.data)
        spread = gate.max(axis=1) - gate.min(axis=1)
        assert spread.max() < 1e-9

    def test_gradients(self):
        assert check_lsff(seed=4) < 1e-5

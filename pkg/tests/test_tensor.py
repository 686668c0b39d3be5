"""Tensor engine: kernels, tape backward, finite-difference agreement."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from serankdet import tensor as T
from serankdet.gradcheck import max_rel_err
from serankdet.tensor import Tape, Tensor, fd_gradient


def randt(rng, *shape, grad=False):
    return Tensor(rng.normal(size=shape), requires_grad=grad, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(T.matmul(a, b).data, b.data)

    def test_hand_product(self):
        a = Tensor(np.array([[1.0, 2.0]]))
        b = Tensor(np.array([[3.0], [4.0]]))
        np.testing.assert_array_equal(T.matmul(a, b).data, [[11.0]])

    def test_zeros(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.random.default_rng(0).random((3, 4)))
        out = T.matmul(a, b)
        assert out.shape == (2, 4)
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestSoftmaxRows:
    def test_symmetry(self):
        out = T.softmax_rows(Tensor(np.zeros((1, 3)))).data
        np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-7)

    def test_large_entries_no_overflow(self):
        out = T.softmax_rows(Tensor(np.array([[1000.0, 1000.0]]))).data
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-7)
        assert np.all(np.isfinite(out))

    def test_hand_values(self):
        out = T.softmax_rows(Tensor(np.array([[0.0, np.log(3.0)]], dtype=np.float64))).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-12)

    @given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2 ** 31))
    @settings(max_examples=30, deadline=None)
    def test_rows_sum_to_one(self, m, n, seed):
        a = Tensor(np.random.default_rng(seed).normal(scale=5.0, size=(m, n)))
        out = T.softmax_rows(a).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out >= 0) and np.all(out <= 1)


class TestStandardize:
    def test_constant_is_zero(self):
        out = T.standardize(Tensor(np.full((3, 3), 4.2, dtype=np.float64))).data
        np.testing.assert_array_equal(out, np.zeros((3, 3)))

    def test_hand_values(self):
        out = T.standardize(Tensor(np.array([1.0, 3.0], dtype=np.float64))).data
        expected = 1.0 / (1.0 + 1e-5)
        np.testing.assert_allclose(out, [-expected, expected], rtol=1e-12)

    def test_output_mean_zero(self):
        a = Tensor(np.random.default_rng(0).normal(size=(6, 7)), dtype=np.float64)
        assert abs(T.standardize(a).data.mean()) < 1e-6

    def test_needs_two_elements(self):
        with pytest.raises(ValueError):
            T.standardize(Tensor(np.ones((1, 1))))


class TestElementwise:
    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5

    def test_relu(self):
        out = T.relu(Tensor(np.array([-1.0, 2.0]))).data
        np.testing.assert_array_equal(out, [0.0, 2.0])

    def test_concat_shape(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((2, 5)))
        assert T.concat([a, b], axis=1).shape == (2, 8)

    def test_reshape_round_trip_bit_exact(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.random((3, 4, 5)).astype(np.float32))
        back = T.reshape(T.reshape(a, (5, 12)), (3, 4, 5))
        np.testing.assert_array_equal(back.data, a.data)

    def test_concat_slice_round_trip_bit_exact(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.random((2, 7)).astype(np.float32))
        left = a[:, :3]
        right = a[:, 3:]
        np.testing.assert_array_equal(T.concat([left, right], axis=1).data, a.data)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).random((3, 4)), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            tape.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_hand_differentiated_square(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            tape.backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0], rtol=1e-12)

    def test_unused_leaf_gets_zeros(self):
        x = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
        y = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            _dead = T.mul(y, y)  # on the tape, but not in the loss
            tape.backward(T.sum_all(x))
        np.testing.assert_array_equal(y.grad, np.zeros(3))

    def test_accumulation_across_uses(self):
        x = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            tape.backward(T.sum_all(T.add(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_loss_must_be_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
            with pytest.raises(ValueError, match="scalar"):
                tape.backward(y)

    def test_loss_must_be_on_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        stray = T.sum_all(Tensor(np.ones(1), requires_grad=True))  # no tape active
        with Tape() as tape:
            T.mul(x, x)
            with pytest.raises(ValueError, match="tape"):
                tape.backward(stray)

    def test_concat_backward_splits_exactly(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.random((2, 3)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.random((2, 5)), requires_grad=True, dtype=np.float64)
        proj = Tensor(rng.random((2, 8)), dtype=np.float64)
        with Tape() as tape:
            tape.backward(T.sum_all(T.mul(T.concat([a, b], axis=1), proj)))
        np.testing.assert_array_equal(a.grad, proj.data[:, :3])
        np.testing.assert_array_equal(b.grad, proj.data[:, 3:])
        np.testing.assert_array_equal(
            np.concatenate([a.grad, b.grad], axis=1), proj.data)


class TestFdGradient:
    def test_analytic_square(self):
        x = Tensor(np.array([3.0]), dtype=np.float64)
        fd = fd_gradient(lambda t: T.sum_all(T.mul(t, t)), x).data
        np.testing.assert_allclose(fd, [6.0], atol=1e-8)

    def test_constant_function(self):
        x = Tensor(np.ones(4), dtype=np.float64)
        fd = fd_gradient(lambda t: 1.25, x).data
        np.testing.assert_array_equal(fd, np.zeros(4))

    def test_matches_tape_on_random_graph(self):
        rng = np.random.default_rng(3)
        a = randt(rng, 4, 5, grad=True)
        b = randt(rng, 5, 3, grad=True)
        c = randt(rng, 4, 3, grad=True)

        def f(_):
            h = T.sigmoid(T.matmul(a, b))
            return T.sum_all(T.mul(T.add(h, c), T.sub(h, c)))

        with Tape() as tape:
            tape.backward(f(None))
        for p in (a, b, c):
            fd = fd_gradient(f, p).data
            assert max_rel_err(p.grad, fd) < 1e-6


class TestFusedStats:
    def test_std_all_matches_numpy(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.normal(size=(5, 6)), dtype=np.float64)
        assert abs(T.std_all(a).item() - a.data.std()) < 1e-12

    def test_mean_std_gradients(self):
        rng = np.random.default_rng(5)
        for op in (T.mean_all, T.std_all, T.sum_all):
            x = randt(rng, 3, 4, grad=True)
            with Tape() as tape:
                tape.backward(op(x))
            fd = fd_gradient(lambda t: op(t), x).data
            assert max_rel_err(x.grad, fd) < 1e-6

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from montranslit import autodiff as ad
from montranslit.autodiff import (
    EmptyLossError,
    NonScalarBackward,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    backward,
    finite_difference_check,
)


class TestTensorBasics:
    def test_scalars_are_shape_1(self):
        assert Tensor(3.0).shape == (1,)

    def test_matmul_identity(self):
        a = np.arange(9.0).reshape(3, 3)
        out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_matmul_vector(self):
        out = ad.matmul(Tensor([1.0, 2.0]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [11.0])

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_broadcast_add(self):
        out = Tensor(np.ones((2, 3))) + Tensor(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[2, 3, 4], [2, 3, 4]])


class TestActivations:
    def test_points(self):
        assert ad.tanh(Tensor(0.0)).item() == 0.0
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5
        assert ad.relu(Tensor(-2.0)).item() == 0.0

    def test_sigmoid_gradient_at_zero(self):
        # d/dx sigmoid(0) = 0.25, checked against central differences
        err = finite_difference_check(lambda x: ad.sigmoid(x), Tensor(0.0), h=1e-6)
        assert err < 1e-8
        tape = Tape()
        x = tape.leaf(0.0)
        backward(ad.sigmoid(x))
        np.testing.assert_allclose(tape.grad_of(x), 0.25)

    def test_sigmoid_stable_at_extremes(self):
        out = ad.sigmoid(Tensor([-1000.0, 1000.0]))
        np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, 0.25)

    def test_shift_invariance(self):
        x = np.array([0.3, -1.2, 2.0])
        a = ad.softmax(Tensor(x)).data
        b = ad.softmax(Tensor(x + 123.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_large_logits_finite(self):
        out = ad.softmax(Tensor([1000.0, 0.0])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_rows_sum_to_one(self, seed):
        x = np.random.default_rng(seed).normal(size=(4, 7)) * 5
        out = ad.softmax(Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


class TestLayerNorm:
    def test_constant_row_zeros(self):
        out = ad.layer_norm(Tensor(np.full((2, 5), 3.7)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_output_mean_is_bias_mean(self):
        rng = np.random.default_rng(0)
        bias = rng.normal(size=6)
        out = ad.layer_norm(Tensor(rng.normal(size=(3, 6))), Tensor(np.ones(6)), Tensor(bias))
        np.testing.assert_allclose(out.data.mean(axis=-1), bias.mean(), atol=1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        gain = Tensor(rng.normal(size=4))
        bias = Tensor(rng.normal(size=4))

        def f(x):
            return ad.reduce_sum(ad.tanh(ad.layer_norm(x, gain, bias)))

        err = finite_difference_check(f, Tensor(rng.normal(size=(2, 4))))
        assert err < 1e-4


class TestEmbedding:
    def test_row_gather(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        out = ad.embedding_lookup(table, [0, 2])
        np.testing.assert_array_equal(out.data, [[0, 1, 2], [6, 7, 8]])

    def test_repeated_id_doubles_gradient(self):
        tape = Tape()
        p = Parameter("emb", np.zeros((3, 2)))
        table = tape.watch(p)
        out = ad.embedding_lookup(table, [1, 1])
        backward(ad.reduce_sum(out))
        np.testing.assert_array_equal(p.grad, [[0, 0], [2, 2], [0, 0]])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            ad.embedding_lookup(Tensor(np.zeros((4, 2))), [4])


class TestCrossEntropy:
    def test_near_certain(self):
        loss = ad.cross_entropy(Tensor([[10.0, -10.0]]), [0])
        assert loss.item() == pytest.approx(math.log(1 + math.exp(-20)), abs=1e-12)
        assert loss.item() < 1e-8

    def test_uniform_is_log_v(self):
        loss = ad.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2])
        assert loss.item() == pytest.approx(math.log(4))

    def test_masked_position_ignored(self):
        logits = np.array([[1.0, 2.0], [50.0, -3.0]])
        full = ad.cross_entropy(Tensor(logits[:1]), [1]).item()
        masked = ad.cross_entropy(Tensor(logits), [1, 0], pad_mask=[1.0, 0.0]).item()
        assert masked == pytest.approx(full)

    def test_all_masked_raises(self):
        with pytest.raises(EmptyLossError):
            ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 0], pad_mask=[0.0, 0.0])

    def test_gradient_with_label_smoothing(self):
        tgt = [2, 0, 1]

        def f(x):
            return ad.cross_entropy(x, tgt, pad_mask=[1, 1, 0], label_smoothing=0.1)

        err = finite_difference_check(f, Tensor(np.random.default_rng(3).normal(size=(3, 4))))
        assert err < 1e-4


class TestBackward:
    def test_sum_gradient_is_ones(self):
        tape = Tape()
        x = tape.leaf(np.arange(6.0).reshape(2, 3))
        backward(ad.reduce_sum(x))
        np.testing.assert_array_equal(tape.grad_of(x), np.ones((2, 3)))

    def test_quadratic_gradient(self):
        tape = Tape()
        data = np.array([1.0, -2.0, 0.5])
        x = tape.leaf(data)
        backward(ad.reduce_sum(ad.mul(x, x)))
        np.testing.assert_allclose(tape.grad_of(x), 2 * data)

    def test_non_scalar_rejected(self):
        tape = Tape()
        x = tape.leaf(np.zeros(3))
        with pytest.raises(NonScalarBackward):
            backward(x)

    def test_second_backward_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones(2))
        loss = ad.reduce_sum(x)
        backward(loss)
        with pytest.raises(RuntimeError):
            backward(loss)

    def test_unreachable_parameter_gets_zero(self):
        tape = Tape()
        used = Parameter("used", np.ones(2))
        unused = Parameter("unused", np.ones(2))
        xu = tape.watch(used)
        tape.watch(unused)
        backward(ad.reduce_sum(xu))
        np.testing.assert_array_equal(unused.grad, 0.0)
        np.testing.assert_array_equal(used.grad, 1.0)

    def test_grad_accumulates_across_tapes(self):
        p = Parameter("p", np.ones(2))
        for _ in range(2):
            tape = Tape()
            backward(ad.reduce_sum(tape.watch(p)))
        np.testing.assert_array_equal(p.grad, 2.0)


class TestShapeOps:
    def test_concat_narrow_round_trip(self):
        a, b = np.ones((2, 2)), np.zeros((2, 3))
        cat = ad.concat([Tensor(a), Tensor(b)], axis=1)
        np.testing.assert_array_equal(ad.narrow(cat, 1, 2, 3).data, b)

    def test_transpose_gradient(self):
        def f(x):
            return ad.reduce_sum(ad.mul(ad.transpose(x, (1, 0, 2)), ad.transpose(x, (1, 0, 2))))

        err = finite_difference_check(f, Tensor(np.random.default_rng(0).normal(size=(2, 3, 4))))
        assert err < 1e-6

    def test_stack(self):
        rows = [Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 4.0]))]
        np.testing.assert_array_equal(ad.stack(rows, axis=0).data, [[1, 2], [3, 4]])

    def test_mean(self):
        assert ad.reduce_mean(Tensor(np.array([1.0, 2.0, 3.0]))).item() == pytest.approx(2.0)


class TestFiniteDifference:
    def test_sum_is_exact(self):
        err = finite_difference_check(ad.reduce_sum, Tensor(np.random.default_rng(0).normal(size=5)))
        assert err < 1e-10

    def test_softmax_cross_entropy_composite(self):
        def f(x):
            return ad.cross_entropy(x, [1, 0])

        err = finite_difference_check(f, Tensor(np.random.default_rng(1).normal(size=(2, 3))))
        assert err < 1e-4

    def test_layer_norm_composite(self):
        gain = Tensor(np.array([1.5, -0.5, 2.0]))
        bias = Tensor(np.array([0.1, 0.0, -0.3]))

        def f(x):
            return ad.reduce_sum(ad.sigmoid(ad.layer_norm(x, gain, bias)))

        err = finite_difference_check(f, Tensor(np.random.default_rng(2).normal(size=(4, 3))))
        assert err < 1e-4


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=10, deadline=None)
def test_composite_graph_gradients(seed):
    """Random small graphs of the core ops pass the finite-difference check."""
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(4, 3)))

    def f(x):
        h = ad.tanh(ad.matmul(x, w))
        s = ad.softmax(h)
        return ad.reduce_sum(ad.mul(s, h))

    assert finite_difference_check(f, Tensor(rng.normal(size=(2, 4)))) < 1e-4


def test_determinism():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 3))
    a = ad.softmax(ad.tanh(Tensor(x))).data
    b = ad.softmax(ad.tanh(Tensor(x))).data
    assert (a == b).all()

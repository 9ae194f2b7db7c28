import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scrnet.tensor import (NonDeterministicError, ShapeError, Tensor, backward, concat, elementwise, grad_check,
                           matmul, no_grad, reduce, sigmoid, softmax, split)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def leaf(data):
    return Tensor(np.asarray(data, dtype=float), requires_grad=True)


class TestElementwise:
    def test_add(self):
        assert np.array_equal(elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_mul_by_zero(self, rng):
        x = Tensor(rng.normal(size=(2, 3)))
        out = elementwise("mul", x, 0.0)
        assert out.shape == (2, 3) and not out.data.any()

    def test_sub_neg_scalar_mul(self):
        a, b = Tensor([5.0, 1.0]), Tensor([2.0, 3.0])
        assert np.array_equal(elementwise("sub", a, b).data, [3.0, -2.0])
        assert np.array_equal(elementwise("neg", a).data, [-5.0, -1.0])
        assert np.array_equal(elementwise("scalar_mul", a, 2.0).data, [10.0, 2.0])

    def test_exp_gradient(self, rng):
        x = leaf(rng.normal(size=(2, 3)))
        backward(elementwise("exp", x).sum())
        assert np.allclose(x.grad, np.exp(x.data), rtol=0, atol=1e-15)
        rep = grad_check(lambda t: t.exp().sum(), x, tol=1e-7)
        assert rep.passed, rep

    def test_per_channel_broadcast(self, rng):
        x, w = leaf(rng.normal(size=(2, 3, 4, 4))), leaf(rng.normal(size=(2, 3, 1, 1)))
        y = x * w
        assert y.shape == x.shape
        backward(y.sum())
        assert np.allclose(w.grad, x.data.sum(axis=(2, 3), keepdims=True))

    def test_general_broadcast_rejected(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3, 4))) + Tensor(np.ones((1, 3, 4)))


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)

    def test_row_col(self):
        assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_gradients(self, rng):
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        assert grad_check(lambda t: matmul(t, b).sum(), a, tol=1e-7).passed
        assert grad_check(lambda t: (matmul(a, t) * matmul(a, t)).sum(), b, tol=1e-7).passed

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax(Tensor([0.0, 0.0, 0.0]), 0).data, 1 / 3)

    def test_large_inputs(self):
        out = softmax(Tensor([1000.0, 1000.0]), 0).data
        assert np.all(np.isfinite(out)) and np.allclose(out, 0.5)

    def test_known_values(self):
        # e^z / sum e^z for z = 1, 2, 3
        expect = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]
        assert np.allclose(softmax(Tensor([1.0, 2.0, 3.0]), 0).data, expect, atol=1e-12)

    def test_invalid_axis(self):
        with pytest.raises(ValueError):
            softmax(Tensor(np.ones((2, 2))), 2)

    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
    def test_rows_sum_to_one(self, x):
        out = softmax(Tensor(x), 1).data
        assert np.all(out >= 0)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)


class TestSigmoid:
    def test_midpoint(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_saturation(self):
        v = sigmoid(Tensor([-800.0, -40.0])).data
        assert np.all(np.isfinite(v)) and np.all(v <= 1e-10) and np.all(v >= 0)

    def test_derivative_at_one(self):
        x = leaf([1.0])
        backward(sigmoid(x).sum())
        assert abs(x.grad[0] - 0.19661193324148185) < 1e-12
        assert grad_check(lambda t: sigmoid(t).sum(), x, tol=1e-7).passed


class TestReduce:
    def test_sum_all(self):
        assert reduce(Tensor([[1.0, 2.0], [3.0, 4.0]]), "sum").item() == 10.0

    def test_mean_constant(self):
        assert np.allclose(reduce(Tensor(np.full((2, 3), 1.7)), "mean").data, 1.7)

    def test_spatial_mean(self):
        x = Tensor(np.arange(1.0, 9.0).reshape(1, 2, 2, 2))
        assert reduce(x, "mean", (2, 3)).data.tolist() == [[2.5, 6.5]]

    def test_keepdims_and_grad(self, rng):
        x = leaf(rng.normal(size=(2, 3, 4)))
        y = reduce(x, "mean", (1, 2), keepdims=True)
        assert y.shape == (2, 1, 1)
        backward(y.sum())
        assert np.allclose(x.grad, 1 / 12)

    def test_bad_axes(self):
        with pytest.raises(ValueError):
            reduce(Tensor(np.ones((2, 2))), "sum", (0, 0))
        with pytest.raises(ValueError):
            reduce(Tensor(np.ones((2, 2))), "sum", (3,))


class TestConcatSplit:
    def test_round_trip_bit_exact(self, rng):
        a, b = Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(1, 3, 4, 4)))
        c = concat([a, b], 1)
        assert c.shape == (1, 5, 4, 4)
        pa, pb = split(c, 1, [2, 3])
        assert np.array_equal(pa.data, a.data) and np.array_equal(pb.data, b.data)

    def test_gradient_routes_ones(self, rng):
        a, b = leaf(rng.normal(size=(2, 2))), leaf(rng.normal(size=(2, 3)))
        backward(concat([a, b], 1).sum())
        assert np.array_equal(a.grad, np.ones((2, 2))) and np.array_equal(b.grad, np.ones((2, 3)))

    def test_errors(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], 1)
        with pytest.raises(ShapeError):
            split(Tensor(np.ones((2, 5))), 1, [2, 2])

    @given(st.lists(st.integers(1, 4), min_size=1, max_size=4))
    def test_split_concat_identity(self, sizes):
        x = Tensor(np.arange(2.0 * sum(sizes)).reshape(2, sum(sizes)))
        assert np.array_equal(concat(split(x, 1, sizes), 1).data, x.data)


class TestBackward:
    def test_linear(self, rng):
        x = leaf(rng.normal(size=(3, 2)))
        backward(x.sum())
        assert np.array_equal(x.grad, np.ones((3, 2)))

    def test_quadratic(self):
        x = leaf([1.0, 2.0])
        backward((x * x).sum())
        assert x.grad.tolist() == [2.0, 4.0]

    def test_accumulates_without_reset(self):
        x = leaf([1.0, 2.0])
        backward((x * x).sum())
        backward((x * x).sum())
        assert x.grad.tolist() == [4.0, 8.0]

    def test_non_scalar_rejected(self):
        with pytest.raises(ShapeError):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_ignored_leaf_gets_no_gradient(self):
        x, unused = leaf([1.0]), leaf([2.0])
        backward((x * 3.0).sum())
        assert unused.grad is None or not unused.grad.any()

    def test_shared_subexpression_visited_once(self):
        x = leaf([3.0])
        y = x * x
        backward((y + y).sum())
        assert x.grad.tolist() == [12.0]

    def test_graph_dropped(self):
        x = leaf([1.0])
        y = (x * 2.0).sum()
        backward(y)
        with pytest.raises(RuntimeError):
            backward(y)

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 2.0
        assert y._node is None and not y.requires_grad


class TestGradCheck:
    def test_sigmoid_sum(self, rng):
        rep = grad_check(lambda t: sigmoid(t).sum(), leaf(rng.normal(size=(3, 3))), h=1e-5, tol=1e-6)
        assert rep.passed and rep.checked == 9

    def test_linear_is_exact(self, rng):
        rep = grad_check(lambda t: t.sum(), leaf(rng.normal(size=(4, 3))))
        assert rep.max_rel_err <= 1e-10

    def test_reports_failure_for_wrong_gradient(self, rng):
        x = leaf(rng.normal(size=(3,)))
        rep = grad_check(lambda t: (t * t).sum(), x, analytic=np.zeros(3))
        assert not rep.passed and rep.max_rel_err > 0.5

    def test_rel_error_floor(self):
        from scrnet.tensor import rel_error

        assert rel_error(0.0, 0.0) == 0.0
        assert math.isclose(float(rel_error(1e-12, 0.0)), 1e-12 / 1e-8)

    def test_non_deterministic_rejected(self, rng):
        noise = np.random.default_rng(0)
        with pytest.raises(NonDeterministicError):
            grad_check(lambda t: (t * float(noise.normal())).sum(), leaf(rng.normal(size=(2,))))

    def test_bad_step(self, rng):
        with pytest.raises(ValueError):
            grad_check(lambda t: t.sum(), leaf([1.0]), h=0.0)

    def test_kink_skipping(self):
        from scrnet.nn_ops import relu

        x = leaf([1e-6, -1e-6, 0.5, -0.5])
        rep = grad_check(lambda t: relu(t).sum(), x, skip_kinks=True)
        assert rep.passed and rep.skipped == 2 and rep.checked == 2

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dagseg import Tensor, checked, no_grad, tensor
from dagseg.gradcheck import numerical_grad, relative_error
from dagseg.tensor import concatenate, unbroadcast

from conftest import assert_grads


def leaf(rng, *shape):
    return tensor(rng.normal(size=shape), requires_grad=True)


class TestForward:
    def test_data_is_float64(self):
        t = tensor([1, 2, 3])
        assert t.data.dtype == np.float64

    def test_arithmetic_matches_numpy(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        ta, tb = tensor(a), tensor(b)
        np.testing.assert_array_equal((ta + tb).data, a + b)
        np.testing.assert_array_equal((ta - tb).data, a - b)
        np.testing.assert_array_equal((ta * tb).data, a * b)
        np.testing.assert_array_equal((ta / (tb * tb + 1)).data, a / (b * b + 1))
        np.testing.assert_allclose((ta @ tensor(a.T)).data, a @ a.T, rtol=1e-14)

    def test_sigmoid_saturates_without_overflow(self):
        out = tensor([-1000.0, 0.0, 1000.0]).sigmoid().data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_softmax_is_shift_invariant(self, rng):
        x = rng.normal(size=(2, 5))
        a = tensor(x).softmax().data
        b = tensor(x + 700.0).softmax().data
        np.testing.assert_allclose(a, b, rtol=1e-12)
        np.testing.assert_allclose(a.sum(axis=-1), 1.0)

    def test_item_requires_single_element(self):
        assert tensor([[2.5]]).item() == 2.5
        with pytest.raises(ValueError):
            tensor([1.0, 2.0]).item()


class TestBackward:
    @pytest.mark.parametrize(
        "fn",
        [
            lambda a, b: (a * b + a / (b * b + 2.0)).sum(),
            lambda a, b: ((a - b) ** 2).mean(),
            lambda a, b: (a.exp() * b).sum(),
            lambda a, b: ((a * a + 1.0).log() + b.sigmoid()).sum(),
            lambda a, b: (a.leaky_relu(0.1) * b).sum(),
            lambda a, b: (a.softmax(axis=-1) * b).sum(),
            lambda a, b: (a.log_softmax(axis=0) * b).sum(),
            lambda a, b: (a.reshape(4, 3).transpose() @ b.reshape(4, 3)).sum(),
            lambda a, b: (a[1:, ::2] * b[:2, 1:3]).sum(),
            lambda a, b: (concatenate([a, b], axis=0) ** 3).sum(),
        ],
    )
    def test_finite_differences(self, fn, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
        assert_grads(lambda: fn(a, b), [a, b])

    def test_broadcast_gradient_reduces_to_operand_shape(self, rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 4)
        (a * b).sum().backward()
        assert b.grad.shape == (4,)
        np.testing.assert_allclose(b.grad, a.data.sum(axis=(0, 1)))

    def test_batched_matmul(self, rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 5)
        assert_grads(lambda: ((a @ b) ** 2).sum(), [a, b])

    def test_shared_subexpression_accumulates(self):
        x = tensor(3.0, requires_grad=True)
        y = x * x
        (y + y).backward()
        assert x.grad == pytest.approx(12.0)

    def test_second_backward_is_rejected(self, rng):
        a = leaf(rng, 3)
        loss = (a * a).sum()
        loss.backward()
        with pytest.raises(RuntimeError):
            loss.backward()

    def test_nonscalar_backward_needs_seed(self, rng):
        a = leaf(rng, 3)
        with pytest.raises(ValueError):
            (a * 2.0).backward()
        (a * 2.0).backward(np.ones(3))
        np.testing.assert_array_equal(a.grad, [2.0, 2.0, 2.0])

    def test_deep_chain_does_not_recurse(self):
        x = tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.backward()
        assert x.grad == 1.0

    def test_no_grad_records_nothing(self, rng):
        a = leaf(rng, 3)
        with no_grad():
            y = a * 2.0
        assert not y.requires_grad and y._parents == ()


class TestCheckedMode:
    def test_nan_forward_raises(self):
        with checked(True), np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
            tensor([-1.0]).log()

    def test_off_lets_inf_through(self):
        with checked(False), np.errstate(divide="ignore"):
            assert np.isinf(tensor([0.0]).log().data[0])


def test_unbroadcast_sums_leading_and_unit_axes():
    g = np.ones((2, 3, 4))
    np.testing.assert_array_equal(unbroadcast(g, (3, 1)), np.full((3, 1), 8.0))


def test_numerical_grad_of_quadratic():
    t = Tensor(np.array([1.0, -2.0]))
    g = numerical_grad(lambda: (t * t).sum(), t)
    np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)
    assert relative_error(g, np.array([2.0, -4.0])) < 1e-8
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_sum_of_products_gradient_property(xs, ys):
    n = min(len(xs), len(ys))
    a = tensor(xs[:n], requires_grad=True)
    b = tensor(ys[:n], requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_array_equal(a.grad, np.asarray(ys[:n], dtype=float))
    np.testing.assert_array_equal(b.grad, np.asarray(xs[:n], dtype=float))

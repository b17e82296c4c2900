import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handsplat import autodiff as ad


def rand(shape, rng):
    return ad.Tensor(rng.uniform(-2.0, 2.0, shape), requires_grad=True)


class TestPrimitiveForward:
    def test_softmax_singleton_row(self):
        out = ad.primitive_forward("softmax-rows", [ad.Tensor([[5.0]])])
        assert out.values == pytest.approx(1.0)

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 7))
        out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(a))
        np.testing.assert_allclose(out.values, a)

    def test_softplus_at_zero(self):
        out = ad.softplus(ad.Tensor([0.0]))
        assert out.values[0] == pytest.approx(np.log(2.0), abs=1e-12)

    def test_softplus_stable_at_large_magnitude(self):
        out = ad.softplus(ad.Tensor([1000.0, -1000.0]))
        assert out.values[0] == pytest.approx(1000.0)
        assert out.values[1] == pytest.approx(0.0, abs=1e-12)

    def test_matmul_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))

    def test_add_shape_mismatch(self):
        with pytest.raises(ValueError, match="add"):
            ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5))))

    def test_unknown_op(self):
        with pytest.raises(ValueError, match="unknown primitive"):
            ad.primitive_forward("conv17d", [])


class TestBackward:
    def test_fanout_accumulates_exactly(self):
        x = ad.Tensor([3.0], requires_grad=True)
        with ad.Tape() as t:
            y = ad.tsum(x + x)
            t.backward(y)
        assert x.grad[0] == 2.0

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with ad.Tape() as t:
            y = x * 2.0
            with pytest.raises(ad.TapeError, match="scalar"):
                t.backward(y)

    def test_double_backward_rejected(self):
        x = ad.Tensor([1.0], requires_grad=True)
        with ad.Tape() as t:
            y = ad.tsum(x * x)
            t.backward(y)
            with pytest.raises(ad.TapeError):
                t.backward(y)

    def test_grad_shape_matches_values(self):
        rng = np.random.default_rng(1)
        x = rand((4, 5), rng)
        with ad.Tape() as t:
            t.backward(ad.tsum(ad.sigmoid(x)))
        assert x.grad.shape == x.values.shape

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(42)
            x = rand((6, 4), rng)
            w = rand((4, 3), rng)
            with ad.Tape() as t:
                y = ad.tsum(ad.softmax_rows(ad.matmul(ad.tanh(x), w)))
                t.backward(y)
            return y.values.copy(), x.grad.copy(), w.grad.copy()

        a, b = run(), run()
        for u, v in zip(a, b):
            assert np.array_equal(u, v)

    def test_nan_forward_is_hard_error(self):
        with pytest.raises(FloatingPointError):
            ad.log(ad.Tensor([-1.0]))


class TestFiniteDifference:
    def test_sum_of_squares(self):
        x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        err = ad.finite_difference_check(lambda t: ad.tsum(t * t), x)
        assert err < 1e-6
        with ad.Tape() as tape:
            tape.backward(ad.tsum(x * x))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_linear_sum(self):
        rng = np.random.default_rng(3)
        x = rand((5,), rng)
        assert ad.finite_difference_check(ad.tsum, x) < 1e-9

    def test_two_layer_mlp(self):
        rng = np.random.default_rng(4)
        w1 = ad.Tensor(rng.normal(size=(3, 8)))
        w2 = ad.Tensor(rng.normal(size=(8, 1)))

        def f(x):
            return ad.tsum(ad.matmul(ad.softplus(ad.matmul(x, w1)), w2))

        assert ad.finite_difference_check(f, rand((4, 3), rng)) < 1e-4


UNARY_OPS = ["softplus", "relu", "sigmoid", "tanh", "sin", "cos", "abs", "exp"]


@pytest.mark.parametrize("op", UNARY_OPS)
def test_unary_gradients_match_finite_differences(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    worst = 0.0
    for _ in range(100):
        x = rand((3, 4), rng)
        if op == "relu":  # keep away from the kink
            x.values[np.abs(x.values) < 1e-2] += 0.05
        err = ad.finite_difference_check(
            lambda t: ad.tsum(ad.primitive_forward(op, [t])), x)
        worst = max(worst, err)
    assert worst < 1e-4


@pytest.mark.parametrize("op", ["matmul", "add", "sub", "elementwise-mul", "div"])
def test_binary_gradients_match_finite_differences(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    worst = 0.0
    for _ in range(100):
        a = rand((3, 4), rng)
        b = rand((4, 2) if op == "matmul" else (3, 4), rng)
        if op == "div":  # keep the denominator away from zero
            b.values += np.sign(b.values) * 0.5
        err = ad.finite_difference_check(
            lambda t: ad.tsum(ad.primitive_forward(op, [t, b])), a)
        worst = max(worst, err)
        err = ad.finite_difference_check(
            lambda t: ad.tsum(ad.primitive_forward(op, [a, t])), b)
        worst = max(worst, err)
    assert worst < 1e-4


@pytest.mark.parametrize("op", ["softmax-rows", "sum", "mean", "l2-norm"])
def test_reduction_gradients_match_finite_differences(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    worst = 0.0
    for _ in range(100):
        x = rand((4, 5), rng)
        err = ad.finite_difference_check(
            lambda t: ad.tsum(ad.primitive_forward(op, [t]) * 0.7 + 0.1), x)
        worst = max(worst, err)
    assert worst < 1e-4


def test_structural_op_gradients():
    rng = np.random.default_rng(9)
    x = rand((5, 3), rng)
    idx = np.array([0, 2, 2, 4])
    err = ad.finite_difference_check(
        lambda t: ad.tsum(ad.sigmoid(ad.gather_rows(t, idx))), x)
    assert err < 1e-6
    err = ad.finite_difference_check(
        lambda t: ad.tsum(ad.tanh(ad.reshape(t, (3, 5)))), x)
    assert err < 1e-6
    err = ad.finite_difference_check(
        lambda t: ad.tsum(ad.concat([t * 2.0, ad.transpose(ad.transpose(t))], axis=1)), x)
    assert err < 1e-9
    err = ad.finite_difference_check(
        lambda t: ad.tsum(ad.gather_cols(t, np.array([1, 1, 2])) * 0.3), x)
    assert err < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-500, 500), min_size=4, max_size=4),
                min_size=1, max_size=6))
def test_softmax_rows_sum_to_one(rows):
    s = ad.softmax_rows(ad.Tensor(np.array(rows)))
    np.testing.assert_allclose(s.values.sum(axis=1), 1.0, atol=1e-9)

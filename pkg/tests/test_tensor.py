"""Tensor core: forward semantics and gradients vs central finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import finite_diff_grad, rel_error
from stmoe.rng import Rng
from stmoe.tensor import (
    ShapeError,
    Tensor,
    concat,
    count_flops,
    dropout,
    layer_norm,
    masked_fill,
    matmul,
    mean,
    no_grad,
    relu,
    reshape,
    softmax,
    transpose,
    tsum,
)


def t(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        out = matmul(t([[1, 0], [0, 1]]), t([[3], [4]]))
        np.testing.assert_array_equal(out.data, [[3], [4]])

    def test_hand_multiplication(self):
        # [[1,2],[3,4]] @ [[5],[6]] worked out by hand
        out = matmul(t([[1, 2], [3, 4]]), t([[5], [6]]))
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))

    def test_grad_vs_finite_differences(self):
        rng = Rng(7)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

        def loss():
            return float(np.sum(np.matmul(a.data, b.data) ** 2))

        out = matmul(a, b)
        s = tsum(mul_sq(out))
        s.backward()
        assert rel_error(a.grad, finite_diff_grad(loss, a)) < 1e-6
        assert rel_error(b.grad, finite_diff_grad(loss, b)) < 1e-6

    def test_batched(self):
        rng = Rng(11)
        a = Tensor(rng.normal(size=(5, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 4, 2)), requires_grad=True)
        out = matmul(a, b)
        np.testing.assert_allclose(out.data, np.matmul(a.data, b.data))
        tsum(out).backward()

        def loss_a():
            return float(np.matmul(a.data, b.data).sum())

        assert rel_error(a.grad, finite_diff_grad(loss_a, a)) < 1e-6


def mul_sq(x):
    from stmoe.tensor import mul

    return mul(x, x)


class TestSoftmax:
    def test_uniform(self):
        out = softmax(t([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_overflow_stability(self):
        out = softmax(t([1000.0, 0.0]), axis=0)
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(1.0)
        assert out.data[1] == pytest.approx(0.0, abs=1e-300)

    def test_rows_sum_to_one(self):
        rng = Rng(3)
        out = softmax(Tensor(rng.normal(size=5)), axis=0)
        assert abs(out.data.sum() - 1.0) < 1e-12

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=16))
    @settings(max_examples=50, deadline=None)
    def test_simplex_property(self, xs):
        out = softmax(t(xs), axis=0)
        assert np.all(out.data >= 0)
        assert abs(out.data.sum() - 1.0) < 1e-12

    def test_grad_vs_finite_differences(self):
        rng = Rng(5)
        x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        w = rng.normal(size=(2, 4))

        def loss():
            e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
            p = e / e.sum(axis=1, keepdims=True)
            return float((p * w).sum())

        s = tsum(mul_tensor(softmax(x, axis=1), w))
        s.backward()
        assert rel_error(x.grad, finite_diff_grad(loss, x)) < 1e-6


def mul_tensor(x, arr):
    from stmoe.tensor import mul

    return mul(x, Tensor(arr))


class TestLayerNorm:
    def test_constant_slice(self):
        x = t([5.0, 5.0, 5.0])
        out = layer_norm(x, t([1.0]), t([0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0, 0, 0], atol=1e-10)

    def test_already_normalized(self):
        # mean 0, variance 1 by hand; eps shifts the scale by ~5e-6
        x = t([1.0, -1.0])
        out = layer_norm(x, t([1.0]), t([0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1.0, -1.0], rtol=1e-4)

    def test_grad_vs_finite_differences(self):
        rng = Rng(9)
        x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        gamma = Tensor(rng.normal(size=(4,)), requires_grad=True)
        beta = Tensor(rng.normal(size=(4,)), requires_grad=True)
        w = rng.normal(size=(2, 4))
        eps = 1e-5

        def loss():
            mu = x.data.mean(axis=-1, keepdims=True)
            var = x.data.var(axis=-1, keepdims=True)
            xhat = (x.data - mu) / np.sqrt(var + eps)
            return float(((gamma.data * xhat + beta.data) * w).sum())

        out = layer_norm(x, gamma, beta, axis=-1, eps=eps)
        tsum(mul_tensor(out, w)).backward()
        assert rel_error(x.grad, finite_diff_grad(loss, x)) < 1e-6
        assert rel_error(gamma.grad, finite_diff_grad(loss, gamma)) < 1e-6
        assert rel_error(beta.grad, finite_diff_grad(loss, beta)) < 1e-6


class TestSimplePrimitives:
    def test_relu(self):
        out = relu(t([-1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_dropout_rate_zero_is_identity(self):
        x = t([[1.0, 2.0]])
        assert dropout(x, 0.0, None, training=True) is x

    def test_dropout_eval_mode_is_identity(self):
        x = t([[1.0, 2.0]])
        assert dropout(x, 0.5, Rng(0), training=False) is x

    def test_dropout_scaling_and_grad(self):
        rng = Rng(21)
        x = Tensor(np.ones((100, 100)), requires_grad=True)
        out = dropout(x, 0.3, rng, training=True)
        kept = out.data != 0
        np.testing.assert_allclose(out.data[kept], 1.0 / 0.7)
        assert abs(kept.mean() - 0.7) < 0.02
        tsum(out).backward()
        np.testing.assert_allclose(x.grad[kept], 1.0 / 0.7)
        np.testing.assert_allclose(x.grad[~kept], 0.0)

    def test_masked_fill_all_false_unchanged(self):
        x = t([[1.0, 2.0], [3.0, 4.0]])
        out = masked_fill(x, np.zeros((2, 2), dtype=bool), -np.inf)
        np.testing.assert_array_equal(out.data, x.data)

    def test_masked_fill_blocks_gradient(self):
        x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        mask = np.array([[False, True], [False, False]])
        out = masked_fill(x, mask, -1e9)
        tsum(out).backward()
        np.testing.assert_array_equal(x.grad, [[1, 0], [1, 1]])

    def test_reshape_transpose_round_trip_bit_exact(self):
        rng = Rng(33)
        x = Tensor(rng.normal(size=(3, 4, 5)))
        back = reshape(reshape(x, (12, 5)), (3, 4, 5))
        assert np.array_equal(back.data, x.data)
        back2 = transpose(transpose(x, (2, 0, 1)), (1, 2, 0))
        assert np.array_equal(back2.data, x.data)

    @given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=4))
    @settings(max_examples=25, deadline=None)
    def test_transpose_round_trip_property(self, a, b):
        x = Tensor(np.arange(float(a * b)).reshape(a, b))
        back = transpose(transpose(x, (1, 0)), (1, 0))
        assert np.array_equal(back.data, x.data)

    def test_slice_and_concat_grad(self):
        x = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        y = concat([x[1:], x[:1]], axis=0)
        np.testing.assert_array_equal(y.data, np.roll(x.data, -1, axis=0))
        tsum(mul_tensor(y, np.arange(12.0).reshape(4, 3))).backward()

        def loss():
            rolled = np.roll(x.data, -1, axis=0)
            return float((rolled * np.arange(12.0).reshape(4, 3)).sum())

        assert rel_error(x.grad, finite_diff_grad(loss, x)) < 1e-6

    def test_mean_and_sum_grads(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        mean(x).backward()
        np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 6))
        x.zero_grad()
        tsum(tsum(x, axis=1)).backward()
        np.testing.assert_allclose(x.grad, np.ones((2, 3)))


class TestBackward:
    def test_square_derivative(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        from stmoe.tensor import mul

        mul(x, x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_constant_has_zero_grad(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = t(5.0)
        out = mul_tensor(y, np.array(2.0))
        # graph never touches x
        from stmoe.tensor import add

        s = add(out, 0.0)
        s.backward()
        assert x.grad is None

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            x.backward()

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        from stmoe.tensor import mul

        for _ in range(2):
            mul(x, x).backward()
        assert x.grad == pytest.approx(12.0)

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with no_grad():
            y = matmul(x, x)
        assert y._backward_fn is None and not y.requires_grad

    def test_determinism(self):
        def run():
            rng = Rng(99)
            x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            out = softmax(matmul(x, x), axis=1)
            tsum(out).backward()
            return out.data.copy(), x.grad.copy()

        o1, g1 = run()
        o2, g2 = run()
        assert np.array_equal(o1, o2) and np.array_equal(g1, g2)


class TestEveryPrimitiveGradient:
    """Analytic gradient vs central finite differences for each primitive."""

    CASES = {
        "add": lambda x, w: tsum(mul_tensor(x + Tensor(w), w)),
        "sub": lambda x, w: tsum(mul_tensor(x - Tensor(0.5 * w), w)),
        "mul": lambda x, w: tsum(mul_tensor(mul_sq(x), w)),
        "relu": lambda x, w: tsum(mul_tensor(relu(x), w)),
        "matmul": lambda x, w: tsum(mul_tensor(matmul(x, Tensor(w.T.copy())), w @ w.T)),
        "softmax": lambda x, w: tsum(mul_tensor(softmax(x, axis=1), w)),
        "reshape": lambda x, w: tsum(mul_tensor(reshape(x, (x.size,)), w.reshape(-1))),
        "transpose": lambda x, w: tsum(mul_tensor(transpose(x, (1, 0)), w.T.copy())),
        "slice": lambda x, w: tsum(mul_tensor(x[1:, :2], w[1:, :2])),
        "concat": lambda x, w: tsum(mul_tensor(concat([x, x], axis=0), np.vstack([w, 2 * w]))),
        "sum": lambda x, w: tsum(mul_tensor(tsum(x, axis=1, keepdims=True), w[:, :1])),
        "mean": lambda x, w: tsum(mul_tensor(mean(x, axis=0, keepdims=True), w[:1])),
        "masked_fill": lambda x, w: tsum(
            mul_tensor(masked_fill(x, np.eye(*x.shape, dtype=bool), 0.25), w)
        ),
        "layer_norm": lambda x, w: tsum(
            mul_tensor(layer_norm(x, Tensor(np.ones(x.shape[1])), Tensor(np.zeros(x.shape[1]))), w)
        ),
    }

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_gradient(self, name):
        rng = Rng(hash(name) % 2 ** 31)
        shape = (3, 4)
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        w = rng.normal(size=shape)
        self.CASES[name](x, w).backward()

        def loss():
            x_ng = Tensor(x.data)
            return self.CASES[name](x_ng, w).item()

        fd = finite_diff_grad(loss, x)
        assert rel_error(x.grad, fd, floor=1e-5) < 1e-5, name


class TestFlopCounter:
    def test_matmul_flops(self):
        with count_flops() as c:
            matmul(t(np.zeros((3, 4))), t(np.zeros((4, 5))))
        assert c.flops == 2 * 3 * 4 * 5

    def test_scoped(self):
        matmul(t(np.zeros((3, 4))), t(np.zeros((4, 5))))  # outside any scope
        with count_flops() as c:
            pass
        assert c.flops == 0

"""Unit tests for the autodiff core: loop oracles, hand examples, gradients."""

import math

import numpy as np
import pytest

from dascd.autodiff import (
    GradError,
    ShapeError,
    Tensor,
    add,
    conv2d,
    div,
    finite_difference_grad,
    matmul,
    maxpool2,
    mean,
    mul,
    power,
    relu,
    reshape,
    softmax_rows,
    sqrt,
    sub,
    transpose,
    tsum,
    where,
)


def matmul_ref(a, b):
    """Triple-loop reference, independent of numpy's matmul."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def conv2d_ref(x, kernels, stride, padding):
    """Naive six-loop cross-correlation reference."""
    c_out, c_in, k, _ = kernels.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (x.shape[1] + 2 * padding - k) // stride + 1
    wo = (x.shape[2] + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for co in range(c_out):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for ci in range(c_in):
                    for i in range(k):
                        for j in range(k):
                            acc += xp[ci, oy * stride + i, ox * stride + j] * kernels[co, ci, i, j]
                out[co, oy, ox] = acc
    return out


class TestMatmul:
    def test_identity_left_and_right_exact(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(4, 4)))
        eye = Tensor(np.eye(4))
        assert np.array_equal(matmul(a, eye).data, a.data)
        assert np.array_equal(matmul(eye, a).data, a.data)

    def test_hand_examples(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_matches_triple_loop_reference(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(5, 4))
        b = rng.normal(size=(4, 3))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data,
                                   matmul_ref(a, b), rtol=1e-13, atol=1e-13)

    def test_dimension_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmaxRows:
    def test_equal_logits_are_uniform(self):
        out = softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_single_column_is_one(self):
        out = softmax_rows(Tensor([[123.4], [-5.0]]))
        np.testing.assert_array_equal(out.data, [[1.0], [1.0]])

    def test_extreme_logits_no_overflow(self):
        # exact shifted computation: [1/(1+e^-1000), e^-1000/(1+e^-1000)]
        out = softmax_rows(Tensor([[1000.0, 0.0]])).data
        e = math.exp(-1000.0)
        np.testing.assert_allclose(out, [[1.0 / (1.0 + e), e / (1.0 + e)]], atol=1e-15)
        assert np.isfinite(out).all()

    def test_rows_sum_to_one_including_extremes(self):
        rng = np.random.default_rng(3)
        m = rng.uniform(-1e3, 1e3, size=(40, 7))
        out = softmax_rows(Tensor(m)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert (out >= 0.0).all()


class TestConv2d:
    def test_scalar_kernel_doubles_input(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 3, 3))
        k = np.full((1, 1, 1, 1), 2.0)
        np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(k)).data, 2.0 * x)

    def test_all_ones_window_sum(self):
        x = np.ones((1, 3, 3))
        k = np.ones((1, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(k), padding=1).data
        assert out[0, 1, 1] == 9.0
        assert out.shape == (1, 3, 3)

    def test_matches_naive_loop_reference(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 8, 8))
        k = rng.normal(size=(4, 2, 3, 3))
        for stride, padding in ((1, 0), (1, 1), (2, 1)):
            got = conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).data
            np.testing.assert_allclose(got, conv2d_ref(x, k, stride, padding),
                                       rtol=1e-12, atol=1e-12)

    def test_output_shape_formula(self):
        x = Tensor(np.zeros((3, 10, 14)))
        k = Tensor(np.zeros((5, 3, 3, 3)))
        assert conv2d(x, k, stride=2, padding=1).shape == (5, 5, 7)

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError, match="larger than padded input"):
            conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_bias_added_per_channel(self):
        x = Tensor(np.zeros((1, 2, 2)))
        k = Tensor(np.zeros((3, 1, 1, 1)))
        out = conv2d(x, k, bias=Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data[:, 0, 0], [1.0, 2.0, 3.0])


class TestBackward:
    def test_sum_of_squares_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        tsum(x * x).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_unused_tensor_gets_no_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        t = Tensor([5.0, 6.0], requires_grad=True)
        tsum(x * x).backward()
        assert t.grad is None or not t.grad.any()

    def test_masked_out_tensor_gets_zero_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (tsum(x * Tensor([0.0, 0.0])) + 3.0).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GradError, match="scalar"):
            (x * x).backward()

    def test_gradient_accumulates_across_backward_calls(self):
        x = Tensor([2.0], requires_grad=True)
        tsum(x * x).backward()
        tsum(x * x).backward()
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_shared_subexpression_counted_once_per_use(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        (tsum(y + y)).backward()
        np.testing.assert_array_equal(x.grad, [12.0])


class TestFiniteDifferenceOracle:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(6).normal(size=(2, 3)))
        np.testing.assert_allclose(finite_difference_grad(tsum, x), np.ones((2, 3)),
                                   atol=1e-9)

    def test_square_at_three(self):
        x = Tensor([3.0])
        grad = finite_difference_grad(lambda t: tsum(t * t), x)
        np.testing.assert_allclose(grad, [6.0], atol=1e-8)

    def test_non_scalar_output_rejected(self):
        x = Tensor([1.0, 2.0])
        with pytest.raises(GradError, match="scalar"):
            finite_difference_grad(lambda t: t * t, x)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError, match="step"):
            finite_difference_grad(tsum, Tensor([1.0]), step=0.0)


def _max_rel_err(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / scale).max())


# scalar-valued random expressions exercising each differentiable op
_OP_CASES = {
    "add": lambda t, c: tsum((add(t, c) * add(t, c))),
    "sub": lambda t, c: tsum(sub(t, c) ** 2),
    "mul": lambda t, c: tsum(mul(t, c) * t),
    "div": lambda t, c: tsum(div(t, c) ** 2),
    "power": lambda t, c: tsum(power(t, 3.0)),
    "relu": lambda t, c: tsum(relu(t) * c),
    "sqrt": lambda t, c: tsum(sqrt(t * t + 1.0)),
    "where": lambda t, c: tsum(where(c.data > 0, t * t, t * 3.0)),
    "tsum_axis": lambda t, c: tsum(tsum(t * t, axis=0) * tsum(c * t, axis=0)),
    "mean": lambda t, c: mean(t * t) * 2.0,
    "reshape": lambda t, c: tsum(reshape(t, (t.size,)) ** 2),
    "scalar_broadcast": lambda t, c: tsum(Tensor([2.0], requires_grad=False) * t * t),
}


@pytest.mark.parametrize("name", sorted(_OP_CASES))
def test_gradients_match_finite_differences(name):
    """Analytic vs central differences, several random points per op."""
    fn = _OP_CASES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for trial in range(9):
        t = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        c = Tensor(rng.uniform(-1.0, 1.0, size=(3, 4)))
        loss = fn(t, c)
        loss.backward()
        numeric = finite_difference_grad(lambda x: fn(x, c), t)
        assert _max_rel_err(t.grad, numeric) < 1e-4, f"{name} trial {trial}"


def test_matmul_softmax_conv_pool_gradients():
    """Gradcheck of the structured ops at 100 random points in total."""
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(25):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

        def f_mat(t):
            return tsum(matmul(t, b) ** 2)

        f_mat(a).backward()
        assert _max_rel_err(a.grad, finite_difference_grad(f_mat, a)) < 1e-4
        checked += 1

        m = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 5)))

        def f_soft(t):
            return tsum(softmax_rows(t) * w)

        f_soft(m).backward()
        assert _max_rel_err(m.grad, finite_difference_grad(f_soft, m)) < 1e-4
        checked += 1

        x = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        bias = Tensor(rng.normal(size=3), requires_grad=True)

        def f_conv(t):
            return tsum(conv2d(t, k, bias, stride=1, padding=1) ** 2)

        f_conv(x).backward()
        assert _max_rel_err(x.grad, finite_difference_grad(f_conv, x)) < 1e-4
        assert _max_rel_err(k.grad, finite_difference_grad(
            lambda t: tsum(conv2d(x, t, bias, stride=1, padding=1) ** 2), k)) < 1e-4
        checked += 1

        p = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)

        def f_pool(t):
            return tsum(maxpool2(t) ** 2)

        f_pool(p).backward()
        assert _max_rel_err(p.grad, finite_difference_grad(f_pool, p)) < 1e-4
        checked += 1
    assert checked == 100


class TestShapeContracts:
    def test_elementwise_mismatch_raises(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))

    def test_scalar_tensor_broadcast_allowed(self):
        out = Tensor([2.0]) * Tensor(np.full((2, 2), 3.0))
        np.testing.assert_array_equal(out.data, np.full((2, 2), 6.0))

    def test_scalar_broadcast_gradient_sums(self):
        s = Tensor([2.0], requires_grad=True)
        tsum(s * Tensor(np.ones((2, 3)))).backward()
        np.testing.assert_array_equal(s.grad, [6.0])

    def test_no_general_broadcasting(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))) * Tensor(np.zeros(3))

    def test_reshape_size_mismatch(self):
        with pytest.raises(ShapeError):
            reshape(Tensor(np.zeros((2, 3))), (4, 2))

    def test_transpose_needs_matrix(self):
        with pytest.raises(ShapeError):
            transpose(Tensor(np.zeros(3)))

    def test_maxpool_needs_even_dims(self):
        with pytest.raises(ShapeError, match="even"):
            maxpool2(Tensor(np.zeros((1, 3, 4))))


def test_forward_replay_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
        k = Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)
        y = maxpool2(relu(conv2d(x, k, padding=1)))
        m = reshape(y, (4, 16))
        out = tsum(softmax_rows(matmul(m, transpose(m))))
        out.backward()
        return out.data.copy(), x.grad.copy()

    out1, grad1 = run()
    out2, grad2 = run()
    assert out1.tobytes() == out2.tobytes()
    assert grad1.tobytes() == grad2.tobytes()


def test_values_finite_after_forward_and_backward():
    rng = np.random.default_rng(12)
    x = Tensor(rng.normal(size=(3, 6, 6)), requires_grad=True)
    k = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.5, requires_grad=True)
    y = relu(conv2d(x, k, padding=1))
    loss = mean(y * y)
    loss.backward()
    assert np.isfinite(loss.data).all()
    assert np.isfinite(x.grad).all() and np.isfinite(k.grad).all()

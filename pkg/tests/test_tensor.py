"""Tensor engine: forward semantics against brute-force oracles, backward
semantics against central finite differences."""

import math

import numpy as np
import pytest

from drunet_lab import (
    Tensor,
    ConvParams,
    BatchNormParams,
    conv_params,
    batch_norm_params,
    conv2d,
    batch_norm,
    relu,
    max_pool_2x2,
    up_conv_2x2,
    concat_channels,
    add,
    mul,
    tensor_sum,
    softmax,
    softmax_cross_entropy,
    finite_diff_check,
    ConfigurationError,
    DataError,
)

from oracles import conv2d_oracle, max_pool_oracle, max_pool_grad_oracle, up_conv_oracle


def make_conv(c_in, c_out, k, stride=1, padding=0, dtype=np.float64, seed=0):
    return conv_params(c_in, c_out, k, stride=stride, padding=padding,
                       rng=np.random.default_rng(seed), dtype=dtype)


class TestConv2d:
    def test_ones_kernel_pad1(self):
        # 3x3 ones input, 3x3 ones kernel, pad 1: centre sees 9 cells, corners 4
        x = Tensor(np.ones((1, 1, 3, 3)))
        p = ConvParams(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), 1, 1)
        out = conv2d(x, p).data
        expected = conv2d_oracle(x.data, p.weight.data, p.bias.data, 1, 1)
        np.testing.assert_allclose(out, expected)
        assert out[0, 0, 1, 1] == 9.0
        assert out[0, 0, 0, 0] == 4.0

    def test_zero_kernel(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        p = ConvParams(Tensor(np.zeros((5, 3, 3, 3))), Tensor(np.zeros(5)), 1, 1)
        assert np.all(conv2d(x, p).data == 0.0)

    def test_identity_1x1(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 6, 5)))
        p = ConvParams(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), 1, 0)
        np.testing.assert_array_equal(conv2d(x, p).data, x.data)

    @pytest.mark.parametrize("shape,cin,cout,k,stride,pad", [
        ((2, 3, 5, 5), 3, 4, 3, 1, 1),
        ((1, 2, 6, 4), 2, 3, 3, 1, 0),
        ((2, 1, 8, 8), 1, 2, 1, 1, 0),
        ((1, 2, 7, 7), 2, 2, 3, 2, 1),
    ])
    def test_matches_oracle(self, rng, shape, cin, cout, k, stride, pad):
        x = rng.normal(size=shape)
        p = make_conv(cin, cout, k, stride, pad, seed=3)
        got = conv2d(Tensor(x), p).data
        want = conv2d_oracle(x, p.weight.data, p.bias.data, stride, pad)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        p = make_conv(3, 4, 3, padding=1)
        with pytest.raises(ConfigurationError):
            conv2d(x, p)

    def test_linearity_with_zero_bias(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        p = make_conv(2, 3, 3, padding=1, seed=7)
        one = conv2d(Tensor(x), p).data
        three = conv2d(Tensor(3.0 * x), p).data
        np.testing.assert_allclose(three, 3.0 * one, rtol=1e-12)


class TestBatchNorm:
    def test_constant_input_zeroes(self):
        x = Tensor(np.full((2, 3, 4, 4), 7.0))
        p = batch_norm_params(3, dtype=np.float64)
        out = batch_norm(x, p, "training").data
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_two_element_batch(self):
        # values 1 and 3: mean 2, biased variance 1 -> normalised to -1, +1
        x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        p = batch_norm_params(1, epsilon=1e-12, dtype=np.float64)
        out = batch_norm(x, p, "training").data
        np.testing.assert_allclose(out.ravel(), [-1.0, 1.0], atol=1e-6)

    def test_shift_only(self):
        x = Tensor(np.full((1, 2, 3, 3), 4.0))
        p = batch_norm_params(2, dtype=np.float64)
        p.beta.data[:] = 5.0
        out = batch_norm(x, p, "training").data
        np.testing.assert_allclose(out, 5.0, atol=1e-12)

    def test_normalises_batch(self, rng):
        x = Tensor(rng.normal(2.0, 3.0, size=(4, 3, 8, 8)))
        p = batch_norm_params(3, dtype=np.float64)
        out = batch_norm(x, p, "training").data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_running_stats_track_batches(self, rng):
        p = batch_norm_params(2, dtype=np.float64)
        x = rng.normal(5.0, 2.0, size=(8, 2, 6, 6))
        for _ in range(200):
            batch_norm(Tensor(x), p, "training")
        np.testing.assert_allclose(p.running_mean, x.mean(axis=(0, 2, 3)), rtol=1e-6)
        n = x[:, 0].size
        np.testing.assert_allclose(
            p.running_var, x.var(axis=(0, 2, 3)) * n / (n - 1), rtol=1e-5)
        assert np.all(p.running_var >= 0.0)

    def test_inference_uses_running_stats(self, rng):
        p = batch_norm_params(2, dtype=np.float64)
        p.running_mean[:] = [1.0, -1.0]
        p.running_var[:] = [4.0, 9.0]
        x = rng.normal(size=(2, 2, 3, 3))
        out = batch_norm(Tensor(x), p, "inference").data
        want = (x - np.array([1.0, -1.0])[None, :, None, None]) \
            / np.sqrt(np.array([4.0, 9.0])[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(out, want, rtol=1e-12)
        # inference never drifts the running buffers
        np.testing.assert_array_equal(p.running_mean, [1.0, -1.0])

    def test_channel_mismatch(self, rng):
        with pytest.raises(ConfigurationError):
            batch_norm(Tensor(rng.normal(size=(1, 3, 2, 2))),
                       batch_norm_params(2, dtype=np.float64))


class TestRelu:
    def test_definition(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3))
        np.testing.assert_array_equal(relu(x).data.ravel(), [0.0, 0.0, 2.0])

    def test_all_negative(self):
        x = Tensor(-np.ones((1, 2, 3, 3)), requires_grad=True)
        out = relu(x)
        assert np.all(out.data == 0.0)
        tensor_sum(out).backward()
        assert np.all(x.grad == 0.0)

    def test_indicator_gradient(self):
        x = Tensor(np.array([-1.0, 2.0]).reshape(1, 1, 1, 2), requires_grad=True)
        tensor_sum(relu(x)).backward()
        np.testing.assert_array_equal(x.grad.ravel(), [0.0, 1.0])


class TestMaxPool:
    def test_single_window(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert max_pool_2x2(x).data.item() == 4.0

    def test_constant_input(self):
        x = Tensor(np.full((1, 1, 4, 4), 2.5))
        assert np.all(max_pool_2x2(x).data == 2.5)

    def test_tie_break_top_left(self):
        x = Tensor(np.full((1, 1, 2, 2), 5.0), requires_grad=True)
        max_pool_2x2(x).backward(np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(
            x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_matches_oracle(self, rng):
        x = rng.normal(size=(2, 3, 6, 8))
        got = max_pool_2x2(Tensor(x)).data
        np.testing.assert_array_equal(got, max_pool_oracle(x))

    def test_gradient_matches_oracle(self, rng):
        x = rng.normal(size=(2, 2, 4, 6))
        up = rng.normal(size=(2, 2, 2, 3))
        t = Tensor(x, requires_grad=True)
        max_pool_2x2(t).backward(up)
        np.testing.assert_array_equal(t.grad, max_pool_grad_oracle(x, up))

    def test_odd_dims_rejected(self):
        with pytest.raises(ConfigurationError):
            max_pool_2x2(Tensor(np.zeros((1, 1, 3, 4))))


class TestUpConv:
    def test_single_value_scatter(self):
        x = Tensor(np.ones((1, 1, 1, 1)))
        p = ConvParams(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)), 2, 0)
        np.testing.assert_array_equal(up_conv_2x2(x, p).data, np.ones((1, 1, 2, 2)))

    def test_zero_input(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        p = make_conv(3, 2, 2)
        assert np.all(up_conv_2x2(x, p).data == 0.0)

    def test_shape_doubling(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        p = make_conv(3, 5, 2)
        assert up_conv_2x2(x, p).shape == (2, 5, 8, 8)

    def test_matches_oracle(self, rng):
        x = rng.normal(size=(2, 3, 3, 4))
        p = make_conv(3, 2, 2, seed=11)
        got = up_conv_2x2(Tensor(x), p).data
        want = up_conv_oracle(x, p.weight.data, p.bias.data)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ConfigurationError):
            up_conv_2x2(Tensor(rng.normal(size=(1, 2, 4, 4))), make_conv(3, 2, 2))


class TestConcatAdd:
    def test_concat_shapes(self):
        a = Tensor(np.zeros((1, 2, 4, 4)))
        b = Tensor(np.zeros((1, 3, 4, 4)))
        assert concat_channels(a, b).shape == (1, 5, 4, 4)

    def test_concat_order_preserved(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        out = concat_channels(Tensor(x), Tensor(np.zeros((1, 2, 3, 3)))).data
        np.testing.assert_array_equal(out[:, :2], x)

    def test_concat_backward_splits(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 4, 3, 3)), requires_grad=True)
        tensor_sum(concat_channels(a, b)).backward()
        np.testing.assert_array_equal(a.grad, np.ones(a.shape))
        np.testing.assert_array_equal(b.grad, np.ones(b.shape))

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ConfigurationError):
            concat_channels(Tensor(np.zeros((1, 1, 4, 4))),
                            Tensor(np.zeros((1, 1, 5, 4))))

    def test_add_identity_and_commutative(self, rng):
        x = rng.normal(size=(2, 2, 3, 3))
        y = rng.normal(size=(2, 2, 3, 3))
        np.testing.assert_array_equal(add(Tensor(x), Tensor(np.zeros_like(x))).data, x)
        np.testing.assert_array_equal(add(Tensor(x), Tensor(y)).data,
                                      add(Tensor(y), Tensor(x)).data)

    def test_add_backward_passthrough(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 2, 2, 2)), requires_grad=True)
        g = rng.normal(size=(1, 2, 2, 2))
        add(a, b).backward(g)
        np.testing.assert_array_equal(a.grad, g)
        np.testing.assert_array_equal(b.grad, g)

    def test_add_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            add(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 2, 2, 2))))

    def test_mul_forward_and_backward(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        out = mul(a, b)
        np.testing.assert_array_equal(out.data, a.data * b.data)
        rep = finite_diff_check(loss_through(mul), [a, b])
        assert rep.passed, rep


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_ln2(self):
        logits = Tensor(np.zeros((1, 2, 3, 3)))
        labels = np.zeros((1, 3, 3), dtype=np.int64)
        loss = softmax_cross_entropy(logits, labels).data
        assert math.isclose(float(loss), math.log(2.0), rel_tol=1e-12)

    def test_saturated_case(self):
        logits = np.full((1, 3, 2, 2), -50.0)
        logits[:, 1] = 50.0
        labels = np.ones((1, 2, 2), dtype=np.int64)
        loss = softmax_cross_entropy(Tensor(logits), labels).data
        assert float(loss) < 1e-6

    def test_gradient_matches_finite_differences(self, rng):
        logits = Tensor(rng.normal(size=(1, 3, 2, 2)), requires_grad=True)
        labels = rng.integers(0, 3, size=(1, 2, 2))
        report = finite_diff_check(
            lambda t: softmax_cross_entropy(t, labels), [logits], tolerance=1e-6)
        assert report.passed, report

    def test_softmax_sums_to_one(self, rng):
        logits = rng.normal(scale=10.0, size=(2, 5, 4, 4))
        p = softmax(logits)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(p >= 0.0)

    def test_out_of_range_label(self):
        logits = Tensor(np.zeros((1, 2, 2, 2)))
        labels = np.array([[[0, 1], [2, 0]]], dtype=np.int64)
        with pytest.raises(DataError, match=r"\(n=0, h=1, w=0\)"):
            softmax_cross_entropy(logits, labels)


class TestFiniteDiffCheck:
    def test_conv2d_random_input(self, rng):
        x = Tensor(rng.normal(size=(2, 1, 5, 5)), requires_grad=True)
        p = make_conv(1, 2, 3, padding=1, seed=5)
        report = finite_diff_check(
            lambda t, w, b: tensor_sum(conv2d(t, ConvParams(w, b, 1, 1))),
            [x, p.weight, p.bias])
        assert report.passed
        assert report.max_rel_error < 1e-4

    def test_corrupted_gradient_fails(self, rng):
        def doubled_grad_relu(x):
            from drunet_lab.tensor import _result, _accumulate
            mask = x.data > 0
            out = np.where(mask, x.data, 0.0)

            def backward(g):
                _accumulate(x, 2.0 * g * mask)
            return _result(out, (x,), backward)

        x = Tensor(rng.normal(size=(1, 1, 3, 3)) + 0.5, requires_grad=True)
        report = finite_diff_check(lambda t: tensor_sum(doubled_grad_relu(t)), [x])
        assert not report.passed

    def test_linear_op_near_exact(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        report = finite_diff_check(lambda s, t: tensor_sum(add(s, t)), [a, b])
        assert report.max_rel_error < 1e-10

    def test_rejects_float32(self):
        x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
        with pytest.raises(ConfigurationError):
            finite_diff_check(lambda t: tensor_sum(relu(t)), [x])


def loss_through(op_builder):
    return lambda *tensors: tensor_sum(op_builder(*tensors))


class TestGradientsAllPrimitives:
    """Every primitive op passes finite differences on 3 seeded shapes."""

    SHAPES = [(1, 1, 4, 4), (2, 3, 6, 6), (3, 2, 4, 8)]

    @pytest.mark.parametrize("shape", SHAPES)
    def test_conv2d(self, shape):
        rng = np.random.default_rng(hash(shape) % 2 ** 31)
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        p = make_conv(shape[1], 3, 3, padding=1, seed=9)
        rep = finite_diff_check(
            loss_through(lambda t, w, b: conv2d(t, ConvParams(w, b, 1, 1))),
            [x, p.weight, p.bias])
        assert rep.passed, rep

    @pytest.mark.parametrize("shape", SHAPES)
    def test_batch_norm_training(self, shape):
        # a plain sum of BN output is constant in x (mean subtraction), so
        # weight each element by a fixed random factor for a usable loss
        rng = np.random.default_rng(shape[3])
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        p = batch_norm_params(shape[1], dtype=np.float64)
        gamma = Tensor(rng.normal(1.0, 0.2, size=shape[1]), requires_grad=True)
        beta = Tensor(rng.normal(0.0, 0.2, size=shape[1]), requires_grad=True)
        weights = Tensor(rng.normal(size=shape))

        def f(t, g, b):
            q = BatchNormParams(g, b, p.running_mean.copy(), p.running_var.copy())
            return tensor_sum(mul(batch_norm(t, q, "training"), weights))

        rep = finite_diff_check(f, [x, gamma, beta])
        assert rep.passed, rep

    @pytest.mark.parametrize("shape", SHAPES)
    def test_batch_norm_inference(self, shape):
        rng = np.random.default_rng(shape[1] * 7)
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        p = batch_norm_params(shape[1], dtype=np.float64)
        p.running_mean[:] = rng.normal(size=shape[1])
        p.running_var[:] = rng.uniform(0.5, 2.0, size=shape[1])
        rep = finite_diff_check(
            loss_through(lambda t: batch_norm(t, p, "inference")), [x])
        assert rep.passed, rep

    @pytest.mark.parametrize("shape", SHAPES)
    def test_relu(self, shape):
        rng = np.random.default_rng(shape[2])
        data = rng.normal(size=shape)
        data[np.abs(data) < 1e-3] = 0.1  # keep clear of the kink
        x = Tensor(data, requires_grad=True)
        rep = finite_diff_check(loss_through(relu), [x])
        assert rep.passed, rep

    @pytest.mark.parametrize("shape", SHAPES)
    def test_max_pool(self, shape):
        rng = np.random.default_rng(shape[0] * 13)
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        rep = finite_diff_check(loss_through(max_pool_2x2), [x])
        assert rep.passed, rep

    @pytest.mark.parametrize("shape", SHAPES)
    def test_up_conv(self, shape):
        rng = np.random.default_rng(shape[3] * 3)
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        p = make_conv(shape[1], 2, 2, seed=21)
        rep = finite_diff_check(
            loss_through(lambda t, w, b: up_conv_2x2(t, ConvParams(w, b, 2, 0))),
            [x, p.weight, p.bias])
        assert rep.passed, rep

    @pytest.mark.parametrize("shape", SHAPES)
    def test_concat(self, shape):
        rng = np.random.default_rng(shape[1] * 5)
        a = Tensor(rng.normal(size=shape), requires_grad=True)
        b = Tensor(rng.normal(size=shape), requires_grad=True)
        rep = finite_diff_check(loss_through(concat_channels), [a, b])
        assert rep.passed, rep

    @pytest.mark.parametrize("shape", SHAPES)
    def test_add(self, shape):
        rng = np.random.default_rng(shape[2] * 11)
        a = Tensor(rng.normal(size=shape), requires_grad=True)
        b = Tensor(rng.normal(size=shape), requires_grad=True)
        rep = finite_diff_check(loss_through(add), [a, b])
        assert rep.passed, rep

    @pytest.mark.parametrize("shape", SHAPES)
    def test_softmax_cross_entropy(self, shape):
        rng = np.random.default_rng(shape[3] * 17)
        n, k, h, w = shape
        logits = Tensor(rng.normal(size=shape), requires_grad=True)
        labels = rng.integers(0, k, size=(n, h, w))
        rep = finite_diff_check(
            lambda t: softmax_cross_entropy(t, labels), [logits])
        assert rep.passed, rep


class TestGraphMechanics:
    def test_grad_accumulates_over_reuse(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
        tensor_sum(add(x, x)).backward()
        np.testing.assert_array_equal(x.grad, 2.0 * np.ones(x.shape))

    def test_zero_grad(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
        tensor_sum(x if False else relu(x)).backward()
        x.zero_grad()
        assert x.grad is None

    def test_no_grad_tracking_without_requires(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2)))
        out = relu(x)
        assert not out.requires_grad
        assert out._backward is None
